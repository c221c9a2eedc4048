//! The assembled classifier: encoder, label queries, set decoder or BCE head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::decoder::{bce_predict, predict_labels, BceHead, Decoder, DecoderConfig};
use crate::diversity::total_loss;
use crate::encoder::{EncodedSentence, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gcn::{GcnStack, QueryProjection};
use crate::graph::LabelGraph;
use crate::matching::{matched_set_loss, CostMode, GoldSet};
use crate::nn::{Activation, Forward};
use crate::params::{ParamId, ParamStore};
use crate::tape::{sigmoid, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    SetPrediction,
    Bce,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set_prediction" => Ok(Head::SetPrediction),
            "bce" => Ok(Head::Bce),
            other => Err(Error::Config(format!(
                "unknown head '{other}' (expected set_prediction or bce)"
            ))),
        }
    }
}

/// User-facing model hyperparameters. Corpus-dependent sizes are filled in
/// by [`ModelConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Number of queries; `None` picks max gold set size + 2, capped at K.
    pub m: Option<usize>,
    pub gcn_layers: usize,
    /// Width of the learnable node features `H^(0)`; defaults to `d_model`.
    pub gcn_input: Option<usize>,
    /// Width of the intermediate GCN layers; defaults to `d_model`.
    pub gcn_hidden: Option<usize>,
    /// Width of the last GCN layer; must equal `d_model`.
    pub gcn_output: Option<usize>,
    pub tau: f64,
    pub p_self: f64,
    pub lambda: f64,
    pub cost_mode: CostMode,
    pub use_gcn: bool,
    pub use_bc: bool,
    pub head: Head,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_width: 128,
            max_len: 128,
            dropout: 0.1,
            m: None,
            gcn_layers: 2,
            gcn_input: None,
            gcn_hidden: None,
            gcn_output: None,
            tau: 0.1,
            p_self: 0.25,
            lambda: 0.1,
            cost_mode: CostMode::Prob,
            use_gcn: true,
            use_bc: true,
            head: Head::SetPrediction,
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.p_self > 0.0 && self.p_self < 1.0) {
            return fail(format!("p_self must lie in (0, 1), got {}", self.p_self));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        if self.gcn_layers == 0 {
            return fail("gcn_layers must be at least 1".into());
        }
        if self.m == Some(0) {
            return fail("m must be positive".into());
        }
        Ok(())
    }

    /// `lambda`, or zero when the diversity term is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.use_bc {
            self.lambda
        } else {
            0.0
        }
    }

    /// `c0, c1, ..., cL`.
    pub fn gcn_widths(&self) -> Vec<usize> {
        let d = self.d_model;
        let mut w = vec![self.gcn_input.unwrap_or(d)];
        w.extend(std::iter::repeat_n(
            self.gcn_hidden.unwrap_or(d),
            self.gcn_layers - 1,
        ));
        w.push(self.gcn_output.unwrap_or(d));
        w
    }
}

/// Settings plus the sizes fixed by the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub settings: ModelSettings,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub m: usize,
}

impl ModelConfig {
    pub fn resolve(
        settings: ModelSettings,
        vocab_size: usize,
        num_labels: usize,
        max_gold: usize,
    ) -> Result<Self> {
        settings.validate()?;
        if num_labels == 0 {
            return Err(Error::Config("the training split has no labels".into()));
        }
        let m = match settings.m {
            Some(m) => m,
            None => (max_gold + 2).min(num_labels).max(max_gold),
        };
        if settings.head == Head::SetPrediction && m < max_gold {
            return Err(Error::Config(format!(
                "m = {m} is smaller than the largest training label set ({max_gold})"
            )));
        }
        let config = Self {
            settings,
            vocab_size,
            num_labels,
            m,
        };
        config.encoder().validate()?;
        config.decoder().validate()?;
        Ok(config)
    }

    pub fn encoder(&self) -> EncoderConfig {
        let s = &self.settings;
        EncoderConfig {
            vocab_size: self.vocab_size,
            d_model: s.d_model,
            num_layers: s.encoder_layers,
            num_heads: s.num_heads,
            ffn_width: s.ffn_width,
            max_len: s.max_len,
            dropout: s.dropout,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let s = &self.settings;
        DecoderConfig {
            m: self.m,
            num_layers: s.decoder_layers,
            num_heads: s.num_heads,
            d_model: s.d_model,
            ffn_width: s.ffn_width,
            num_classes: self.num_labels + 1,
            dropout: s.dropout,
        }
    }
}

/// Where the decoder's `m x d` queries come from.
#[derive(Debug, Clone)]
pub enum QuerySource {
    Gcn {
        stack: GcnStack,
        projection: QueryProjection,
    },
    /// The wo/GCN ablation: a free learnable table.
    Table(ParamId),
}

/// Per-sample model output before any loss.
#[derive(Debug, Clone, Copy)]
pub enum Output {
    /// `m x (K + 1)` row-stochastic matrix.
    Set(Var),
    /// `1 x K` logits.
    Bce(Var),
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub queries: Option<QuerySource>,
    pub decoder: Option<Decoder>,
    pub bce: Option<BceHead>,
}

impl Model {
    /// Builds a freshly initialized model. `propagation` is the `K x K`
    /// normalized label graph and is required when the GCN is enabled.
    pub fn new(config: ModelConfig, propagation: Option<Tensor>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder(), &mut rng)?;
        let s = &config.settings;
        let (queries, decoder, bce) = match s.head {
            Head::SetPrediction => {
                let queries = if s.use_gcn {
                    let propagation = propagation.ok_or_else(|| {
                        Error::Config("the GCN query source needs a label graph".into())
                    })?;
                    if propagation.shape() != [config.num_labels, config.num_labels] {
                        return Err(Error::Config(format!(
                            "label graph is {:?} but K = {}",
                            propagation.shape(),
                            config.num_labels
                        )));
                    }
                    let widths = s.gcn_widths();
                    if *widths.last().unwrap() != s.d_model {
                        return Err(Error::Config(format!(
                            "last GCN width {} does not match decoder width {}",
                            widths.last().unwrap(),
                            s.d_model
                        )));
                    }
                    let stack = GcnStack::new(
                        &mut params,
                        propagation,
                        &widths,
                        Activation::LeakyRelu,
                        &mut rng,
                    )?;
                    let projection =
                        QueryProjection::new(&mut params, config.m, config.num_labels, &mut rng);
                    QuerySource::Gcn { stack, projection }
                } else {
                    let table = Tensor::uniform_fan_in(&[config.m, s.d_model], 1, &mut rng);
                    QuerySource::Table(params.add("query_table", table))
                };
                let decoder = Decoder::new(&mut params, config.decoder(), &mut rng)?;
                (Some(queries), Some(decoder), None)
            }
            Head::Bce => {
                let head = BceHead::new(&mut params, s.d_model, config.num_labels, &mut rng);
                (None, None, Some(head))
            }
        };
        Ok(Self {
            config,
            params,
            encoder,
            queries,
            decoder,
            bce,
        })
    }

    /// Builds the label graph from `corpus.train` and a model sized to the
    /// corpus.
    pub fn for_corpus(
        corpus: &Corpus,
        settings: ModelSettings,
        seed: u64,
    ) -> Result<(Self, LabelGraph)> {
        let k = corpus.labels.len();
        let graph =
            LabelGraph::build(&corpus.train.label_sets(), k, settings.tau, settings.p_self)?;
        let config =
            ModelConfig::resolve(settings, corpus.tokens.len(), k, corpus.train.max_labels())?;
        let model = Self::new(config, Some(graph.propagation.clone()), seed)?;
        Ok((model, graph))
    }

    pub fn propagation(&self) -> Option<&Tensor> {
        match &self.queries {
            Some(QuerySource::Gcn { stack, .. }) => Some(stack.propagation()),
            _ => None,
        }
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for id in self.encoder.param_ids(&self.params) {
            self.params.set_frozen(id, frozen);
        }
    }

    /// The `m x d` queries. Sample-independent, so one call per tape suffices.
    pub fn queries(&self, f: &mut Forward<'_>) -> Result<Option<Var>> {
        match &self.queries {
            None => Ok(None),
            Some(QuerySource::Table(id)) => Ok(Some(f.p(*id))),
            Some(QuerySource::Gcn { stack, projection }) => {
                let h = stack.forward(f)?;
                Ok(Some(projection.forward(f, h)?))
            }
        }
    }

    pub fn encode(&self, f: &mut Forward<'_>, tokens: &[usize]) -> Result<EncodedSentence> {
        self.encoder.encode(f, tokens, None)
    }

    /// `queries` must come from [`Model::queries`] on the same tape.
    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        queries: Option<Var>,
        tokens: &[usize],
    ) -> Result<Output> {
        let memory = self.encode(f, tokens)?;
        match (&self.decoder, &self.bce, queries) {
            (Some(decoder), _, Some(q)) => Ok(Output::Set(decoder.decode(f, q, &memory)?.probs)),
            (_, Some(head), _) => Ok(Output::Bce(head.logits(f, &memory)?)),
            _ => Err(Error::Contract("set decoder called without queries".into())),
        }
    }

    /// Training objective for one sample.
    pub fn sample_loss(
        &self,
        f: &mut Forward<'_>,
        queries: Option<Var>,
        tokens: &[usize],
        gold: &[usize],
    ) -> Result<Var> {
        match self.forward(f, queries, tokens)? {
            Output::Set(probs) => {
                let gold = GoldSet::new(gold, self.config.m, self.config.num_labels)?;
                let (set, _) = matched_set_loss(f, &gold, probs, self.config.settings.cost_mode)?;
                total_loss(f, set, probs, self.config.settings.effective_lambda())
            }
            Output::Bce(logits) => self.bce.as_ref().expect("bce head").loss(f, logits, gold),
        }
    }

    /// Predicted label indices for one tokenized sample, sorted.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut f = Forward::eval(&self.params);
        let q = self.queries(&mut f)?;
        match self.forward(&mut f, q, tokens)? {
            Output::Set(probs) => Ok(predict_labels(f.tape.value(probs), self.config.num_labels)),
            Output::Bce(logits) => {
                let probs: Vec<f64> = f
                    .tape
                    .value(logits)
                    .data()
                    .iter()
                    .map(|&z| sigmoid(z))
                    .collect();
                Ok(bce_predict(&probs))
            }
        }
    }

    pub fn predict_all<'a>(
        &self,
        samples: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Vec<Vec<usize>>> {
        samples.into_iter().map(|t| self.predict(t)).collect()
    }

    /// Copies every parameter value out, in store order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|(_, _, t)| t.data().to_vec())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for (id, values) in ids.into_iter().zip(snapshot) {
            self.params.get_mut(id).data_mut().copy_from_slice(values);
        }
    }
}
