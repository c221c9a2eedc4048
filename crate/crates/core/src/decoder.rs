//! Non-autoregressive set decoder and the binary cross-entropy baseline head.
//!
//! The decoder turns `m` label queries into `m` distributions over `K + 1`
//! classes (index `K` is the empty label) in a single pass: no causal mask
//! and no positional encoding on the queries, so the output rows are
//! permutation-equivariant in the query rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedSentence;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Forward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of label queries.
    pub m: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    /// `K + 1`.
    pub num_classes: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn num_labels(&self) -> usize {
        self.num_classes - 1
    }

    pub fn null_index(&self) -> usize {
        self.num_classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.m == 0 || self.num_layers == 0 || self.d_model == 0 || self.ffn_width == 0 {
            return fail("m, num_layers, d_model and ffn_width must be positive".into());
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least one label plus the empty label".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// `m x (K + 1)` row-stochastic matrix on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PredictionSet {
    pub probs: Var,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    layers: Vec<DecoderLayer>,
    head: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let name = format!("decoder.layer{l}");
            layers.push(DecoderLayer {
                self_attention: MultiHeadAttention::new(
                    store,
                    &format!("{name}.self_attention"),
                    d,
                    config.num_heads,
                    rng,
                )?,
                self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
                cross_attention: MultiHeadAttention::new(
                    store,
                    &format!("{name}.cross_attention"),
                    d,
                    config.num_heads,
                    rng,
                )?,
                cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.ffn_width, rng),
                ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            });
        }
        let head = Linear::new(store, "decoder.head", d, config.num_classes, true, rng);
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn decode(
        &self,
        f: &mut Forward<'_>,
        queries: Var,
        memory: &EncodedSentence,
    ) -> Result<PredictionSet> {
        let qs = f.tape.shape(queries).to_vec();
        let ms = f.tape.shape(memory.hidden).to_vec();
        if qs.len() != 2
            || qs[1] != self.config.d_model
            || ms.len() != 2
            || ms[1] != self.config.d_model
        {
            return Err(Error::Config(format!(
                "decoder width {} does not match queries {qs:?} / memory {ms:?}",
                self.config.d_model
            )));
        }
        let dropout = self.config.dropout;
        let key_mask = memory
            .attention_mask
            .iter()
            .any(|m| !m)
            .then_some(memory.attention_mask.as_slice());
        let mut x = queries;
        for layer in &self.layers {
            let a = layer.self_attention.forward(f, x, x, None)?;
            let a = f.dropout(a, dropout)?;
            let r = f.tape.add(x, a)?;
            x = layer.self_norm.forward(f, r)?;
            let c = layer
                .cross_attention
                .forward(f, x, memory.hidden, key_mask)?;
            let c = f.dropout(c, dropout)?;
            let r = f.tape.add(x, c)?;
            x = layer.cross_norm.forward(f, r)?;
            let m = layer.ffn.forward(f, x, dropout)?;
            let m = f.dropout(m, dropout)?;
            let r = f.tape.add(x, m)?;
            x = layer.ffn_norm.forward(f, r)?;
        }
        let logits = self.head.forward(f, x)?;
        let probs = f.tape.softmax(logits)?;
        Ok(PredictionSet { probs })
    }
}

/// Row-wise argmax (first maximum on ties).
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let (r, c) = probs.dims2();
    (0..r)
        .map(|i| {
            let row = &probs.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Argmax per query, dropping the empty label and duplicates. Sorted.
pub fn predict_labels(probs: &Tensor, null_index: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = argmax_rows(probs)
        .into_iter()
        .filter(|&l| l != null_index)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Sigmoid readout of the `[CLS]` state over `K` labels.
#[derive(Debug, Clone, Copy)]
pub struct BceHead {
    pub linear: Linear,
    pub num_labels: usize,
}

impl BceHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d_model: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, "bce_head", d_model, num_labels, true, rng),
            num_labels,
        }
    }

    /// Returns the `1 x K` logits.
    pub fn logits(&self, f: &mut Forward<'_>, memory: &EncodedSentence) -> Result<Var> {
        let cls = f.tape.slice_rows(memory.hidden, 0, 1)?;
        self.linear.forward(f, cls)
    }

    /// Mean binary cross-entropy against the multi-hot encoding of `gold`.
    pub fn loss(&self, f: &mut Forward<'_>, logits: Var, gold: &[usize]) -> Result<Var> {
        let targets = multi_hot(gold, self.num_labels)?;
        f.tape.bce_with_logits(logits, &targets)
    }
}

pub fn multi_hot(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; k];
    for &l in labels {
        *v.get_mut(l)
            .ok_or_else(|| Error::Contract(format!("label {l} out of range for K = {k}")))? = 1.0;
    }
    Ok(v)
}

/// Labels whose sigmoid probability is at least one half.
pub fn bce_predict(probs: &[f64]) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= 0.5)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::vocab::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, k: usize) -> (ParamStore, Encoder, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(
            &mut store,
            EncoderConfig {
                vocab_size: 12,
                d_model: 8,
                num_layers: 1,
                num_heads: 2,
                ffn_width: 16,
                max_len: 10,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        let dec = Decoder::new(
            &mut store,
            DecoderConfig {
                m,
                num_layers: 2,
                num_heads: 2,
                d_model: 8,
                ffn_width: 16,
                num_classes: k + 1,
                dropout: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        (store, enc, dec)
    }

    fn queries(m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform_fan_in(&[m, 8], 1, &mut rng)
    }

    fn assert_row_stochastic(t: &Tensor) {
        let (r, _) = t.dims2();
        for i in 0..r {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.row(i).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn shape_and_normalization() {
        let (store, enc, dec) = setup(3, 7);
        let mut f = Forward::eval(&store);
        let mem = enc.encode(&mut f, &[CLS, 4, 5, SEP], None).unwrap();
        let q = f.tape.constant(queries(3, 1));
        let ps = dec.decode(&mut f, q, &mem).unwrap();
        assert_eq!(f.tape.shape(ps.probs), &[3, 8]);
        assert_row_stochastic(f.tape.value(ps.probs));
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let (store, enc, dec) = setup(3, 5);
        let q = queries(3, 2);
        let perm = [2, 0, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| q.row(i).to_vec()).collect();
        let qp = Tensor::from_rows(&rows).unwrap();
        let run = |q: Tensor| {
            let mut f = Forward::eval(&store);
            let mem = enc.encode(&mut f, &[CLS, 4, 5, 6, SEP], None).unwrap();
            let qv = f.tape.constant(q);
            let ps = dec.decode(&mut f, qv, &mem).unwrap();
            f.tape.value(ps.probs).clone()
        };
        let base = run(q);
        let permuted = run(qp);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in permuted.row(k).iter().zip(base.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn specials_only_memory_is_valid() {
        let (store, enc, dec) = setup(4, 3);
        let mut f = Forward::eval(&store);
        let mem = enc.encode(&mut f, &[CLS, SEP], None).unwrap();
        let q = f.tape.constant(queries(4, 3));
        let ps = dec.decode(&mut f, q, &mem).unwrap();
        assert_row_stochastic(f.tape.value(ps.probs));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (store, enc, dec) = setup(2, 3);
        let mut f = Forward::eval(&store);
        let mem = enc.encode(&mut f, &[CLS, SEP], None).unwrap();
        let q = f.tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(dec.decode(&mut f, q, &mem), Err(Error::Config(_))));
    }

    fn one_hot_rows(argmaxes: &[usize], classes: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = argmaxes
            .iter()
            .map(|&a| {
                let mut r = vec![0.1 / classes as f64; classes];
                r[a] = 0.9;
                r
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn prediction_rule() {
        assert!(predict_labels(&one_hot_rows(&[3, 3, 3], 4), 3).is_empty());
        assert_eq!(predict_labels(&one_hot_rows(&[2, 2, 3], 4), 3), vec![2]);
        assert_eq!(predict_labels(&one_hot_rows(&[3, 0], 5), 4), vec![0, 3]);
    }

    #[test]
    fn bce_zero_logits_give_half() {
        let mut t = crate::tape::Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 3]));
        let p = t.sigmoid(z);
        assert_eq!(t.value(p).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn bce_limit_and_formula() {
        let mut t = crate::tape::Tape::new();
        // probs (1 - eps, eps) against gold (1, 0)
        let mut prev = f64::INFINITY;
        for eps_exp in [2, 4, 8, 12] {
            let eps = 10f64.powi(-eps_exp);
            let logit = ((1.0 - eps) / eps).ln();
            let z = t.constant(Tensor::vector(vec![logit, -logit]));
            let l = t.bce_with_logits(z, &[1.0, 0.0]).unwrap();
            let v = t.value(l).item().unwrap();
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-11);

        let logits = [0.3, -1.2, 2.0];
        let gold = [1.0, 0.0, 1.0];
        let z = t.constant(Tensor::vector(logits.to_vec()));
        let l = t.bce_with_logits(z, &gold).unwrap();
        let direct: f64 = logits
            .iter()
            .zip(gold)
            .map(|(&z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((t.value(l).item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn bce_prediction_threshold() {
        assert_eq!(bce_predict(&[0.5, 0.49, 0.9]), vec![0, 2]);
        assert!(multi_hot(&[3], 3).is_err());
    }
}
