//! Small trainable transformer sentence encoder.
//!
//! Token plus learned absolute position embeddings, followed by post-norm
//! transformer blocks. Produces one `d_model` vector per input position.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Forward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vocab::{CLS, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.vocab_size == 0 || self.d_model == 0 || self.num_layers == 0 || self.ffn_width == 0
        {
            return fail("vocab_size, d_model, num_layers and ffn_width must be positive".into());
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Per-position hidden states `l x d` and the mask of real positions.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub hidden: Var,
    pub attention_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    truncations: AtomicUsize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.add(
            "encoder.token_embedding",
            Tensor::uniform_fan_in(&[config.vocab_size, d], d, rng),
        );
        let position_embedding = store.add(
            "encoder.position_embedding",
            Tensor::uniform_fan_in(&[config.max_len, d], d, rng),
        );
        let embedding_norm = LayerNorm::new(store, "encoder.embedding_norm", d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let name = format!("encoder.layer{l}");
            layers.push(EncoderLayer {
                attention: MultiHeadAttention::new(
                    store,
                    &format!("{name}.attention"),
                    d,
                    config.num_heads,
                    rng,
                )?,
                attention_norm: LayerNorm::new(store, &format!("{name}.attention_norm"), d),
                ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.ffn_width, rng),
                ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            });
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            embedding_norm,
            layers,
            truncations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameters owned by the encoder (used by the freeze flag).
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, name, _)| name.starts_with("encoder."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Number of inputs truncated to `max_len` so far.
    pub fn truncation_count(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Fits a (possibly right-padded) sequence into `max_len`.
    ///
    /// Over-long real content keeps `[CLS]`, the first `max_len - 2` tokens
    /// and `[SEP]`; excess padding is simply cut.
    fn fit(&self, tokens: &[usize], mask: &[bool]) -> Result<(Vec<usize>, Vec<bool>)> {
        let real = mask.iter().take_while(|&&m| m).count();
        if mask[real..].iter().any(|&m| m) {
            return Err(Error::Contract(
                "attention mask must be a real prefix followed by padding".into(),
            ));
        }
        if real < 2 || tokens[0] != CLS || tokens[real - 1] != SEP {
            return Err(Error::Contract(
                "sequence must start with [CLS] and end with [SEP]".into(),
            ));
        }
        let max_len = self.config.max_len;
        if tokens.len() <= max_len {
            return Ok((tokens.to_vec(), mask.to_vec()));
        }
        if real > max_len {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!("truncating sequence of {real} tokens to {max_len}");
            let mut t = tokens[..max_len - 1].to_vec();
            t.push(SEP);
            return Ok((t, vec![true; max_len]));
        }
        Ok((tokens[..max_len].to_vec(), mask[..max_len].to_vec()))
    }

    /// Encodes one sequence. `mask`, when given, marks real positions.
    pub fn encode(
        &self,
        f: &mut Forward<'_>,
        tokens: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<EncodedSentence> {
        let full_mask;
        let mask = match mask {
            Some(m) if m.len() != tokens.len() => {
                return Err(Error::Shape {
                    op: "encode",
                    lhs: vec![tokens.len()],
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m,
            None => {
                full_mask = vec![true; tokens.len()];
                &full_mask
            }
        };
        let (tokens, mask) = self.fit(tokens, mask)?;
        let l = tokens.len();
        let dropout = self.config.dropout;

        let table = f.p(self.token_embedding);
        let tok = f.tape.embedding(table, &tokens)?;
        let pos_table = f.p(self.position_embedding);
        let positions: Vec<usize> = (0..l).collect();
        let pos = f.tape.embedding(pos_table, &positions)?;
        let mut h = f.tape.add(tok, pos)?;
        h = self.embedding_norm.forward(f, h)?;
        h = f.dropout(h, dropout)?;

        let key_mask = mask.iter().any(|m| !m).then_some(mask.as_slice());
        for layer in &self.layers {
            let a = layer.attention.forward(f, h, h, key_mask)?;
            let a = f.dropout(a, dropout)?;
            let r = f.tape.add(h, a)?;
            h = layer.attention_norm.forward(f, r)?;
            let m = layer.ffn.forward(f, h, dropout)?;
            let m = f.dropout(m, dropout)?;
            let r = f.tape.add(h, m)?;
            h = layer.ffn_norm.forward(f, r)?;
        }
        Ok(EncodedSentence {
            hidden: h,
            attention_mask: mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::PAD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_width: 16,
            max_len: 6,
            dropout: 0.1,
        }
    }

    fn build() -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, config(), &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = config();
        c.max_len = 2;
        assert!(c.validate().is_err());
        let mut c = config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cls_sep_shape() {
        let (store, enc) = build();
        let mut f = Forward::eval(&store);
        let out = enc.encode(&mut f, &[CLS, SEP], None).unwrap();
        assert_eq!(f.tape.shape(out.hidden), &[2, 8]);
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let (store, enc) = build();
        let run = || {
            let mut f = Forward::eval(&store);
            let out = enc.encode(&mut f, &[CLS, 5, 6, SEP], None).unwrap();
            f.tape.value(out.hidden).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn over_length_is_truncated_and_counted() {
        let (store, enc) = build();
        let mut tokens = vec![CLS];
        tokens.extend(std::iter::repeat_n(7, enc.config().max_len + 3));
        tokens.push(SEP);
        assert_eq!(tokens.len(), enc.config().max_len + 5);
        let mut f = Forward::eval(&store);
        let out = enc.encode(&mut f, &tokens, None).unwrap();
        assert_eq!(f.tape.shape(out.hidden)[0], enc.config().max_len);
        assert_eq!(enc.truncation_count(), 1);
    }

    #[test]
    fn out_of_vocabulary_index_errors() {
        let (store, enc) = build();
        let mut f = Forward::eval(&store);
        let err = enc.encode(&mut f, &[CLS, 20, SEP], None).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { index: 20, .. }));
    }

    #[test]
    fn missing_special_tokens_rejected() {
        let (store, enc) = build();
        let mut f = Forward::eval(&store);
        assert!(enc.encode(&mut f, &[5, 6, SEP], None).is_err());
        assert!(enc.encode(&mut f, &[CLS, 6], None).is_err());
    }

    #[test]
    fn padding_content_does_not_leak() {
        let (store, enc) = build();
        let real = [CLS, 4, 9, SEP];
        let mask = [true, true, true, true, false, false];
        let run = |tail: [usize; 2]| {
            let mut tokens = real.to_vec();
            tokens.extend(tail);
            let mut f = Forward::eval(&store);
            let out = enc.encode(&mut f, &tokens, Some(&mask)).unwrap();
            f.tape.value(out.hidden).data()[..4 * 8].to_vec()
        };
        assert_eq!(run([PAD, PAD]), run([11, 13]));
        assert_eq!(run([PAD, PAD]), run([13, 11]));
    }
}
