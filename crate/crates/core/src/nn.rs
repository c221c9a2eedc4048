//! Layers composed from tape primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive bias applied to attention logits of masked key positions.
/// Large enough that `exp` underflows to exactly zero after max subtraction.
pub const MASK_BIAS: f64 = -1e9;

/// One forward pass: a fresh tape over a borrowed parameter store, plus an
/// optional RNG that enables dropout.
pub struct Forward<'p> {
    pub tape: Tape,
    pub params: &'p ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Forward<'p> {
    pub fn eval(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            rng: None,
        }
    }

    pub fn train(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_const(x, &Tensor::new(shape, mask)?)
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Gelu,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform_fan_in(&[input, output], input, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::uniform_fan_in(&[output], input, rng),
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
            width,
        })
    }

    /// Attends from `queries` (`n x d`) over `keys_values` (`s x d`).
    /// Key positions with `key_mask[j] == false` receive zero weight.
    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let n = f.tape.shape(queries)[0];
        let s = f.tape.shape(keys_values)[0];
        let bias = match key_mask {
            Some(mask) if mask.len() != s => {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![s],
                    rhs: vec![mask.len()],
                })
            }
            Some(mask) if mask.iter().any(|m| !m) => {
                let row: Vec<f64> = mask
                    .iter()
                    .map(|&m| if m { 0.0 } else { MASK_BIAS })
                    .collect();
                Some(Tensor::new(vec![n, s], row.repeat(n))?)
            }
            _ => None,
        };
        let q = self.query.forward(f, queries)?;
        let k = self.key.forward(f, keys_values)?;
        let v = self.value.forward(f, keys_values)?;
        let head_width = self.width / self.heads;
        let scale = 1.0 / (head_width as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_width;
            let qh = f.tape.slice_cols(q, start, head_width)?;
            let kh = f.tape.slice_cols(k, start, head_width)?;
            let vh = f.tape.slice_cols(v, start, head_width)?;
            let scores = f.tape.matmul_bt(qh, kh)?;
            let mut scores = f.tape.scale(scores, scale);
            if let Some(bias) = &bias {
                scores = f.tape.add_const(scores, bias)?;
            }
            let weights = f.tape.softmax(scores)?;
            heads.push(f.tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            f.tape.concat_cols(&heads)?
        };
        self.output.forward(f, joined)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.gelu(h);
        let h = f.dropout(h, dropout)?;
        self.down.forward(f, h)
    }
}
