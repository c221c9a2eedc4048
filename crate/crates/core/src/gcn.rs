//! Graph convolution over the label graph and projection to decoder queries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Forward};
use crate::params::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `H(l+1) = h(S H(l) W(l))` for a fixed propagation matrix `S`, starting
/// from a learnable `K x c0` node feature table.
#[derive(Debug, Clone)]
pub struct GcnStack {
    pub node_features: ParamId,
    pub weights: Vec<ParamId>,
    pub activation: Activation,
    propagation: Tensor,
}

impl GcnStack {
    /// `widths` lists `c0, c1, ..., cL`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        propagation: Tensor,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let k = match propagation.shape() {
            [r, c] if r == c => *r,
            s => {
                return Err(Error::Config(format!(
                    "propagation matrix must be square, got {s:?}"
                )))
            }
        };
        if widths.len() < 2 {
            return Err(Error::Config("GCN needs at least one layer".into()));
        }
        let node_features = store.add(
            "gcn.node_features",
            Tensor::uniform_fan_in(&[k, widths[0]], 1, rng),
        );
        let weights = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                store.add(
                    format!("gcn.layer{l}.weight"),
                    Tensor::uniform_fan_in(&[w[0], w[1]], w[0], rng),
                )
            })
            .collect();
        Ok(Self {
            node_features,
            weights,
            activation,
            propagation,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.propagation.shape()[0]
    }

    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Returns `H(L)`, `K x cL`.
    pub fn forward(&self, f: &mut Forward<'_>) -> Result<Var> {
        let s = f.tape.constant(self.propagation.clone());
        let mut h = f.p(self.node_features);
        for &w in &self.weights {
            let w = f.p(w);
            let mixed = f.tape.matmul(s, h)?;
            let lin = f.tape.matmul(mixed, w)?;
            h = self.activation.apply(&mut f.tape, lin);
        }
        Ok(h)
    }
}

/// `Q = Wq H(L)` with `Wq: m x K`.
#[derive(Debug, Clone, Copy)]
pub struct QueryProjection {
    pub weight: ParamId,
}

impl QueryProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, m: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(
                "gcn.query_projection",
                Tensor::uniform_fan_in(&[m, k], k, rng),
            ),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, node_repr: Var) -> Result<Var> {
        let w = f.p(self.weight);
        f.tape.matmul(w, node_repr)
    }
}
