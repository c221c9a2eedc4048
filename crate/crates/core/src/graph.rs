//! Label co-occurrence graph.
//!
//! Pipeline: pair counts `C` over the training label sets, conditional
//! probabilities `P_ij = C_ij / C_i.`, truncation at `tau` into a weighted
//! adjacency `A`, re-weighting into `A'` (mass `p_self` spread over a node's
//! neighbours, `1 - p_self` kept on itself), and finally the symmetric
//! normalization `D^-1/2 (A' + I) D^-1/2` consumed by the GCN.
//!
//! `P` is not symmetric in general, so neither are `A'` nor the
//! propagation matrix; the normalization is applied as-is.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pair and single-label counts over a set of label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    k: usize,
    /// Row-major `K x K`; the diagonal holds the occurrence counts.
    pairs: Vec<u64>,
    occurrences: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn num_labels(&self) -> usize {
        self.k
    }

    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.pairs[i * self.k + j]
    }

    pub fn occurrences(&self) -> &[u64] {
        &self.occurrences
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.k, self.k],
            self.pairs.iter().map(|&c| c as f64).collect(),
        )
        .expect("K x K counts")
    }
}

/// Counts, per label pair, the training samples containing both labels.
/// Each sample contributes at most once to any pair.
pub fn build_counts(label_sets: &[Vec<usize>], k: usize) -> Result<CooccurrenceCounts> {
    if label_sets.is_empty() {
        return Err(Error::Graph("training set is empty".into()));
    }
    let mut pairs = vec![0u64; k * k];
    let mut occurrences = vec![0u64; k];
    for (n, labels) in label_sets.iter().enumerate() {
        for (a, &i) in labels.iter().enumerate() {
            if i >= k {
                return Err(Error::Contract(format!(
                    "sample {n}: label index {i} out of range for K = {k}"
                )));
            }
            if labels[..a].contains(&i) {
                return Err(Error::Contract(format!("sample {n}: duplicate label {i}")));
            }
        }
        for &i in labels {
            occurrences[i] += 1;
            for &j in labels {
                pairs[i * k + j] += 1;
            }
        }
    }
    Ok(CooccurrenceCounts {
        k,
        pairs,
        occurrences,
    })
}

/// `P_ij = C_ij / C_i.` off the diagonal; zero rows for labels that never occur.
pub fn conditional_probabilities(counts: &CooccurrenceCounts) -> Tensor {
    let k = counts.k;
    let mut p = vec![0.0; k * k];
    for i in 0..k {
        let occ = counts.occurrences[i];
        if occ == 0 {
            continue;
        }
        for j in 0..k {
            if i != j {
                p[i * k + j] = counts.pair(i, j) as f64 / occ as f64;
            }
        }
    }
    Tensor::new(vec![k, k], p).expect("K x K")
}

fn check_square(m: &Tensor, what: &str) -> Result<usize> {
    match m.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::Contract(format!("{what} must be square, got {s:?}"))),
    }
}

/// Keeps off-diagonal weights `P_ij >= tau`, zeroing the rest and the diagonal.
pub fn threshold(p: &Tensor, tau: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    let k = check_square(p, "conditional probability matrix")?;
    let mut a = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let v = p.at(i, j);
            if i != j && v >= tau && v > 0.0 {
                a[i * k + j] = v;
            }
        }
    }
    Tensor::new(vec![k, k], a)
}

/// Spreads `p_self` over each node's retained neighbours in proportion to
/// their weights and keeps `1 - p_self` on the node. Nodes without
/// neighbours become pure self-loops.
pub fn reweight(a: &Tensor, p_self: f64) -> Result<Tensor> {
    if !(p_self > 0.0 && p_self < 1.0) {
        return Err(Error::Config(format!(
            "p_self must lie in (0, 1), got {p_self}"
        )));
    }
    let k = check_square(a, "adjacency")?;
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        let row_sum: f64 = (0..k).filter(|&j| j != i).map(|j| a.at(i, j)).sum();
        if row_sum > 0.0 {
            for j in 0..k {
                if j != i {
                    out[i * k + j] = p_self * a.at(i, j) / row_sum;
                }
            }
            out[i * k + i] = 1.0 - p_self;
        } else {
            out[i * k + i] = 1.0;
        }
    }
    Tensor::new(vec![k, k], out)
}

pub fn threshold_and_reweight(p: &Tensor, tau: f64, p_self: f64) -> Result<(Tensor, Tensor)> {
    // Validate both before doing any work.
    if !(p_self > 0.0 && p_self < 1.0) {
        return Err(Error::Config(format!(
            "p_self must lie in (0, 1), got {p_self}"
        )));
    }
    let a = threshold(p, tau)?;
    let a_prime = reweight(&a, p_self)?;
    Ok((a, a_prime))
}

/// `D^-1/2 (A' + I) D^-1/2` with `D_ii = sum_j (A' + I)_ij`.
pub fn normalized_propagation(a_prime: &Tensor) -> Result<Tensor> {
    let k = check_square(a_prime, "re-weighted adjacency")?;
    let mut tilde = a_prime.data().to_vec();
    for i in 0..k {
        tilde[i * k + i] += 1.0;
    }
    let degree: Vec<f64> = (0..k)
        .map(|i| tilde[i * k..(i + 1) * k].iter().sum())
        .collect();
    for i in 0..k {
        for j in 0..k {
            let dd = degree[i] * degree[j];
            tilde[i * k + j] = if dd > 0.0 {
                tilde[i * k + j] / dd.sqrt()
            } else {
                0.0
            };
        }
    }
    Tensor::new(vec![k, k], tilde)
}

/// All graph matrices built from one training split.
#[derive(Debug, Clone)]
pub struct LabelGraph {
    pub counts: CooccurrenceCounts,
    pub cond_prob: Tensor,
    pub adjacency: Tensor,
    pub reweighted: Tensor,
    pub propagation: Tensor,
    pub tau: f64,
    pub p_self: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSummary {
    pub num_labels: usize,
    /// Non-zero off-diagonal entries of `A` (directed edges).
    pub edges: usize,
    pub isolated: Vec<usize>,
}

impl LabelGraph {
    pub fn build(label_sets: &[Vec<usize>], k: usize, tau: f64, p_self: f64) -> Result<Self> {
        let counts = build_counts(label_sets, k)?;
        let cond_prob = conditional_probabilities(&counts);
        let (adjacency, reweighted) = threshold_and_reweight(&cond_prob, tau, p_self)?;
        let propagation = normalized_propagation(&reweighted)?;
        Ok(Self {
            counts,
            cond_prob,
            adjacency,
            reweighted,
            propagation,
            tau,
            p_self,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.counts.k
    }

    pub fn summary(&self) -> GraphSummary {
        let k = self.num_labels();
        let mut edges = 0;
        let mut isolated = Vec::new();
        for i in 0..k {
            let n = (0..k)
                .filter(|&j| j != i && self.adjacency.at(i, j) != 0.0)
                .count();
            edges += n;
            if n == 0 {
                isolated.push(i);
            }
        }
        GraphSummary {
            num_labels: k,
            edges,
            isolated,
        }
    }
}

/// Writes a square matrix: a line with `K`, then `K` whitespace-separated rows.
pub fn write_matrix(w: &mut impl Write, m: &Tensor) -> std::io::Result<()> {
    let (r, c) = m.dims2();
    writeln!(w, "{r}")?;
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{}", m.at(i, j))).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix(r: impl BufRead) -> Result<Tensor> {
    let mut lines = r.lines();
    let bad = |msg: String| Error::Validation(format!("matrix dump: {msg}"));
    let header = lines
        .next()
        .ok_or_else(|| bad("missing header".into()))?
        .map_err(|e| Error::io("reading matrix dump", e))?;
    let k: usize = header
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad header {header:?}")))?;
    let mut data = Vec::with_capacity(k * k);
    for i in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing row {i}")))?
            .map_err(|e| Error::io("reading matrix dump", e))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("row {i} is not numeric")))?;
        if row.len() != k {
            return Err(bad(format!("row {i} has {} entries", row.len())));
        }
        data.extend(row);
    }
    Tensor::new(vec![k, k], data)
}
