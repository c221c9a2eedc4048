//! Bipartite matching between padded gold labels and predicted
//! distributions, and the resulting set loss.
//!
//! Gold slot `i` holds label `l_i` or the empty label. Matching cost of gold
//! slot `i` against prediction `j` is `-p_j(l_i)` for real labels and zero
//! for empty slots; the loss then sums `-log p_{pi(i)}(l_i)` over all `m`
//! slots, empty ones included, with the assignment held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Gold labels padded with the empty label up to `m` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldSet {
    slots: Vec<usize>,
    null_index: usize,
}

impl GoldSet {
    /// `labels` must be distinct indices in `0..k`, at most `m` of them.
    pub fn new(labels: &[usize], m: usize, k: usize) -> Result<Self> {
        if labels.len() > m {
            return Err(Error::Contract(format!(
                "{} gold labels exceed the {m} query slots",
                labels.len()
            )));
        }
        for (a, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Contract(format!(
                    "gold label {l} out of range for K = {k}"
                )));
            }
            if labels[..a].contains(&l) {
                return Err(Error::Contract(format!("duplicate gold label {l}")));
            }
        }
        let mut slots = labels.to_vec();
        slots.resize(m, k);
        Ok(Self {
            slots,
            null_index: k,
        })
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn m(&self) -> usize {
        self.slots.len()
    }

    pub fn null_index(&self) -> usize {
        self.null_index
    }

    pub fn num_real(&self) -> usize {
        self.slots.iter().filter(|&&l| l != self.null_index).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `-p(l)`
    #[default]
    Prob,
    /// `-log p(l)`
    LogProb,
}

/// Square row-major cost matrix; rows are gold slots, columns predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape {
                op: "cost matrix",
                lhs: vec![n, n],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(n, data)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `sum_i cost[i][perm[i]]`, accumulated in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.at(i, j)).sum()
    }
}

/// `perm[i]` is the prediction assigned to gold slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

pub fn match_cost(gold: &GoldSet, probs: &Tensor, mode: CostMode) -> Result<CostMatrix> {
    let m = gold.m();
    let (rows, classes) = probs.dims2();
    if rows != m || classes != gold.null_index + 1 {
        return Err(Error::Shape {
            op: "match_cost",
            lhs: vec![m, gold.null_index + 1],
            rhs: probs.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; m * m];
    for (i, &l) in gold.slots.iter().enumerate() {
        if l == gold.null_index {
            continue;
        }
        for j in 0..m {
            let p = probs.at(j, l);
            data[i * m + j] = match mode {
                CostMode::Prob => -p,
                CostMode::LogProb => -p.ln(),
            };
        }
    }
    CostMatrix::new(m, data)
}

/// Minimum-cost assignment for a square submatrix, `O(n^3)` shortest
/// augmenting paths with potentials. Returns `perm[row] = col` over the
/// given row/column index lists.
fn hungarian_core(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return Vec::new();
    }
    let c = |i: usize, j: usize| cost.at(rows[i - 1], cols[j - 1]);
    // 1-based; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = cols[j - 1];
    }
    perm
}

fn sub_total(cost: &CostMatrix, rows: &[usize], perm: &[usize]) -> f64 {
    rows.iter().zip(perm).map(|(&r, &c)| cost.at(r, c)).sum()
}

fn check_finite(cost: &CostMatrix) -> Result<()> {
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain { op: "hungarian" });
    }
    Ok(())
}

/// Optimal assignment; among optimal permutations, the lexicographically
/// smallest one is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    check_finite(cost)?;
    let n = cost.n;
    let scale = cost.data.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * scale * n.max(1) as f64;

    let all: Vec<usize> = (0..n).collect();
    let mut target = sub_total(cost, &all, &hungarian_core(cost, &all, &all));
    let mut free: Vec<usize> = all.clone();
    let mut perm = Vec::with_capacity(n);
    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion.
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut fallback: Option<(f64, usize, f64)> = None;
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let rest = sub_total(
                cost,
                &rest_rows,
                &hungarian_core(cost, &rest_rows, &rest_cols),
            );
            let total = cost.at(i, j) + rest;
            if total <= target + tol {
                chosen = Some((pos, rest));
                break;
            }
            if fallback.is_none_or(|(best, _, _)| total < best) {
                fallback = Some((total, pos, rest));
            }
        }
        let (pos, rest) = chosen.unwrap_or_else(|| {
            let (_, pos, rest) = fallback.expect("at least one free column");
            (pos, rest)
        });
        perm.push(free.remove(pos));
        target = rest;
    }
    let total_cost = cost.total(&perm);
    Ok(Assignment { perm, total_cost })
}

/// Exhaustive search over all `n!` permutations in lexicographic order,
/// keeping the first strict minimum. Reference implementation for tests.
pub fn exhaustive_assignment(cost: &CostMatrix) -> Result<Assignment> {
    check_finite(cost)?;
    let n = cost.n;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = cost.total(&perm);
    while next_permutation(&mut perm) {
        let c = cost.total(&perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment {
        perm: best,
        total_cost: best_cost,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// `sum_i -log p_{perm[i]}(l_i)` over all slots; `perm` is a constant.
pub fn set_loss(
    f: &mut Forward<'_>,
    gold: &GoldSet,
    probs: Var,
    assignment: &Assignment,
) -> Result<Var> {
    let classes = gold.null_index + 1;
    let shape = f.tape.shape(probs);
    if shape != [gold.m(), classes] || assignment.perm.len() != gold.m() {
        return Err(Error::Shape {
            op: "set_loss",
            lhs: vec![gold.m(), classes],
            rhs: shape.to_vec(),
        });
    }
    // Summed in prediction order so the value does not depend on the order
    // in which gold labels were listed.
    let mut picks: Vec<usize> = gold
        .slots
        .iter()
        .zip(&assignment.perm)
        .map(|(&l, &j)| j * classes + l)
        .collect();
    picks.sort_unstable();
    let picked = f.tape.gather(probs, &picks)?;
    let logs = f.tape.log(picked);
    let total = f.tape.sum(logs);
    Ok(f.tape.scale(total, -1.0))
}

/// Solves the matching on the current forward values and returns the set
/// loss together with the assignment used.
pub fn matched_set_loss(
    f: &mut Forward<'_>,
    gold: &GoldSet,
    probs: Var,
    mode: CostMode,
) -> Result<(Var, Assignment)> {
    let cost = match_cost(gold, f.tape.value(probs), mode)?;
    let assignment = hungarian(&cost)?;
    let loss = set_loss(f, gold, probs, &assignment)?;
    Ok((loss, assignment))
}
