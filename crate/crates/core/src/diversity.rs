//! Bhattacharyya overlap penalty over the predicted distributions.
//!
//! The penalty sums the Bhattacharyya coefficient `sum_i sqrt(p_i q_i)` over
//! every unordered pair of distinct rows. It is an overlap (1 for identical
//! rows, 0 for disjoint support), so minimizing it spreads the rows apart.

use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tape::Var;

/// Lower clamp on each `p_i q_i` product before the square root.
pub const PRODUCT_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if p.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::Contract(format!(
            "{which} has negative or NaN entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Contract(format!("{which} sums to {s}, not 1")));
    }
    Ok(())
}

/// Bhattacharyya coefficient of two probability vectors.
pub fn bhattacharyya_pair(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "bhattacharyya_pair",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum())
}

/// Sum of pairwise coefficients over the rows of `probs` (`m x C`),
/// `m (m - 1) / 2` terms. Zero when `m == 1`.
pub fn bc_penalty(f: &mut Forward<'_>, probs: Var) -> Result<Var> {
    let (m, c) = match f.tape.shape(probs) {
        [m, c] => (*m, *c),
        s => {
            return Err(Error::Shape {
                op: "bc_penalty",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if m < 2 {
        let zero = f.tape.constant(crate::tensor::Tensor::scalar(0.0));
        return Ok(zero);
    }
    // Elementwise products for every pair (a, b), a < b, laid out as rows.
    let mut left = Vec::with_capacity(m * (m - 1) / 2 * c);
    let mut right = Vec::with_capacity(left.capacity());
    for a in 0..m {
        for b in a + 1..m {
            left.extend((0..c).map(|i| a * c + i));
            right.extend((0..c).map(|i| b * c + i));
        }
    }
    let pa = f.tape.gather(probs, &left)?;
    let pb = f.tape.gather(probs, &right)?;
    let prod = f.tape.mul(pa, pb)?;
    let prod = f.tape.clamp_min(prod, PRODUCT_FLOOR);
    let roots = f.tape.sqrt(prod);
    Ok(f.tape.sum(roots))
}

/// `set_loss + lambda * bc_penalty`. With `lambda == 0` the penalty is not
/// recorded at all, so the result is exactly the set loss.
pub fn total_loss(f: &mut Forward<'_>, set_loss: Var, probs: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be a finite non-negative number, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(set_loss);
    }
    let bc = bc_penalty(f, probs)?;
    let weighted = f.tape.scale(bc, lambda);
    f.tape.add(set_loss, weighted)
}
