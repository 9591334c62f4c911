//! Cross-entropy, KL divergence and the alternative similarity distances,
//! both as plain functions on probability vectors and as graph operations.
//!
//! All logarithms are natural. Probabilities are clamped below at
//! [`PROB_FLOOR`] before any logarithm.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;
const SUM_TOL: f64 = 1e-6;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || (s - 1.0).abs() > SUM_TOL || p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `-ln(max(p[target], 1e-12))`.
pub fn cross_entropy(prediction: &[f64], target: usize) -> Result<f64> {
    check_distribution(prediction, "prediction")?;
    let p = *prediction
        .get(target)
        .ok_or(Error::IndexOutOfRange { index: target, len: prediction.len() })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `Σ P_i (ln max(P_i, 1e-12) − ln max(Q_i, 1e-12))`; zero-mass terms of `P` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("KL of lengths {} and {}", p.len(), q.len())));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

/// Mean over rows of `-ln(max(P[r, t_r], 1e-12))`.
pub fn cross_entropy_graph(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var> {
    let m = g.value(probs);
    if targets.len() != m.rows {
        return Err(Error::shape(format!("{} targets for {} rows", targets.len(), m.rows)));
    }
    let cols = m.cols;
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::IndexOutOfRange { index: t, len: cols });
    }
    let flat = targets.iter().enumerate().map(|(r, &t)| r * cols + t).collect();
    let picked = g.gather(probs, flat)?;
    let clamped = g.clamp_min(picked, PROB_FLOOR);
    let logs = g.log(clamped);
    let m = g.mean(logs);
    Ok(g.neg(m))
}

/// Mean over rows of the row-wise KL(P‖Q).
pub fn kl_divergence_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let rows = g.value(p).rows as f64;
    let pc = g.clamp_min(p, PROB_FLOOR);
    let qc = g.clamp_min(q, PROB_FLOOR);
    let lp = g.log(pc);
    let lq = g.log(qc);
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / rows))
}

/// Mean over rows of `1 − cos(P_r, Q_r)`.
pub fn cosine_distance_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let rows = g.value(p).rows as f64;
    let pq = g.mul(p, q)?;
    let dot = g.sum_cols(pq);
    let pp = g.square(p);
    let np = g.sum_cols(pp);
    let qq = g.square(q);
    let nq = g.sum_cols(qq);
    let denom = g.mul(np, nq)?;
    let denom = g.clamp_min(denom, 1e-24);
    let ld = g.log(denom);
    let ld = g.scale(ld, -0.5);
    let inv = g.exp(ld);
    let cos = g.mul(dot, inv)?;
    let s = g.sum(cos);
    let mean_cos = g.scale(s, 1.0 / rows);
    let neg = g.neg(mean_cos);
    Ok(g.add_const(neg, 1.0))
}

/// Mean over rows of the mean squared difference.
pub fn mse_graph(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let d = g.sub(p, q)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
