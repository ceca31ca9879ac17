//! Per-scale losses: soft-target KL below the last scale, heteroscedastic
//! Gaussian NLL (or cross-entropy, as an ablation) at the last scale, and
//! their average.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_scale: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_scales(per_scale: Vec<f64>) -> Result<Self> {
        let total = total_loss(&per_scale)?;
        Ok(LossBreakdown { per_scale, total })
    }
}

/// Arithmetic mean of the per-scale losses.
pub fn total_loss(per_scale: &[f64]) -> Result<f64> {
    if per_scale.is_empty() {
        return Err(Error::Invalid("no per-scale losses to average".into()));
    }
    Ok(per_scale.iter().sum::<f64>() / per_scale.len() as f64)
}

fn check_distribution_rows(q: &Mat) -> Result<()> {
    for (i, row) in q.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Invalid(format!("target row {i} is not a distribution (sums to {s})")));
        }
    }
    Ok(())
}

/// Σ q ln q over all entries, with 0 ln 0 = 0.
fn neg_entropy(q: &Mat) -> f64 {
    q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// Mean over rows of `KL(q_row ‖ softmax(logits_row))`.
pub fn soft_kl(logits: &Mat, q: &Mat) -> Result<f64> {
    if logits.dim() != q.dim() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.dim(), q.dim())));
    }
    check_distribution_rows(q)?;
    let mut total = 0.0;
    for (lrow, qrow) in logits.rows().into_iter().zip(q.rows()) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lrow.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (l, &p) in lrow.iter().zip(qrow.iter()) {
            if p > 0.0 {
                total += p * (p.ln() - (l - lse));
            }
        }
    }
    Ok(total / logits.nrows() as f64)
}

/// Differentiable [`soft_kl`].
pub fn soft_kl_on(g: &mut Graph, logits: Var, q: &Mat) -> Result<Var> {
    if g.shape(logits) != q.dim() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", g.shape(logits), q.dim())));
    }
    check_distribution_rows(q)?;
    let rows = q.nrows() as f64;
    let entropy_term = neg_entropy(q) / rows;
    let log_p = g.log_softmax(logits);
    let q = g.constant(q.clone());
    let cross = g.mul(log_p, q);
    let cross = g.sum(cross);
    let cross = g.scale(cross, -1.0 / rows);
    Ok(g.add_scalar(cross, entropy_term))
}

fn check_variance(alpha: f64, beta: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Invalid(format!("alpha must be nonnegative, got {alpha}")));
    }
    Ok(())
}

/// Mean over genes of `½[ln(2πσ²) + (y − μ̂)²/σ²]` with `σ² = α μ̂ + β`.
pub fn gaussian_nll(mu_hat: &[f64], y: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    check_variance(alpha, beta)?;
    if mu_hat.len() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", mu_hat.len(), y.len())));
    }
    let total: f64 = mu_hat
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            let var = alpha * m + beta;
            0.5 * ((2.0 * PI * var).ln() + (t - m) * (t - m) / var)
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Differentiable [`gaussian_nll`]; `mu_hat` is an `n × 1` node. The variance
/// is computed from the prediction, so gradients flow through it too.
pub fn gaussian_nll_on(g: &mut Graph, mu_hat: Var, y: &[f64], alpha: f64, beta: f64) -> Result<Var> {
    check_variance(alpha, beta)?;
    if g.shape(mu_hat) != (y.len(), 1) {
        return Err(Error::Shape(format!("mu_hat {:?} vs {} targets", g.shape(mu_hat), y.len())));
    }
    let target = g.constant(Mat::from_shape_vec((y.len(), 1), y.to_vec()).expect("n x 1"));
    let var = g.scale(mu_hat, alpha);
    let var = g.add_scalar(var, beta);
    let log_var = g.ln(var);
    let resid = g.sub(target, mu_hat);
    let resid = g.square(resid);
    let inv = g.recip(var);
    let scaled = g.mul(resid, inv);
    let terms = g.add(log_var, scaled);
    let mean = g.mean(terms);
    let half = g.scale(mean, 0.5);
    Ok(g.add_scalar(half, 0.5 * (2.0 * PI).ln()))
}

/// Mean token cross-entropy against integer targets.
pub fn cross_entropy(logits: &Mat, tokens: &[usize]) -> Result<f64> {
    let one_hot = one_hot(tokens, logits.ncols())?;
    soft_kl(logits, &one_hot)
}

/// Differentiable [`cross_entropy`].
pub fn cross_entropy_on(g: &mut Graph, logits: Var, tokens: &[usize]) -> Result<Var> {
    let one_hot = one_hot(tokens, g.shape(logits).1)?;
    soft_kl_on(g, logits, &one_hot)
}

fn one_hot(tokens: &[usize], vocab: usize) -> Result<Mat> {
    let mut m = Mat::zeros((tokens.len(), vocab));
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        m[[i, t]] = 1.0;
    }
    Ok(m)
}
