//! Per-scale targets built from a count vector, and the interpolation used to
//! seed each scale from the previous one.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::hierarchy::ScaleSchedule;
use crate::{Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 2001;
pub const DEFAULT_TAU: f64 = 1.0;

/// Token vocabulary `0..size`; counts above `size - 1` are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Invalid(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Vocab(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn max_token(self) -> usize {
        self.0 - 1
    }

    /// Round to the nearest integer and clamp into the vocabulary.
    pub fn tokenize(self, value: f64) -> usize {
        value.round().clamp(0.0, self.max_token() as f64) as usize
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab(DEFAULT_VOCAB_SIZE)
    }
}

impl TryFrom<usize> for Vocab {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        Vocab::new(v)
    }
}

impl From<Vocab> for usize {
    fn from(v: Vocab) -> usize {
        v.0
    }
}

/// Mean of `y` over `d` segments, segment `i` covering
/// `[floor(i*n/d), ceil((i+1)*n/d))`.
pub fn adaptive_pool(y: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = y.len();
    if d == 0 || d > n {
        return Err(Error::Invalid(format!("pool size {d} out of range for length {n}")));
    }
    Ok((0..d)
        .map(|i| {
            let start = i * n / d;
            let end = ((i + 1) * n).div_ceil(d);
            y[start..end].iter().sum::<f64>() / (end - start) as f64
        })
        .collect())
}

/// Gaussian-smoothed distribution over tokens centred at `target`:
/// `q(v) ∝ exp(-(v - target)² / (2 tau²))`.
pub fn soften(target: f64, vocab: Vocab, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let scale = 1.0 / (2.0 * tau * tau);
    let logits: Vec<f64> = (0..vocab.size())
        .map(|v| -(v as f64 - target).powi(2) * scale)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|p| *p /= total);
    Ok(q)
}

/// Ground truth for every scale of one spot, in hierarchy gene order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTargets {
    /// Pooled values, `d_k` per scale.
    pub pooled: Vec<Vec<f64>>,
    /// Soft targets `d_k × V` for every scale but the last.
    pub soft: Vec<Mat>,
    /// Teacher tokens, `d_k` per scale.
    pub tokens: Vec<Vec<usize>>,
    /// Exact counts at the final scale.
    pub counts: Vec<u32>,
}

impl MultiScaleTargets {
    pub fn n_scales(&self) -> usize {
        self.tokens.len()
    }
}

pub fn build_targets(
    counts: &[u32],
    schedule: &ScaleSchedule,
    vocab: Vocab,
    tau: f64,
) -> Result<MultiScaleTargets> {
    if counts.len() != schedule.n() {
        return Err(Error::Shape(format!(
            "count vector has {} genes, schedule ends at {}",
            counts.len(),
            schedule.n()
        )));
    }
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let k_last = schedule.n_scales() - 1;
    let mut pooled = Vec::with_capacity(schedule.n_scales());
    let mut soft = Vec::with_capacity(k_last);
    let mut tokens = Vec::with_capacity(schedule.n_scales());
    for (k, &d) in schedule.dims().iter().enumerate() {
        let p = adaptive_pool(&y, d)?;
        tokens.push(p.iter().map(|&v| vocab.tokenize(v)).collect());
        if k < k_last {
            let mut m = Mat::zeros((d, vocab.size()));
            for (i, &t) in p.iter().enumerate() {
                let q = soften(t, vocab, tau)?;
                m.row_mut(i).assign(&ndarray::ArrayView1::from(&q));
            }
            soft.push(m);
        }
        pooled.push(p);
    }
    Ok(MultiScaleTargets {
        pooled,
        soft,
        tokens,
        counts: counts.to_vec(),
    })
}

/// `d_next × d_prev` matrix of linear-interpolation weights along the group
/// axis. Output row `j` samples position `j (d_prev - 1) / (d_next - 1)`.
pub fn interpolation_matrix(d_prev: usize, d_next: usize) -> Result<Mat> {
    if d_prev == 0 || d_next < d_prev {
        return Err(Error::Invalid(format!(
            "cannot upsample {d_prev} groups to {d_next}"
        )));
    }
    let mut m = Mat::zeros((d_next, d_prev));
    for j in 0..d_next {
        let p = if d_next == 1 {
            0.0
        } else {
            (j * (d_prev - 1)) as f64 / (d_next - 1) as f64
        };
        let lo = (p.floor() as usize).min(d_prev - 1);
        let frac = p - lo as f64;
        if lo + 1 < d_prev && frac > 0.0 {
            m[[j, lo]] = 1.0 - frac;
            m[[j, lo + 1]] = frac;
        } else {
            m[[j, lo]] = 1.0;
        }
    }
    Ok(m)
}

/// Linearly interpolate `prev` (one row per group) up to `d_next` rows.
pub fn upsample_embeddings(prev: &Mat, d_next: usize) -> Result<Mat> {
    Ok(interpolation_matrix(prev.nrows(), d_next)?.dot(prev))
}
