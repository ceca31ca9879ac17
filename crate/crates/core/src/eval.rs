//! Gene-wise accuracy metrics on `log2(1 + x)` transformed expression.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Value transform applied to both truth and prediction before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Log2p1,
    Identity,
}

impl Transform {
    fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Log2p1 => (1.0 + x).log2(),
            Transform::Identity => x,
        }
    }
}

/// `log2(1 + x)`.
pub fn log_transform(x: f64) -> Result<f64> {
    if x < 0.0 || !x.is_finite() {
        return Err(Error::Invalid(format!("cannot log-transform {x}")));
    }
    Ok(Transform::Log2p1.apply(x))
}

fn check_matrices(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<usize> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} truth rows vs {} predicted rows", y.len(), yhat.len())));
    }
    let n = y.first().map_or(0, Vec::len);
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        if a.len() != n || b.len() != n {
            return Err(Error::Shape(format!("row {i} has {} truth / {} predicted genes, expected {n}", a.len(), b.len())));
        }
        if a.iter().chain(b).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("row {i} holds a negative or non-finite value")));
        }
    }
    Ok(n)
}

/// Pearson correlation of two columns; 0 when either has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Per-gene PCC across spots of `y` (spots × genes, raw scale) and `yhat`.
pub fn pcc_per_gene(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<Vec<f64>> {
    pcc_per_gene_with(y, yhat, Transform::Log2p1)
}

pub fn pcc_per_gene_with(y: &[Vec<f64>], yhat: &[Vec<f64>], transform: Transform) -> Result<Vec<f64>> {
    let n = check_matrices(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::Invalid("PCC needs at least two spots".into()));
    }
    Ok((0..n)
        .map(|g| {
            let a: Vec<f64> = y.iter().map(|r| transform.apply(r[g])).collect();
            let b: Vec<f64> = yhat.iter().map(|r| transform.apply(r[g])).collect();
            pearson(&a, &b)
        })
        .collect())
}

/// Mean of the `k` largest values.
pub fn pcc_topk(per_gene: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > per_gene.len() {
        return Err(Error::Invalid(format!("top-k of {} genes with k = {k}", per_gene.len())));
    }
    let mut v = per_gene.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Mean squared and mean absolute error over all entries, after the log transform.
pub fn mse_mae(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<(f64, f64)> {
    mse_mae_with(y, yhat, Transform::Log2p1)
}

pub fn mse_mae_with(y: &[Vec<f64>], yhat: &[Vec<f64>], transform: Transform) -> Result<(f64, f64)> {
    let n = check_matrices(y, yhat)?;
    let total = (y.len() * n) as f64;
    if total == 0.0 {
        return Err(Error::Invalid("no entries to compare".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        for (x, z) in a.iter().zip(b) {
            let d = transform.apply(*x) - transform.apply(*z);
            se += d * d;
            ae += d.abs();
        }
    }
    Ok((se / total, ae / total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pcc_10: f64,
    pub pcc_50: f64,
    pub pcc_200: f64,
    pub pcc_all: f64,
    pub mse: f64,
    pub mae: f64,
    pub transform: Transform,
    pub n_spots: usize,
    pub n_genes: usize,
    pub per_gene_pcc: Vec<f64>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    /// Top-k entries with `k` larger than the gene count fall back to all genes.
    pub fn compute(y: &[Vec<f64>], yhat: &[Vec<f64>]) -> Result<Self> {
        Self::compute_with(y, yhat, Transform::Log2p1)
    }

    pub fn compute_with(y: &[Vec<f64>], yhat: &[Vec<f64>], transform: Transform) -> Result<Self> {
        let per_gene = pcc_per_gene_with(y, yhat, transform)?;
        let (mse, mae) = mse_mae_with(y, yhat, transform)?;
        let n = per_gene.len();
        let topk = |k: usize| pcc_topk(&per_gene, k.min(n));
        Ok(EvalReport {
            pcc_10: topk(10)?,
            pcc_50: topk(50)?,
            pcc_200: topk(200)?,
            pcc_all: topk(n)?,
            mse,
            mae,
            transform,
            n_spots: y.len(),
            n_genes: n,
            per_gene_pcc: per_gene,
            metadata: Default::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
