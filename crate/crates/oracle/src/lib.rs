//! Brute-force reference computations for cross-checking `genar-core`.
//!
//! Everything here is written directly from the defining formulas, in f64,
//! with naive loops. The crate has no dependencies, so nothing in it can
//! share code with the implementation it checks.

/// Result of an oracle computation together with a short description of how
/// it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub values: Vec<f64>,
    pub method: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    OutOfRange(String),
    TooShort(usize),
    NotNormalized,
}

/// Average pooling by literal enumeration of the segments
/// `[floor(i*n/d), ceil((i+1)*n/d))`.
pub fn oracle_pool(y: &[f64], d: usize) -> Result<OracleResult, OracleError> {
    let n = y.len();
    if d == 0 || d > n {
        return Err(OracleError::OutOfRange(format!("d={d} for n={n}")));
    }
    let mut values = Vec::with_capacity(d);
    for i in 0..d {
        // integer floor / ceil, no float rounding involved
        let start = (i * n) / d;
        let end = ((i + 1) * n + d - 1) / d;
        let mut members = Vec::new();
        for (j, v) in y.iter().enumerate() {
            if j >= start && j < end {
                members.push(*v);
            }
        }
        let mut total = 0.0;
        for v in &members {
            total += *v;
        }
        values.push(total / members.len() as f64);
    }
    Ok(OracleResult {
        values,
        method: "segment enumeration, naive mean",
    })
}

/// Pearson correlation with the two-pass mean-then-moments formula.
/// Returns 0 when either input has zero variance.
pub fn oracle_pcc(a: &[f64], b: &[f64]) -> Result<f64, OracleError> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(OracleError::TooShort(a.len().min(b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Expected token value `sum_v p_v * v`.
pub fn oracle_expected_token(probs: &[f64]) -> Result<f64, OracleError> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
        return Err(OracleError::NotNormalized);
    }
    let mut acc = 0.0;
    for (v, p) in probs.iter().enumerate() {
        acc += p * v as f64;
    }
    Ok(acc)
}

/// Softmax by direct exponentiation after subtracting the maximum.
pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Loop-based total: add each per-scale loss into an accumulator, then divide
/// by the number of scales.
pub fn oracle_accumulate_total(per_scale: &[f64]) -> f64 {
    let mut total = 0.0;
    for l in per_scale {
        total += *l;
    }
    total / per_scale.len() as f64
}

/// Mean over all entries of squared and absolute differences after
/// `log2(1 + x)`, by direct summation over row-major data.
pub fn oracle_mse_mae(y: &[f64], yhat: &[f64]) -> (f64, f64) {
    let mut se = 0.0;
    let mut ae = 0.0;
    for i in 0..y.len() {
        let a = (1.0 + y[i]).log2();
        let b = (1.0 + yhat[i]).log2();
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    (se / y.len() as f64, ae / y.len() as f64)
}

/// Mean of the `k` largest values, found by a full sort.
pub fn oracle_topk_mean(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Adjusted Rand index from the full pair-counting contingency table.
pub fn oracle_adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut same_both = 0u64;
    let mut same_a = 0u64;
    let mut same_b = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            same_a += sa as u64;
            same_b += sb as u64;
            same_both += (sa && sb) as u64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = same_a as f64 * same_b as f64 / pairs;
    let max = 0.5 * (same_a + same_b) as f64;
    if max == expected {
        return 1.0;
    }
    (same_both as f64 - expected) / (max - expected)
}
