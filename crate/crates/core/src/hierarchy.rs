//! Two-level gene clustering, the resulting gene order, and scale schedules.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const KMEANS_RESTARTS: u64 = 10;
pub const KMEANS_MAX_ITERS: usize = 300;

/// Gene reordering plus the two-level cluster labels it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneHierarchy {
    /// `permutation[new_position] = original gene index`.
    pub permutation: Vec<usize>,
    /// Major cluster of each original gene.
    pub major_cluster: Vec<usize>,
    /// Subgroup of each original gene; ids are global across major clusters.
    pub subgroup: Vec<usize>,
    pub n_major: usize,
    pub target_subgroup_size: usize,
    pub seed: u64,
}

impl GeneHierarchy {
    /// Identity ordering with every gene in one cluster.
    pub fn identity(n: usize) -> Self {
        GeneHierarchy {
            permutation: (0..n).collect(),
            major_cluster: vec![0; n],
            subgroup: vec![0; n],
            n_major: 1,
            target_subgroup_size: n.max(1),
            seed: 0,
        }
    }

    pub fn n_genes(&self) -> usize {
        self.permutation.len()
    }

    /// Reorder a per-gene vector into hierarchy order.
    pub fn apply<T: Clone>(&self, values: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&g| values[g].clone()).collect()
    }

    /// Undo [`GeneHierarchy::apply`].
    pub fn unapply<T: Clone + Default>(&self, values: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); values.len()];
        for (pos, &g) in self.permutation.iter().enumerate() {
            out[g] = values[pos].clone();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        let mut seen = vec![false; n];
        for &g in &self.permutation {
            if g >= n || std::mem::replace(&mut seen[g], true) {
                return Err(Error::Invalid("permutation is not a bijection".into()));
            }
        }
        if self.major_cluster.len() != n || self.subgroup.len() != n {
            return Err(Error::Shape("cluster label arrays must have one entry per gene".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: GeneHierarchy = serde_json::from_str(&text)?;
        h.validate()?;
        Ok(h)
    }
}

/// Group counts per scale, coarse to fine, ending at the gene count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule {
    dims: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(n: usize, dims: &[usize]) -> Result<Self> {
        let s = Self::try_from(dims.to_vec())?;
        if s.n() != n {
            return Err(Error::Invalid(format!(
                "last scale dimension {} must equal the gene count {n}",
                s.n()
            )));
        }
        Ok(s)
    }

    /// The one-scale schedule `(n)`.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(n, &[n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_scales(&self) -> usize {
        self.dims.len()
    }

    pub fn n(&self) -> usize {
        *self.dims.last().expect("schedule is non-empty")
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    /// Sum of the dims of all scales before `k`.
    pub fn offset(&self, k: usize) -> usize {
        self.dims[..k].iter().sum()
    }
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Invalid("scale schedule is empty".into()));
        }
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::Invalid("scale dimensions must be at least 1".into()));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("scale schedule {dims:?} is not strictly increasing")));
        }
        Ok(ScaleSchedule { dims })
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.dims
    }
}

pub fn make_schedule(n: usize, dims: &[usize]) -> Result<ScaleSchedule> {
    ScaleSchedule::new(n, dims)
}

/// Z-score each row with the population standard deviation. Zero-variance rows
/// become all zeros.
pub fn zscore_profiles(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var == 0.0 {
                vec![0.0; row.len()]
            } else {
                let sd = var.sqrt();
                row.iter().map(|v| (v - mean) / sd).collect()
            }
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(rows: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let m = rows.len();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if u < *w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // all remaining points coincide with a chosen centre
            let free: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &rows[next]));
        }
    }
    chosen.into_iter().map(|i| rows[i].clone()).collect()
}

fn centroids_of(rows: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &c) in rows.iter().zip(assign) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(r) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Move points into empty clusters, taking each time the point farthest from
/// its centroid among clusters that can spare one.
fn fill_empty(rows: &[Vec<f64>], assign: &mut [usize], centroids: &[Vec<f64>], k: usize) -> bool {
    let mut changed = false;
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return changed;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if counts[assign[i]] > 1 {
                let d = sq_dist(r, &centroids[assign[i]]);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
        }
        let (i, _) = best.expect("k <= m leaves a cluster with a spare point");
        assign[i] = empty;
        changed = true;
    }
}

/// Lloyd's k-means with k-means++ seeding, keeping the lowest-inertia run of
/// several seedings. Every returned cluster is non-empty; labels are in `0..k`.
pub fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let m = rows.len();
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("kmeans needs 1 <= k <= m, got k={k}, m={m}")));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Shape("kmeans rows differ in length".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng::indexed_stream(seed, "kmeans", restart);
        let assign = lloyd(rows, k, &mut rng);
        let centroids = centroids_of(rows, &assign, k);
        let inertia: f64 = rows.iter().zip(&assign).map(|(r, &c)| sq_dist(r, &centroids[c])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn lloyd(rows: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut centroids = kmeans_pp_init(rows, k, rng);
    let mut assign: Vec<usize> = rows.iter().map(|r| nearest(r, &centroids).0).collect();
    fill_empty(rows, &mut assign, &centroids, k);
    for _ in 0..KMEANS_MAX_ITERS {
        centroids = centroids_of(rows, &assign, k);
        let mut next: Vec<usize> = rows.iter().map(|r| nearest(r, &centroids).0).collect();
        fill_empty(rows, &mut next, &centroids, k);
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Cluster genes into `n_major` clusters on z-scored profiles, split each
/// cluster of size `m` into `max(1, round(m / target_subgroup_size))`
/// subgroups, and order genes by (major, subgroup, original index).
///
/// `train_counts` is gene-major: one row of spot counts per gene.
pub fn build_hierarchy(
    train_counts: &[Vec<f64>],
    n_major: usize,
    target_subgroup_size: usize,
    seed: u64,
) -> Result<GeneHierarchy> {
    let n = train_counts.len();
    if n_major == 0 || n < n_major {
        return Err(Error::Invalid(format!("cannot form {n_major} major clusters from {n} genes")));
    }
    if target_subgroup_size == 0 {
        return Err(Error::Invalid("target_subgroup_size must be positive".into()));
    }
    let z = zscore_profiles(train_counts);
    let major_cluster = kmeans(&z, n_major, seed)?;

    let mut subgroup = vec![0usize; n];
    let mut next_id = 0;
    for c in 0..n_major {
        let members: Vec<usize> = (0..n).filter(|&g| major_cluster[g] == c).collect();
        let m = members.len();
        let k = ((m as f64 / target_subgroup_size as f64).round() as usize).clamp(1, m);
        let rows: Vec<Vec<f64>> = members.iter().map(|&g| z[g].clone()).collect();
        let sub_seed = seed.wrapping_add(1 + c as u64);
        let labels = kmeans(&rows, k, sub_seed)?;
        for (&g, l) in members.iter().zip(labels) {
            subgroup[g] = next_id + l;
        }
        next_id += k;
    }

    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.sort_by_key(|&g| (major_cluster[g], subgroup[g], g));
    Ok(GeneHierarchy {
        permutation,
        major_cluster,
        subgroup,
        n_major,
        target_subgroup_size,
        seed,
    })
}

/// Adjusted Rand index between two labelings, from the contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let choose2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(a.len() as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
