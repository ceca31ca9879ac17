//! Spot records, the on-disk dataset layout, and a synthetic generator with
//! planted co-expression modules.
//!
//! A dataset directory holds four files:
//!
//! - `genes.txt`: one gene name per line; line order is the gene index.
//! - `spots.tsv`: header `spot_id slide_id x y <gene_0> ... <gene_{n-1}>`,
//!   tab separated, counts as decimal integers.
//! - `features.f32`: row-major little-endian f32 matrix, one row per spot in
//!   `spots.tsv` order.
//! - `features.json`: `{"rows": R, "cols": C, "dtype": "f32le"}`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 1024;

/// One spatial location.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub slide_id: String,
    pub coords: [f64; 2],
    /// Precomputed patch features.
    pub features: Vec<f32>,
    /// Raw counts, one per gene.
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gene_names: Vec<String>,
    pub spots: Vec<SpotRecord>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(gene_names: Vec<String>, spots: Vec<SpotRecord>, feature_dim: usize) -> Result<Self> {
        let ds = Dataset {
            gene_names,
            spots,
            feature_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        let mut seen = HashSet::new();
        for g in &self.gene_names {
            if !seen.insert(g.as_str()) {
                return Err(Error::Format(format!("duplicate gene name {g:?}")));
            }
        }
        let n = self.n_genes();
        for s in &self.spots {
            if s.counts.len() != n {
                return Err(Error::Shape(format!(
                    "spot {} has {} counts, expected {n}",
                    s.spot_id,
                    s.counts.len()
                )));
            }
            if s.features.len() != self.feature_dim {
                return Err(Error::Shape(format!(
                    "spot {} has {} features, expected {}",
                    s.spot_id,
                    s.features.len(),
                    self.feature_dim
                )));
            }
            if s.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::Format(format!("spot {} has non-finite features", s.spot_id)));
            }
            if s.coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::Format(format!("spot {} has non-finite coords", s.spot_id)));
            }
        }
        Ok(())
    }

    /// Distinct slide ids in sorted order.
    pub fn slide_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.spots.iter().map(|s| s.slide_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Gene-by-spot count matrix as f64 rows, one row per gene.
    pub fn gene_profiles(&self) -> Vec<Vec<f64>> {
        (0..self.n_genes())
            .map(|g| self.spots.iter().map(|s| s.counts[g] as f64).collect())
            .collect()
    }

    /// A dataset with the same genes holding only `spots`.
    pub fn with_spots(&self, spots: Vec<SpotRecord>) -> Dataset {
        Dataset {
            gene_names: self.gene_names.clone(),
            spots,
            feature_dim: self.feature_dim,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSidecar {
    rows: usize,
    cols: usize,
    dtype: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load and validate a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let gene_names: Vec<String> = read_text(&root.join("genes.txt"))?
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let n = gene_names.len();

    let tsv = read_text(&root.join("spots.tsv"))?;
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("spots.tsv is empty".into()))?
        .split('\t')
        .collect();
    if header.len() < 4 || header[..4] != ["spot_id", "slide_id", "x", "y"] {
        return Err(Error::Format(
            "spots.tsv header must start with spot_id, slide_id, x, y".into(),
        ));
    }
    if header.len() - 4 != n {
        return Err(Error::Format(format!(
            "spots.tsv has {} count columns but genes.txt lists {n} genes",
            header.len() - 4
        )));
    }
    for (g, (col, name)) in header[4..].iter().zip(&gene_names).enumerate() {
        if col != name {
            return Err(Error::Format(format!(
                "spots.tsv column for gene {g} is {col:?}, genes.txt says {name:?}"
            )));
        }
    }

    let mut rows = Vec::new();
    for (r, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n + 4 {
            return Err(Error::Format(format!(
                "row {r} has {} fields, expected {}",
                fields.len(),
                n + 4
            )));
        }
        let coord = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad coordinate {:?} at row {r}", fields[i])))
        };
        let coords = [coord(2)?, coord(3)?];
        let mut counts = Vec::with_capacity(n);
        for (g, raw) in fields[4..].iter().enumerate() {
            let value: i64 = raw.parse().map_err(|_| {
                Error::Format(format!(
                    "non-integer count {raw:?} at row {r}, gene {}",
                    gene_names[g]
                ))
            })?;
            if value < 0 {
                return Err(Error::Format(format!(
                    "negative count at row {r}, gene {}",
                    gene_names[g]
                )));
            }
            let value = u32::try_from(value).map_err(|_| {
                Error::Format(format!("count {value} at row {r}, gene {} overflows u32", gene_names[g]))
            })?;
            counts.push(value);
        }
        rows.push((fields[0].to_string(), fields[1].to_string(), coords, counts));
    }

    let sidecar: FeatureSidecar = serde_json::from_str(&read_text(&root.join("features.json"))?)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported feature dtype {:?}", sidecar.dtype)));
    }
    if sidecar.rows != rows.len() {
        return Err(Error::Shape(format!(
            "features.json declares {} rows but spots.tsv has {}",
            sidecar.rows,
            rows.len()
        )));
    }
    let path = root.join("features.f32");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = sidecar.rows * sidecar.cols * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "features.f32 holds {} bytes, expected {expected} ({} x {} f32)",
            bytes.len(),
            sidecar.rows,
            sidecar.cols
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let spots = rows
        .into_iter()
        .enumerate()
        .map(|(i, (spot_id, slide_id, coords, counts))| SpotRecord {
            spot_id,
            slide_id,
            coords,
            features: values[i * sidecar.cols..(i + 1) * sidecar.cols].to_vec(),
            counts,
        })
        .collect();
    Dataset::new(gene_names, spots, sidecar.cols)
}

/// Write `ds` in the directory layout read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };

    let mut genes = String::new();
    for g in &ds.gene_names {
        genes.push_str(g);
        genes.push('\n');
    }
    write("genes.txt", genes.as_bytes())?;

    let mut tsv = String::from("spot_id\tslide_id\tx\ty");
    for g in &ds.gene_names {
        tsv.push('\t');
        tsv.push_str(g);
    }
    tsv.push('\n');
    let mut features = Vec::with_capacity(ds.len() * ds.feature_dim * 4);
    for s in &ds.spots {
        // `{}` on f64 prints the shortest string that parses back exactly
        tsv.push_str(&format!("{}\t{}\t{}\t{}", s.spot_id, s.slide_id, s.coords[0], s.coords[1]));
        for c in &s.counts {
            tsv.push('\t');
            tsv.push_str(&c.to_string());
        }
        tsv.push('\n');
        for f in &s.features {
            features.extend_from_slice(&f.to_le_bytes());
        }
    }
    write("spots.tsv", tsv.as_bytes())?;
    write("features.f32", &features)?;
    let sidecar = FeatureSidecar {
        rows: ds.len(),
        cols: ds.feature_dim,
        dtype: "f32le".into(),
    };
    write("features.json", serde_json::to_string(&sidecar)?.as_bytes())
}

/// Leave-one-slide-out split: `test` holds exactly the spots of `test_slide`.
pub fn split_by_slide(ds: &Dataset, test_slide: &str) -> Result<(Dataset, Dataset)> {
    if !ds.spots.iter().any(|s| s.slide_id == test_slide) {
        return Err(Error::Invalid(format!("unknown slide id {test_slide:?}")));
    }
    let (test, train): (Vec<_>, Vec<_>) = ds
        .spots
        .iter()
        .cloned()
        .partition(|s| s.slide_id == test_slide);
    Ok((ds.with_spots(train), ds.with_spots(test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_genes: usize,
    pub n_spots: usize,
    pub n_slides: usize,
    /// Number of planted co-expression groups; must divide `n_genes`.
    pub n_modules: usize,
    pub base_rate: f64,
    pub module_amplitude: f64,
    pub seed: u64,
    pub feature_dim: usize,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_genes: 16,
            n_spots: 256,
            n_slides: 4,
            n_modules: 4,
            base_rate: 1.0,
            module_amplitude: 20.0,
            seed: 2021,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_genes", self.n_genes),
            ("n_spots", self.n_spots),
            ("n_slides", self.n_slides),
            ("n_modules", self.n_modules),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !self.n_genes.is_multiple_of(self.n_modules) {
            return Err(Error::Invalid(format!(
                "n_modules ({}) must divide n_genes ({})",
                self.n_modules, self.n_genes
            )));
        }
        if self.n_spots < self.n_slides {
            return Err(Error::Invalid("n_spots must be at least n_slides".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Invalid("base_rate must be positive".into()));
        }
        if !(self.module_amplitude >= 0.0 && self.module_amplitude.is_finite()) {
            return Err(Error::Invalid("module_amplitude must be nonnegative".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Invalid("feature_noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Planted module of each gene: modules are contiguous gene blocks.
    pub fn planted_modules(&self) -> Vec<usize> {
        let per = self.n_genes / self.n_modules;
        (0..self.n_genes).map(|g| g / per).collect()
    }
}

/// Plane waves summed into one smooth scalar field per module.
struct SpatialField {
    waves: Vec<Vec<[f64; 4]>>, // per module: (frequency, cos angle, sin angle, phase)
}

impl SpatialField {
    fn new(n_modules: usize, rng: &mut rng::Rng) -> Self {
        let waves = (0..n_modules)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let freq = rng.random_range(0.6..1.2);
                        let angle = rng.random_range(0.0..std::f64::consts::TAU);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        [freq, angle.cos(), angle.sin(), phase]
                    })
                    .collect()
            })
            .collect();
        SpatialField { waves }
    }

    fn eval(&self, m: usize, x: f64, y: f64) -> f64 {
        self.waves[m]
            .iter()
            .map(|[f, c, s, p]| (f * (x * c + y * s) + p).sin())
            .sum::<f64>()
            / 3f64.sqrt()
    }
}

/// Deterministic synthetic dataset with planted modules.
///
/// Slides are square grids, each in its own local frame, and all slides
/// share the same spatial fields (serial sections of one tissue). At each
/// spot one module is drawn from a softmax over smooth per-module fields and
/// its activation is set to 1. Counts are Poisson with rate
/// `base_rate + module_amplitude` for genes of the active module and
/// `base_rate` elsewhere. Features are a fixed random
/// linear map of (activation vector, scaled coords) plus Gaussian noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut field_rng = rng::stream(cfg.seed, "synth/field");
    let mut draw_rng = rng::stream(cfg.seed, "synth/draw");
    let mut feature_rng = rng::stream(cfg.seed, "synth/features");

    let field = SpatialField::new(cfg.n_modules, &mut field_rng);
    let latent_dim = cfg.n_modules + 2;
    let mixing: Vec<f64> = (0..cfg.feature_dim * latent_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut field_rng);
            z / (latent_dim as f64).sqrt()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let planted = cfg.planted_modules();

    let gene_names = (0..cfg.n_genes).map(|g| format!("G{g:03}")).collect();
    let per_slide = cfg.n_spots / cfg.n_slides;
    let extra = cfg.n_spots % cfg.n_slides;
    let mut spots = Vec::with_capacity(cfg.n_spots);
    for slide in 0..cfg.n_slides {
        let count = per_slide + usize::from(slide < extra);
        let side = (count as f64).sqrt().ceil() as usize;
        let extent = side.max(1) as f64;
        for j in 0..count {
            let (row, col) = (j / side, j % side);
            let coords = [col as f64, row as f64];

            let scores: Vec<f64> = (0..cfg.n_modules)
                .map(|m| field.eval(m, coords[0], coords[1]))
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (4.0 * (s - max)).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = draw_rng.random::<f64>() * total;
            let mut active = cfg.n_modules - 1;
            for (m, w) in weights.iter().enumerate() {
                if u < *w {
                    active = m;
                    break;
                }
                u -= w;
            }
            let mut activation = vec![0.0; cfg.n_modules];
            activation[active] = 1.0;

            let counts = planted
                .iter()
                .map(|&m| {
                    let rate = cfg.base_rate + cfg.module_amplitude * activation[m];
                    let dist = Poisson::new(rate).map_err(|e| Error::Invalid(e.to_string()))?;
                    Ok(dist.sample(&mut draw_rng) as u32)
                })
                .collect::<Result<Vec<u32>>>()?;

            let mut latent = activation.clone();
            latent.push((col as f64 + 0.5) / extent - 0.5);
            latent.push((row as f64 + 0.5) / extent - 0.5);
            let features = (0..cfg.feature_dim)
                .map(|f| {
                    let row = &mixing[f * latent_dim..(f + 1) * latent_dim];
                    let clean: f64 = row.iter().zip(&latent).map(|(a, b)| a * b).sum();
                    (clean + noise.sample(&mut feature_rng)) as f32
                })
                .collect();

            spots.push(SpotRecord {
                spot_id: format!("slide{slide}_spot{j:04}"),
                slide_id: format!("slide{slide}"),
                coords,
                features,
                counts,
            });
        }
    }
    Dataset::new(gene_names, spots, cfg.feature_dim)
}
