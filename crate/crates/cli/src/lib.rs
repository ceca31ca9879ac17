//! Run configuration and the six `genar` commands.
//!
//! Every command resolves its configuration (file, then flags), validates it,
//! writes it to `<out>/config.json`, and only then does any work.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use genar_core::dataset::{self, Dataset, SyntheticConfig};
use genar_core::engine::{self, Decoding, EpochRecord, TrainConfig, TrainState, Variant};
use genar_core::eval::EvalReport;
use genar_core::hierarchy::{build_hierarchy, GeneHierarchy, ScaleSchedule};
use genar_core::model::ModelConfig;
use genar_core::multiscale::Vocab;

pub const DEFAULT_SCHEDULE_200: [usize; 6] = [1, 4, 8, 40, 100, 200];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_major: usize,
    pub target_subgroup_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_major: 4,
            target_subgroup_size: 12,
        }
    }
}

/// Architecture settings; data-dependent sizes come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub vocab_size: usize,
    pub pe_dim: usize,
    pub dropout: f64,
    pub init_std: f64,
    /// Scale dims ending at the gene count. When absent, the six-scale
    /// default is used for 200 genes and a proportionally shrunk copy otherwise.
    pub schedule: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            vocab_size: m.vocab.size(),
            pe_dim: m.pe_dim,
            dropout: m.dropout,
            init_std: m.init_std,
            schedule: None,
        }
    }
}

/// Built-in ablation variant lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The three component switches.
    Flags,
    /// Four scale schedules from single-scale to the deepest.
    Scales,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the synthetic and training seeds.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Slide held out for validation; defaults to the last slide id.
    pub val_slide: Option<String>,
    pub with_mu: bool,
    pub temperature: Option<f64>,
    pub synthetic: SyntheticConfig,
    pub clustering: ClusterConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub preset: Option<Preset>,
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub val_slide: Option<String>,
    pub with_mu: bool,
    pub temperature: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub preset: Option<Preset>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Apply flag overrides and expand the seed.
    pub fn resolve(mut self, o: &Overrides) -> Self {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if o.$field.is_some() {
                    self.$field = o.$field.clone();
                }
            )*};
        }
        take!(seed, data, hierarchy, checkpoint, predictions, resume, val_slide, temperature, preset);
        self.with_mu |= o.with_mu;
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(t) = self.temperature {
            ensure!(t > 0.0, "temperature must be positive");
        }
        ensure!(self.clustering.n_major >= 1 && self.clustering.target_subgroup_size >= 1, "clustering sizes must be positive");
        Vocab::new(self.model.vocab_size)?;
        Ok(())
    }

    /// Schedule for `n` genes.
    pub fn schedule(&self, n: usize) -> Result<ScaleSchedule> {
        let dims = match &self.model.schedule {
            Some(d) => d.clone(),
            None => default_schedule(n),
        };
        Ok(ScaleSchedule::new(n, &dims)?)
    }

    pub fn model_config(&self, n_genes: usize, feature_dim: usize, gene_order: Vec<usize>) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            d_model: m.d_model,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            vocab: Vocab::new(m.vocab_size)?,
            schedule: self.schedule(n_genes)?,
            n_genes,
            feature_dim,
            pe_dim: m.pe_dim,
            dropout: m.dropout,
            gene_order,
            use_gene_identity: true,
            init_std: m.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variants(&self, n: usize) -> Result<Vec<Variant>> {
        let mut v = self.variants.clone();
        if let Some(p) = self.preset {
            v.extend(preset_variants(p, n));
        }
        ensure!(!v.is_empty(), "ablation needs at least one variant (set `variants` or `--preset`)");
        Ok(v)
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| anyhow!("no data directory given (--data)"))
    }
}

/// The six-scale default for 200 genes, shrunk proportionally for other gene counts.
pub fn default_schedule(n: usize) -> Vec<usize> {
    if n == 200 {
        return DEFAULT_SCHEDULE_200.to_vec();
    }
    let mut dims: Vec<usize> = Vec::new();
    for d in DEFAULT_SCHEDULE_200 {
        let s = ((d * n) as f64 / 200.0).round().max(1.0) as usize;
        let s = if d == 200 { n } else { s.min(n) };
        if dims.last().is_none_or(|&l| s > l) {
            dims.push(s);
        }
    }
    dims
}

pub fn preset_variants(preset: Preset, n: usize) -> Vec<Variant> {
    match preset {
        Preset::Flags => vec![
            Variant {
                no_multiscale: true,
                ..Variant::named("no_multiscale")
            },
            Variant {
                no_gene_identity: true,
                ..Variant::named("no_gene_identity")
            },
            Variant {
                cross_entropy_final: true,
                ..Variant::named("cross_entropy_final")
            },
        ],
        Preset::Scales => {
            let schedules: Vec<Vec<usize>> = if n == 200 {
                vec![vec![200], vec![1, 20, 200], vec![1, 40, 100, 200], DEFAULT_SCHEDULE_200.to_vec()]
            } else {
                [vec![], vec![1, 4], vec![1, 2, 4], vec![1, 2, 4, 8]]
                    .into_iter()
                    .map(|head| head.into_iter().filter(|&d| d < n).chain([n]).collect())
                    .collect()
            };
            schedules
                .into_iter()
                .map(|s| Variant {
                    name: format!("schedule_{}", s.iter().map(usize::to_string).collect::<Vec<_>>().join("_")),
                    schedule: Some(s),
                    ..Variant::named("")
                })
                .collect()
        }
    }
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(out.join("config.json"), text + "\n").context("writing resolved config")
}

/// Split off the validation slide. A single-slide dataset trains on
/// everything with no validation set.
pub fn train_val_split(ds: &Dataset, val_slide: Option<&str>) -> Result<(Dataset, Dataset)> {
    let slides = ds.slide_ids();
    let chosen = match val_slide {
        Some(s) => {
            ensure!(slides.iter().any(|x| x == s), "validation slide {s} not found in {slides:?}");
            s.to_string()
        }
        None if slides.len() < 2 => return Ok((ds.clone(), ds.with_spots(Vec::new()))),
        None => slides.last().cloned().expect("non-empty"),
    };
    let (rest, held) = dataset::split_by_slide(ds, &chosen)?;
    Ok((rest, held))
}

fn hierarchy_for(cfg: &RunConfig, train: &Dataset) -> Result<GeneHierarchy> {
    match &cfg.hierarchy {
        Some(p) => {
            let h = GeneHierarchy::load(p)?;
            ensure!(
                h.n_genes() == train.n_genes(),
                "hierarchy covers {} genes, dataset has {}",
                h.n_genes(),
                train.n_genes()
            );
            Ok(h)
        }
        None => Ok(build_hierarchy(
            &train.gene_profiles(),
            cfg.clustering.n_major.min(train.n_genes()),
            cfg.clustering.target_subgroup_size,
            cfg.train.seed,
        )?),
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.synthetic.validate()?;
    prepare_out(cfg, out)?;
    let ds = dataset::generate_synthetic(&cfg.synthetic)?;
    dataset::save_dataset(&ds, out)?;
    let back = dataset::load_dataset(out)?;
    ensure!(back.len() == ds.len(), "written dataset does not reload");
    println!("wrote {} spots x {} genes to {}", ds.len(), ds.n_genes(), out.display());
    Ok(())
}

pub fn cmd_cluster(cfg: &RunConfig, out: &Path) -> Result<GeneHierarchy> {
    cfg.validate()?;
    let data = cfg.data_dir()?;
    let ds = dataset::load_dataset(data)?;
    let (train, _) = train_val_split(&ds, cfg.val_slide.as_deref())?;
    prepare_out(cfg, out)?;
    let h = build_hierarchy(
        &train.gene_profiles(),
        cfg.clustering.n_major,
        cfg.clustering.target_subgroup_size,
        cfg.train.seed,
    )?;
    let path = out.join("hierarchy.json");
    h.save(&path)?;
    GeneHierarchy::load(&path)?.validate()?;
    println!("clustered {} genes into {} major clusters -> {}", h.n_genes(), h.n_major, path.display());
    Ok(h)
}

fn format_epoch(r: &EpochRecord) -> String {
    let scales: Vec<String> = r.per_scale_losses.iter().map(|l| format!("{l:.4}")).collect();
    let val = r.val_pcc_all.map_or("-".to_string(), |p| format!("{p:.4}"));
    format!(
        "epoch {:>3}  step {:>6}  loss {:.4}  [{}]  val_pcc_all {}",
        r.epoch,
        r.step,
        r.train_loss,
        scales.join(" "),
        val
    )
}

/// Outcome of `cmd_train`.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_val_pcc_all: Option<f64>,
    pub best_val_mse: Option<f64>,
    pub step: u64,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = dataset::load_dataset(cfg.data_dir()?)?;
    cfg.schedule(ds.n_genes())?;
    let (train, val) = train_val_split(&ds, cfg.val_slide.as_deref())?;
    ensure!(!train.is_empty(), "training split is empty");
    prepare_out(cfg, out)?;

    let h = hierarchy_for(cfg, &train)?;
    h.save(out.join("hierarchy.json"))?;
    let base = cfg.model_config(ds.n_genes(), ds.feature_dim, h.permutation.clone())?;
    let model_cfg = cfg.train.resolve_model(&base)?;
    let mut state = match &cfg.resume {
        Some(p) => {
            let ck = engine::load_checkpoint(p)?;
            ck.check_config(&model_cfg)?;
            log::info!("resuming from {} at step {}", p.display(), ck.state.step);
            ck.state
        }
        None => TrainState::new(model_cfg.clone(), &cfg.train)?,
    };
    let train_spots = engine::prepare_spots(&train, &model_cfg, cfg.train.tau)?;
    let val_spots = engine::prepare_spots(&val, &model_cfg, cfg.train.tau)?;

    let history_path = out.join("history.jsonl");
    let mut history_file = BufWriter::new(fs::File::create(&history_path).context("creating history.jsonl")?);
    let mut write_err = None;
    let outcome = engine::fit(&mut state, &train_spots, &val_spots, &cfg.train, &mut |r| {
        println!("{}", format_epoch(r));
        let line = serde_json::to_string(r).expect("record serialises");
        if let Err(e) = writeln!(history_file, "{line}").and_then(|_| history_file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing history.jsonl");
    }

    let ckpt = out.join("checkpoint.bin");
    engine::save_checkpoint(&ckpt, &state, Some(&cfg.train))?;
    let back = engine::load_checkpoint(&ckpt)?;
    ensure!(back.state.step == state.step, "checkpoint did not reload");
    let best_val_mse = outcome
        .best_epoch
        .and_then(|e| outcome.history.iter().find(|r| r.epoch == e))
        .and_then(|r| r.val_mse);
    if let Some(p) = outcome.best_val_pcc_all {
        println!("best epoch {:?}: val_pcc_all {p:.4}", outcome.best_epoch);
    }
    Ok(TrainSummary {
        checkpoint: ckpt,
        history: outcome.history,
        best_val_pcc_all: outcome.best_val_pcc_all,
        best_val_mse,
        step: state.step,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionMeta {
    config_hash: String,
    seed: Option<u64>,
    schedule: Vec<usize>,
    checkpoint: PathBuf,
    decoding: String,
}

pub fn cmd_predict(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ckpt_path = cfg.checkpoint.as_deref().ok_or_else(|| anyhow!("no checkpoint given (--checkpoint)"))?;
    let ds = dataset::load_dataset(cfg.data_dir()?)?;
    let ck = engine::load_checkpoint(ckpt_path)?;
    let mc = ck.state.model.config();
    ensure!(
        mc.n_genes == ds.n_genes(),
        "checkpoint predicts {} genes but the dataset has {}",
        mc.n_genes,
        ds.n_genes()
    );
    prepare_out(cfg, out)?;
    let decoding = match cfg.temperature {
        None => Decoding::Greedy,
        Some(temperature) => Decoding::Sample {
            temperature,
            seed: cfg.train.seed,
        },
    };
    let decoded = engine::generate(&ck.state.model, &ds, decoding)?;
    let path = out.join("predictions.tsv");
    let mut w = BufWriter::new(fs::File::create(&path).context("creating predictions.tsv")?);
    let mut header = vec!["spot_id".to_string()];
    header.extend(ds.gene_names.iter().cloned());
    if cfg.with_mu {
        header.extend(ds.gene_names.iter().map(|g| format!("mu:{g}")));
    }
    writeln!(w, "{}", header.join("\t"))?;
    for (spot, d) in ds.spots.iter().zip(&decoded) {
        let mut row = vec![spot.spot_id.clone()];
        row.extend(d.counts.iter().map(u32::to_string));
        if cfg.with_mu {
            row.extend(d.expected.iter().map(|m| m.to_string()));
        }
        writeln!(w, "{}", row.join("\t"))?;
    }
    w.flush()?;
    drop(w);
    let meta = PredictionMeta {
        config_hash: ck.config_hash.clone(),
        seed: ck.train_config.as_ref().map(|t| t.seed),
        schedule: mc.schedule.dims().to_vec(),
        checkpoint: ckpt_path.to_path_buf(),
        decoding: match decoding {
            Decoding::Greedy => "greedy".into(),
            Decoding::Sample { temperature, .. } => format!("sample(temperature={temperature})"),
        },
    };
    fs::write(out.join("predictions.meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let check = read_predictions(&path)?;
    ensure!(check.rows.len() == ds.len(), "predictions.tsv did not reload");
    println!("wrote {} predictions to {}", ds.len(), path.display());
    Ok(path)
}

/// Parsed `predictions.tsv`; `μ̂` columns are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub genes: Vec<String>,
    pub rows: Vec<(String, Vec<u32>)>,
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("{} is empty", path.display()))?.split('\t').collect();
    ensure!(header.first() == Some(&"spot_id"), "first column of {} must be spot_id", path.display());
    let genes: Vec<String> = header[1..].iter().take_while(|h| !h.starts_with("mu:")).map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        ensure!(fields.len() == header.len(), "row {} has {} fields, header has {}", i + 1, fields.len(), header.len());
        let counts = fields[1..=genes.len()]
            .iter()
            .map(|f| f.parse::<u32>().map_err(|_| anyhow!("row {}: prediction {f:?} is not a non-negative integer", i + 1)))
            .collect::<Result<Vec<u32>>>()?;
        rows.push((fields[0].to_string(), counts));
    }
    Ok(Predictions { genes, rows })
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let pred_path = cfg.predictions.as_deref().ok_or_else(|| anyhow!("no predictions given (--predictions)"))?;
    let ds = dataset::load_dataset(cfg.data_dir()?)?;
    let preds = read_predictions(pred_path)?;
    ensure!(
        preds.genes == ds.gene_names,
        "prediction genes do not match the dataset's {} genes",
        ds.n_genes()
    );
    let mut by_id: HashMap<&str, &Vec<u32>> = HashMap::new();
    for (id, counts) in &preds.rows {
        ensure!(by_id.insert(id.as_str(), counts).is_none(), "spot {id} appears twice in predictions");
    }
    let known: HashSet<&str> = ds.spots.iter().map(|s| s.spot_id.as_str()).collect();
    let missing: Vec<&str> = ds.spots.iter().map(|s| s.spot_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    let mut unknown: Vec<&str> = by_id.keys().copied().filter(|id| !known.contains(id)).collect();
    unknown.sort_unstable();
    if !missing.is_empty() || !unknown.is_empty() {
        bail!("spot ids do not align: missing predictions for {missing:?}; unknown predicted spots {unknown:?}");
    }
    prepare_out(cfg, out)?;
    let y: Vec<Vec<f64>> = ds.spots.iter().map(|s| s.counts.iter().map(|&c| c as f64).collect()).collect();
    let yhat: Vec<Vec<f64>> = ds
        .spots
        .iter()
        .map(|s| by_id[s.spot_id.as_str()].iter().map(|&c| c as f64).collect())
        .collect();
    let mut report = EvalReport::compute(&y, &yhat)?;
    report.metadata.insert("pseudocount".into(), 1.into());
    report.metadata.insert("predictions".into(), pred_path.display().to_string().into());
    let meta_path = pred_path.with_file_name("predictions.meta.json");
    if let Ok(text) = fs::read_to_string(&meta_path) {
        if let Ok(serde_json::Value::Object(m)) = serde_json::from_str(&text) {
            report.metadata.extend(m);
        }
    }
    let path = out.join("report.json");
    report.save(&path)?;
    EvalReport::load(&path)?;
    println!(
        "pcc_10 {:.4}  pcc_50 {:.4}  pcc_all {:.4}  mse {:.4}  mae {:.4}",
        report.pcc_10, report.pcc_50, report.pcc_all, report.mse, report.mae
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub val_slide: Option<String>,
    pub rows: Vec<engine::AblationRow>,
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let ds = dataset::load_dataset(cfg.data_dir()?)?;
    let variants = cfg.variants(ds.n_genes())?;
    for v in &variants {
        if let Some(s) = &v.schedule {
            ScaleSchedule::new(ds.n_genes(), s).with_context(|| format!("variant {}", v.name))?;
        }
    }
    let (train, val) = train_val_split(&ds, cfg.val_slide.as_deref())?;
    ensure!(val.len() >= 2, "ablation needs a validation slide with at least two spots");
    prepare_out(cfg, out)?;
    let h = hierarchy_for(cfg, &train)?;
    let base = cfg.model_config(ds.n_genes(), ds.feature_dim, h.permutation.clone())?;
    let rows = engine::run_ablation(&train, &val, &base, &cfg.train, &variants)?;
    println!("{:<28} {:<22} {:>8} {:>8} {:>8} {:>8}", "variant", "schedule", "pcc_10", "pcc_all", "mse", "mae");
    for r in &rows {
        println!(
            "{:<28} {:<22} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.variant.name,
            format!("{:?}", r.schedule),
            r.report.pcc_10,
            r.report.pcc_all,
            r.report.mse,
            r.report.mae
        );
    }
    let report = AblationReport {
        seed: cfg.train.seed,
        val_slide: val.spots.first().map(|s| s.slide_id.clone()),
        rows,
    };
    let path = out.join("ablation_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let back: AblationReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
    ensure!(back.rows.len() == variants.len(), "ablation report did not reload");
    Ok(report)
}
