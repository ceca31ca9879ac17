//! Training with teacher forcing, greedy coarse-to-fine decoding,
//! checkpointing and ablation sweeps.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat, Var};
use crate::dataset::Dataset;
use crate::eval::EvalReport;
use crate::hierarchy::ScaleSchedule;
use crate::model::{argmax_rows, count_head, count_head_on, Model, ModelConfig};
use crate::multiscale::{build_targets, MultiScaleTargets, DEFAULT_TAU};
use crate::objective::{self, LossBreakdown, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a new best validation PCC before stopping.
    pub patience: usize,
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Collapse the schedule to the single final scale.
    pub no_multiscale: bool,
    /// Skip gene-identity FiLM.
    pub no_gene_identity: bool,
    /// Cross-entropy against exact count tokens at the final scale.
    pub cross_entropy_final: bool,
    /// Upsample the interpolated slots from the model's own argmax at the
    /// previous scale rather than from teacher tokens.
    pub argmax_upsampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch_size: 64,
            epochs: 50,
            patience: 10,
            seed: 2021,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            no_multiscale: false,
            no_gene_identity: false,
            cross_entropy_final: false,
            argmax_upsampling: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return Err(Error::Invalid("weight_decay must be ≥ 0 and grad_clip > 0".into()));
        }
        if !(self.tau > 0.0) || self.alpha < 0.0 || self.beta <= 0.0 {
            return Err(Error::Invalid("tau and beta must be positive, alpha non-negative".into()));
        }
        Ok(())
    }

    /// The model config this run actually trains, after ablation switches.
    pub fn resolve_model(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if self.no_multiscale {
            cfg.schedule = ScaleSchedule::single(cfg.n_genes)?;
        }
        if self.no_gene_identity {
            cfg.use_gene_identity = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One spot with targets precomputed in hierarchy order.
#[derive(Debug, Clone)]
pub struct PreparedSpot {
    pub spot_id: String,
    pub features: Vec<f32>,
    pub coords: [f64; 2],
    /// Counts in the dataset's gene order.
    pub counts: Vec<u32>,
    pub targets: MultiScaleTargets,
}

pub fn prepare_spots(ds: &Dataset, cfg: &ModelConfig, tau: f64) -> Result<Vec<PreparedSpot>> {
    if ds.n_genes() != cfg.n_genes || ds.feature_dim != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "dataset has {} genes / {} features, model expects {} / {}",
            ds.n_genes(),
            ds.feature_dim,
            cfg.n_genes,
            cfg.feature_dim
        )));
    }
    ds.spots
        .iter()
        .map(|s| {
            let ordered: Vec<u32> = cfg.gene_order.iter().map(|&g| s.counts[g]).collect();
            Ok(PreparedSpot {
                spot_id: s.spot_id.clone(),
                features: s.features.clone(),
                coords: s.coords,
                counts: s.counts.clone(),
                targets: build_targets(&ordered, &cfg.schedule, cfg.vocab, tau)?,
            })
        })
        .collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Mat>,
    #[serde(skip)]
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &[Mat], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Model, optimizer and progress counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let model = Model::new(model_cfg, train_cfg.seed)?;
        let optimizer = AdamW::new(model.params().values(), train_cfg.lr, train_cfg.weight_decay);
        Ok(TrainState {
            model,
            optimizer,
            step: 0,
            epoch: 0,
        })
    }
}

/// Build the training graph of one spot: per-scale losses and logits.
fn spot_forward<'p>(
    model: &'p Model,
    g: &mut Graph<'p>,
    spot: &PreparedSpot,
    cfg: &TrainConfig,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let schedule = &model.config().schedule;
    let k_scales = schedule.n_scales();
    let t = &spot.targets;
    if t.n_scales() != k_scales {
        return Err(Error::Shape(format!(
            "spot {} has {} target scales, model has {k_scales}",
            spot.spot_id,
            t.n_scales()
        )));
    }
    let h = model.condition_on(g, &spot.features, spot.coords, train_mode, rng)?;
    let mut losses = Vec::with_capacity(k_scales);
    let mut logits = Vec::with_capacity(k_scales);
    let mut predicted_prev: Option<Vec<usize>> = None;
    for k in 0..k_scales {
        let up = if cfg.argmax_upsampling { predicted_prev.as_deref() } else { None };
        let l = model.forward_scale(g, &t.tokens[..k], h, k, up)?;
        let loss = if k + 1 < k_scales {
            objective::soft_kl_on(g, l, &t.soft[k])?
        } else if cfg.cross_entropy_final {
            objective::cross_entropy_on(g, l, &t.tokens[k])?
        } else {
            let mu = count_head_on(g, l);
            let y: Vec<f64> = t.counts.iter().map(|&c| c as f64).collect();
            objective::gaussian_nll_on(g, mu, &y, cfg.alpha, cfg.beta)?
        };
        if cfg.argmax_upsampling {
            predicted_prev = Some(argmax_rows(g.value(l)));
        }
        losses.push(loss);
        logits.push(l);
    }
    Ok((losses, logits))
}

fn total_of(g: &mut Graph, losses: &[Var]) -> Var {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    g.scale(total, 1.0 / losses.len() as f64)
}

/// Per-scale logits of the training forward pass, with dropout off.
pub fn teacher_forced_logits(model: &Model, spot: &PreparedSpot, cfg: &TrainConfig) -> Result<Vec<Mat>> {
    let mut g = Graph::new(model.params());
    let mut r = rng::stream(cfg.seed, "unused");
    let (_, logits) = spot_forward(model, &mut g, spot, cfg, false, &mut r)?;
    Ok(logits.iter().map(|&l| g.value(l).clone()).collect())
}

/// Loss of one spot and its gradient for every parameter.
pub fn spot_gradients(
    model: &Model,
    spot: &PreparedSpot,
    cfg: &TrainConfig,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<Mat>)> {
    let mut g = Graph::new(model.params());
    let (losses, _) = spot_forward(model, &mut g, spot, cfg, train_mode, rng)?;
    let total = total_of(&mut g, &losses);
    let per_scale = losses.iter().map(|&l| g.scalar(l)).collect();
    Ok((per_scale, g.backward(total)))
}

/// Mean total loss of one spot without touching gradients.
pub fn spot_loss(model: &Model, spot: &PreparedSpot, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new(model.params());
    let mut r = rng::stream(cfg.seed, "unused");
    let (losses, _) = spot_forward(model, &mut g, spot, cfg, false, &mut r)?;
    LossBreakdown::from_scales(losses.iter().map(|&l| g.scalar(l)).collect())
}

/// One optimizer update on `batch`; the returned breakdown is the batch mean.
pub fn train_step(state: &mut TrainState, batch: &[&PreparedSpot], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let step = state.step;
    let stream = format!("dropout/{step}");
    let chunk = rayon::current_num_threads().max(1);
    let mut sum_grads = state.model.params().zeros_like();
    let mut sum_losses: Vec<f64> = Vec::new();
    for (c, spots) in batch.chunks(chunk).enumerate() {
        let model = &state.model;
        let results: Vec<Result<(Vec<f64>, Vec<Mat>)>> = spots
            .par_iter()
            .enumerate()
            .map(|(i, spot)| {
                let mut r = rng::indexed_stream(cfg.seed, &stream, (c * chunk + i) as u64);
                spot_gradients(model, spot, cfg, true, &mut r)
            })
            .collect();
        for (spot, res) in spots.iter().zip(results) {
            let (losses, grads) = res?;
            if let Some(scale) = losses.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    scale,
                    spot_id: spot.spot_id.clone(),
                });
            }
            if sum_losses.is_empty() {
                sum_losses = vec![0.0; losses.len()];
            }
            for (s, l) in sum_losses.iter_mut().zip(&losses) {
                *s += l;
            }
            for (s, g) in sum_grads.iter_mut().zip(&grads) {
                *s += g;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in sum_grads.iter_mut() {
        g.mapv_inplace(|v| v * inv);
    }
    clip_grad_norm(&mut sum_grads, cfg.grad_clip);
    let TrainState { model, optimizer, .. } = state;
    optimizer.update(model.params_mut().values_mut(), &sum_grads);
    state.step += 1;
    LossBreakdown::from_scales(sum_losses.iter().map(|s| s * inv).collect())
}

/// Decoder output for one spot.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Tokens per scale, hierarchy order.
    pub tokens: Vec<Vec<usize>>,
    pub logits: Vec<Mat>,
    /// Final-scale tokens as counts in the dataset's gene order.
    pub counts: Vec<u32>,
    /// Count-head means in the dataset's gene order.
    pub expected: Vec<f64>,
}

/// Token choice at each scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Autoregressive decode of one spot.
///
/// With `forced` set, the history fed to scale `k` is `forced[..k]` instead
/// of the model's own choices; the reported tokens are still the model's.
pub fn decode_spot(
    model: &Model,
    features: &[f32],
    coords: [f64; 2],
    decoding: Decoding,
    spot_index: u64,
    forced: Option<&[Vec<usize>]>,
) -> Result<Decoded> {
    let cfg = model.config();
    let k_scales = cfg.schedule.n_scales();
    if let Some(f) = forced {
        if f.len() < k_scales - 1 {
            return Err(Error::Shape("forced history is shorter than the schedule".into()));
        }
    }
    let mut sampler = match decoding {
        Decoding::Greedy => None,
        Decoding::Sample { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::Invalid("sampling temperature must be positive".into()));
            }
            Some((temperature, rng::indexed_stream(seed, "sample", spot_index)))
        }
    };
    let mut g = Graph::new(model.params());
    let mut unused = rng::stream(0, "unused");
    let h = model.condition_on(&mut g, features, coords, false, &mut unused)?;
    let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(k_scales);
    let mut logits = Vec::with_capacity(k_scales);
    for k in 0..k_scales {
        let history = forced.map_or(&tokens[..k], |f| &f[..k]);
        let l = model.forward_scale(&mut g, history, h, k, None)?;
        let lv = g.value(l).clone();
        let chosen = match &mut sampler {
            None => argmax_rows(&lv),
            Some((temp, r)) => sample_rows(&lv, *temp, r),
        };
        tokens.push(chosen);
        logits.push(lv);
    }
    let last = &tokens[k_scales - 1];
    let mu = count_head(&logits[k_scales - 1]);
    let mut counts = vec![0u32; cfg.n_genes];
    let mut expected = vec![0.0; cfg.n_genes];
    for (i, &gene) in cfg.gene_order.iter().enumerate() {
        counts[gene] = last[i] as u32;
        expected[gene] = mu[i];
    }
    Ok(Decoded {
        tokens,
        logits,
        counts,
        expected,
    })
}

fn sample_rows(logits: &Mat, temperature: f64, r: &mut Rng) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|l| ((l - max) / temperature).exp()).collect();
            let mut u = r.random::<f64>() * w.iter().sum::<f64>();
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i;
                }
                u -= wi;
            }
            w.len() - 1
        })
        .collect()
}

/// Greedy decode of every spot, in dataset order.
pub fn generate(model: &Model, ds: &Dataset, decoding: Decoding) -> Result<Vec<Decoded>> {
    if ds.n_genes() != model.config().n_genes || ds.feature_dim != model.config().feature_dim {
        return Err(Error::Shape(format!(
            "dataset has {} genes / {} features, checkpoint expects {} / {}",
            ds.n_genes(),
            ds.feature_dim,
            model.config().n_genes,
            model.config().feature_dim
        )));
    }
    ds.spots
        .par_iter()
        .enumerate()
        .map(|(i, s)| decode_spot(model, &s.features, s.coords, decoding, i as u64, None))
        .collect()
}

/// Greedy predictions for prepared spots scored against their counts.
pub fn evaluate_spots(model: &Model, spots: &[PreparedSpot]) -> Result<EvalReport> {
    let decoded: Vec<Decoded> = spots
        .par_iter()
        .map(|s| decode_spot(model, &s.features, s.coords, Decoding::Greedy, 0, None))
        .collect::<Result<_>>()?;
    let y: Vec<Vec<f64>> = spots.iter().map(|s| s.counts.iter().map(|&c| c as f64).collect()).collect();
    let yhat: Vec<Vec<f64>> = decoded.iter().map(|d| d.counts.iter().map(|&c| c as f64).collect()).collect();
    EvalReport::compute(&y, &yhat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub per_scale_losses: Vec<f64>,
    pub val_pcc_all: Option<f64>,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose state was kept, when validation ran.
    pub best_epoch: Option<usize>,
    pub best_val_pcc_all: Option<f64>,
    pub stopped_early: bool,
}

/// Epoch loop with seeded shuffling. With a validation set, the state with
/// the best validation PCC-all is restored at the end.
pub fn fit(
    state: &mut TrainState,
    train: &[PreparedSpot],
    val: &[PreparedSpot],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if !val.is_empty() && val.len() < 2 {
        return Err(Error::Invalid("validation set needs at least two spots".into()));
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TrainState)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng::indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut weighted = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSpot> = idx.iter().map(|&i| &train[i]).collect();
            let loss = train_step(state, &batch, cfg)?;
            if weighted.is_empty() {
                weighted = vec![0.0; loss.per_scale.len()];
            }
            for (w, l) in weighted.iter_mut().zip(&loss.per_scale) {
                *w += l * batch.len() as f64;
            }
        }
        let per_scale: Vec<f64> = weighted.iter().map(|w| w / train.len() as f64).collect();
        state.epoch += 1;
        let (val_pcc_all, val_mse) = if val.is_empty() {
            (None, None)
        } else {
            let rep = evaluate_spots(&state.model, val)?;
            (Some(rep.pcc_all), Some(rep.mse))
        };
        let record = EpochRecord {
            epoch,
            step: state.step,
            train_loss: objective::total_loss(&per_scale)?,
            per_scale_losses: per_scale,
            val_pcc_all,
            val_mse,
        };
        log::info!(
            "epoch {} step {} loss {:.4} {:?} val_pcc_all {:?}",
            epoch,
            state.step,
            record.train_loss,
            record.per_scale_losses,
            val_pcc_all
        );
        on_epoch(&record);
        history.push(record);
        if let Some(p) = val_pcc_all {
            if best.as_ref().is_none_or(|(b, _, _)| p > *b) {
                best = Some((p, epoch, state.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_val_pcc_all, best_epoch) = match best {
        Some((p, e, s)) => {
            *state = s;
            (Some(p), Some(e))
        }
        None => (None, None),
    };
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_pcc_all,
        stopped_early,
    })
}

fn shuffle(v: &mut [usize], r: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serialises");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dtype: String,
    config_hash: String,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: u64,
    epoch: usize,
    optimizer: AdamW,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "genar-checkpoint-1";

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: Option<TrainConfig>,
    pub config_hash: String,
}

impl Checkpoint {
    /// Fails when `cfg` differs from the config the checkpoint was written with.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let h = config_hash(cfg);
        if h != self.config_hash {
            return Err(Error::Invalid(format!(
                "checkpoint config hash {} does not match run config hash {h}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// Layout: little-endian u64 header length, JSON header, then raw
/// little-endian f64 tensors (parameters, then Adam first and second moments).
pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState, train_config: Option<&TrainConfig>) -> Result<()> {
    let path = path.as_ref();
    let names = state.model.params().names();
    let values = state.model.params().values();
    let mut tensors = Vec::new();
    let mut data: Vec<&Mat> = Vec::new();
    let mut offset = 0u64;
    let groups: [(&str, &[Mat]); 3] = [("", values), ("adam.m.", &state.optimizer.m), ("adam.v.", &state.optimizer.v)];
    for (prefix, mats) in groups {
        for (name, m) in names.iter().zip(mats) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                offset,
                rows: m.nrows(),
                cols: m.ncols(),
            });
            offset += (m.len() * 8) as u64;
            data.push(m);
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f64le".into(),
        config_hash: config_hash(state.model.config()),
        model_config: state.model.config().clone(),
        train_config: train_config.cloned(),
        step: state.step,
        epoch: state.epoch,
        optimizer: state.optimizer.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + header.len() + offset as usize);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for m in data {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])?;
    if header.format != CHECKPOINT_FORMAT || header.dtype != "f64le" {
        return Err(bad("unknown checkpoint format"));
    }
    if config_hash(&header.model_config) != header.config_hash {
        return Err(bad("config hash does not match the stored config"));
    }
    let data = &bytes[header_end..];
    let mut tensors = HashMap::new();
    let mut expected_len = 0usize;
    for t in &header.tensors {
        let start = t.offset as usize;
        let len = t.rows * t.cols * 8;
        let slice = data.get(start..start + len).ok_or_else(|| bad(&format!("tensor {} out of bounds", t.name)))?;
        let vals: Vec<f64> = slice.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), vals).expect("sized from header");
        if tensors.insert(t.name.clone(), m).is_some() {
            return Err(bad(&format!("duplicate tensor {}", t.name)));
        }
        expected_len = expected_len.max(start + len);
    }
    if expected_len != data.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut m_moments = Vec::new();
    let mut v_moments = Vec::new();
    let names: Vec<String> = header
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with("adam."))
        .map(|t| t.name.clone())
        .collect();
    for name in &names {
        m_moments.push(tensors.remove(&format!("adam.m.{name}")).ok_or_else(|| bad(&format!("missing moment for {name}")))?);
        v_moments.push(tensors.remove(&format!("adam.v.{name}")).ok_or_else(|| bad(&format!("missing moment for {name}")))?);
    }
    let model = Model::from_named(header.model_config, tensors)?;
    if model.params().names() != names.as_slice() {
        return Err(bad("tensor order does not match the model layout"));
    }
    let mut optimizer = header.optimizer;
    optimizer.m = m_moments;
    optimizer.v = v_moments;
    Ok(Checkpoint {
        state: TrainState {
            model,
            optimizer,
            step: header.step,
            epoch: header.epoch,
        },
        train_config: header.train_config,
        config_hash: header.config_hash,
    })
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Replacement schedule; `None` keeps the base schedule.
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
    #[serde(default)]
    pub no_multiscale: bool,
    #[serde(default)]
    pub no_gene_identity: bool,
    #[serde(default)]
    pub cross_entropy_final: bool,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Variant {
            name: name.into(),
            schedule: None,
            no_multiscale: false,
            no_gene_identity: false,
            cross_entropy_final: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub schedule: Vec<usize>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub report: EvalReport,
}

/// Fit one model from scratch and return the restored best state.
pub fn train_model(
    train: &Dataset,
    val: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainState, FitOutcome)> {
    let model_cfg = cfg.resolve_model(model_cfg)?;
    let train_spots = prepare_spots(train, &model_cfg, cfg.tau)?;
    let val_spots = prepare_spots(val, &model_cfg, cfg.tau)?;
    let mut state = TrainState::new(model_cfg, cfg)?;
    let outcome = fit(&mut state, &train_spots, &val_spots, cfg, on_epoch)?;
    Ok((state, outcome))
}

/// Train every variant on the same data and seed and score it on `val`.
pub fn run_ablation(
    train: &Dataset,
    val: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Invalid("ablation needs at least one variant".into()));
    }
    variants
        .iter()
        .map(|v| {
            let mut model_cfg = base_model.clone();
            if let Some(dims) = &v.schedule {
                model_cfg.schedule = ScaleSchedule::new(model_cfg.n_genes, dims)?;
            }
            let cfg = TrainConfig {
                no_multiscale: base_train.no_multiscale || v.no_multiscale,
                no_gene_identity: base_train.no_gene_identity || v.no_gene_identity,
                cross_entropy_final: base_train.cross_entropy_final || v.cross_entropy_final,
                ..base_train.clone()
            };
            log::info!("ablation variant {}", v.name);
            let (state, outcome) = train_model(train, val, &model_cfg, &cfg, &mut |_| {})?;
            let val_spots = prepare_spots(val, state.model.config(), cfg.tau)?;
            let report = evaluate_spots(&state.model, &val_spots)?;
            Ok(AblationRow {
                variant: v.clone(),
                schedule: state.model.config().schedule.dims().to_vec(),
                epochs_run: outcome.history.len(),
                best_epoch: outcome.best_epoch,
                report,
            })
        })
        .collect()
}
