//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Runs with its own `main` so the lines are visible without `--nocapture`.
//! Criterion numbers given as arguments restrict the run to those criteria.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Result};
use ndarray::Array2;
use rand::Rng as _;

use genar_cli::{cmd_ablate, cmd_predict, cmd_train, preset_variants, read_predictions, Preset};
use genar_core::autograd::{randn, Graph, Mat, ParamStore};
use genar_core::dataset::{generate_synthetic, SyntheticConfig};
use genar_core::engine::{self, Decoding, TrainConfig, Variant};
use genar_core::eval::{log_transform, mse_mae, pcc_per_gene, pcc_topk, EvalReport};
use genar_core::hierarchy::{adjusted_rand_index, build_hierarchy};
use genar_core::model::{Model, ModelConfig};
use genar_core::multiscale::{adaptive_pool, Vocab};
use genar_core::objective::{gaussian_nll, gaussian_nll_on, soft_kl, soft_kl_on, total_loss};
use genar_core::rng;
use genar_verify::{learnability_config, learnability_data, outcome, Outcome};
use genar_oracle::{
    oracle_accumulate_total, oracle_adjusted_rand_index, oracle_mse_mae, oracle_pcc, oracle_pool, oracle_softmax,
    oracle_topk_mean,
};

/// Small random model whose zero-initialised tensors are also filled in.
fn random_model(schedule: &[usize], seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::for_genes(16, schedule)?;
    cfg.d_model = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.feature_dim = 8;
    cfg.pe_dim = 8;
    cfg.vocab = Vocab::new(64)?;
    cfg.gene_order = (0..16).rev().collect();
    cfg.init_std = 0.3;
    let mut model = Model::new(cfg, seed)?;
    let mut r = rng::stream(seed, "perturb");
    for p in model.params_mut().values_mut() {
        let noise = randn(&mut r, p.nrows(), p.ncols(), 0.1);
        *p += &noise;
    }
    Ok(model)
}

fn small_data(seed: u64) -> Result<genar_core::dataset::Dataset> {
    Ok(generate_synthetic(&SyntheticConfig {
        feature_dim: 8,
        n_spots: 64,
        seed,
        ..Default::default()
    })?)
}

fn c2_pooling() -> Result<Outcome> {
    let mut r = rng::stream(2, "pool");
    let mut cases = 0;
    for n in 1..=32 {
        for d in 1..=n {
            for _ in 0..100 {
                let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..50.0)).collect();
                let got = adaptive_pool(&y, d)?;
                let want = oracle_pool(&y, d).map_err(|e| anyhow::anyhow!("{e:?}"))?.values;
                if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) || got.len() != want.len() {
                    return outcome(false, format!("n={n} d={d}: {got:?} vs {want:?}"));
                }
                cases += 1;
            }
        }
    }
    outcome(true, format!("{cases} vectors bitwise equal"))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central difference of `loss` with respect to entry `(r, c)` of tensor `id`.
fn central_diff(store: &mut ParamStore, id: usize, r: usize, c: usize, loss: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let h = 1e-5;
    let orig = store.values()[id][[r, c]];
    store.values_mut()[id][[r, c]] = orig + h;
    let up = loss(store);
    store.values_mut()[id][[r, c]] = orig - h;
    let down = loss(store);
    store.values_mut()[id][[r, c]] = orig;
    (up - down) / (2.0 * h)
}

fn c3_gradients() -> Result<Outcome> {
    let mut r = rng::stream(3, "grad");
    let mut worst: f64 = 0.0;

    // Soft KL against random target distributions.
    let mut store = ParamStore::new();
    store.add("logits", randn(&mut r, 4, 9, 1.5));
    let mut q = Array2::from_shape_simple_fn((4, 9), || r.random_range(0.0..1.0));
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let kl_analytic = {
        let mut g = Graph::new(&store);
        let l = g.param(genar_core::autograd::ParamId(0));
        let loss = soft_kl_on(&mut g, l, &q)?;
        g.backward(loss)
    };
    for i in 0..4 {
        for j in 0..9 {
            let n = central_diff(&mut store, 0, i, j, &|s| soft_kl(&s.values()[0], &q).unwrap());
            worst = worst.max(rel_err(kl_analytic[0][[i, j]], n));
        }
    }
    let kl_worst = worst;

    // Gaussian NLL with a non-zero alpha, so the variance depends on the prediction.
    let (alpha, beta) = (0.7, 1.3);
    let mut store = ParamStore::new();
    store.add("mu", Array2::from_shape_simple_fn((6, 1), || r.random_range(0.1..8.0)));
    let y: Vec<f64> = (0..6).map(|_| r.random_range(0..10) as f64).collect();
    let nll_analytic = {
        let mut g = Graph::new(&store);
        let mu = g.param(genar_core::autograd::ParamId(0));
        let loss = gaussian_nll_on(&mut g, mu, &y, alpha, beta)?;
        g.backward(loss)
    };
    let mut nll_worst: f64 = 0.0;
    for i in 0..6 {
        let n = central_diff(&mut store, 0, i, 0, &|s| {
            let mu: Vec<f64> = s.values()[0].iter().copied().collect();
            gaussian_nll(&mu, &y, alpha, beta).unwrap()
        });
        nll_worst = nll_worst.max(rel_err(nll_analytic[0][[i, 0]], n));
    }

    // End to end through the model and every loss term.
    let mut model = random_model(&[1, 4, 16], 3)?;
    let ds = small_data(3)?;
    let spots = engine::prepare_spots(&ds, model.config(), 1.0)?;
    let spot = &spots[5];
    let cfg = TrainConfig::default();
    let mut unused = rng::stream(0, "unused");
    let (_, grads) = engine::spot_gradients(&model, spot, &cfg, false, &mut unused)?;
    let mut e2e_worst: f64 = 0.0;
    let mut sizeable = 0;
    let n_tensors = model.params().len();
    for _ in 0..50 {
        let id = r.random_range(0..n_tensors);
        let (rows, cols) = model.params().values()[id].dim();
        let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
        let h = 1e-5;
        let orig = model.params().values()[id][[i, j]];
        model.params_mut().values_mut()[id][[i, j]] = orig + h;
        let up = engine::spot_loss(&model, spot, &cfg)?.total;
        model.params_mut().values_mut()[id][[i, j]] = orig - h;
        let down = engine::spot_loss(&model, spot, &cfg)?.total;
        model.params_mut().values_mut()[id][[i, j]] = orig;
        let n = (up - down) / (2.0 * h);
        let a = grads[id][[i, j]];
        if a.abs() > 1e-4 {
            sizeable += 1;
        }
        e2e_worst = e2e_worst.max(rel_err(a, n));
    }
    let pass = kl_worst < 1e-4 && nll_worst < 1e-4 && e2e_worst < 1e-4;
    outcome(
        pass,
        format!(
            "max rel err: soft_kl {kl_worst:.2e}, gaussian_nll {nll_worst:.2e}, end-to-end {e2e_worst:.2e} \
             over 50 entries ({sizeable} with |grad| > 1e-4)"
        ),
    )
}

fn c4_causality() -> Result<Outcome> {
    let model = random_model(&[1, 4, 16], 4)?;
    let cfg = model.config().clone();
    let mut r = rng::stream(4, "causal");
    let mut compared = 0usize;
    let mut max_delta: f64 = 0.0;
    let mut changed_at_j = true;
    for _trial in 0..3 {
        let features: Vec<f32> = (0..cfg.feature_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let coords = [r.random_range(0.0..16.0), r.random_range(0.0..16.0)];
        let history: Vec<Vec<usize>> = cfg
            .schedule
            .dims()
            .iter()
            .map(|&d| (0..d).map(|_| r.random_range(0..cfg.vocab.size())).collect())
            .collect();
        for k in 0..cfg.schedule.n_scales() {
            let mut g = Graph::new(model.params());
            let mut unused = rng::stream(0, "unused");
            let h = model.condition_on(&mut g, &features, coords, false, &mut unused)?;
            let x = model.assemble_input(&mut g, &history[..k], k, None)?;
            let x_val = g.value(x).clone();
            let t = x_val.nrows();
            let d_k = cfg.schedule.dim(k);
            let base = {
                let xc = g.constant(x_val.clone());
                let l = model.decode(&mut g, xc, h, k)?;
                g.value(l).clone()
            };
            for j in 0..t {
                let mut xp = x_val.clone();
                let noise = randn(&mut r, 1, cfg.d_model, 1.0);
                let mut row = xp.row_mut(j);
                row += &noise.row(0);
                let xc = g.constant(xp);
                let l = model.decode(&mut g, xc, h, k)?;
                let pert = g.value(l);
                for slot in 0..d_k {
                    let pos = t - d_k + slot;
                    let delta = (&pert.row(slot) - &base.row(slot)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if pos < j {
                        max_delta = max_delta.max(delta);
                        compared += 1;
                    } else if pos == j && delta == 0.0 {
                        changed_at_j = false;
                    }
                }
            }
        }
    }
    outcome(
        max_delta == 0.0 && changed_at_j,
        format!("max |delta| {max_delta:e} over {compared} earlier-position logit rows; perturbed position always moves"),
    )
}

fn c5_teacher_forcing() -> Result<Outcome> {
    let model = random_model(&[1, 4, 16], 5)?;
    let ds = small_data(5)?;
    let spots = engine::prepare_spots(&ds, model.config(), 1.0)?;
    let cfg = TrainConfig::default();
    let mut r = rng::stream(5, "pick");
    for n in 0..20 {
        let i = r.random_range(0..spots.len());
        let spot = &spots[i];
        let train_logits = engine::teacher_forced_logits(&model, spot, &cfg)?;
        let forced = &spot.targets.tokens;
        let decoded = engine::decode_spot(&model, &spot.features, spot.coords, Decoding::Greedy, i as u64, Some(forced))?;
        for (k, (a, b)) in train_logits.iter().zip(&decoded.logits).enumerate() {
            if a.dim() != b.dim() || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return outcome(false, format!("spot #{n} ({}) differs at scale {k}", spot.spot_id));
            }
        }
    }
    outcome(true, "20 spots, all scales bitwise equal")
}

fn c6_loss_identities() -> Result<Outcome> {
    let mut r = rng::stream(6, "loss");
    let mut self_kl: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    let mut accum: f64 = 0.0;
    let mut nll_gap: f64 = 0.0;
    for _ in 0..200 {
        let rows = r.random_range(1..6);
        let v = r.random_range(2..40);
        let logits = randn(&mut r, rows, v, 3.0);
        let mut sm = Mat::zeros((rows, v));
        for (i, row) in logits.rows().into_iter().enumerate() {
            let p = oracle_softmax(&row.to_vec());
            sm.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
        }
        self_kl = self_kl.max(soft_kl(&logits, &sm)?.abs());

        let mut q = Array2::from_shape_simple_fn((rows, v), || r.random_range(0.0..1.0f64).powi(3));
        for mut row in q.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        min_kl = min_kl.min(soft_kl(&logits, &q)?);

        let per_scale: Vec<f64> = (0..r.random_range(1..8)).map(|_| r.random_range(0.0..10.0)).collect();
        accum = accum.max((total_loss(&per_scale)? - oracle_accumulate_total(&per_scale)).abs());

        let (alpha, beta) = (r.random_range(0.0..2.0), r.random_range(0.1..3.0));
        let y: Vec<f64> = (0..v).map(|_| r.random_range(0..60) as f64).collect();
        let want = y
            .iter()
            .map(|&t| 0.5 * (2.0 * std::f64::consts::PI * (alpha * t + beta)).ln())
            .sum::<f64>()
            / y.len() as f64;
        nll_gap = nll_gap.max((gaussian_nll(&y, &y, alpha, beta)? - want).abs());
    }
    let pass = self_kl < 1e-10 && min_kl >= -1e-12 && accum <= 1e-12 && nll_gap <= 1e-10;
    outcome(
        pass,
        format!("self KL {self_kl:.1e}, min KL {min_kl:.3e}, total vs accumulate {accum:.1e}, NLL at y {nll_gap:.1e}"),
    )
}

fn c7_metric_oracles() -> Result<Outcome> {
    let mut r = rng::stream(7, "metrics");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut m = || -> Vec<Vec<f64>> {
            (0..20)
                .map(|_| (0..8).map(|_| r.random_range(0..40) as f64).collect())
                .collect()
        };
        let y = m();
        let yhat = m();
        let p = pcc_per_gene(&y, &yhat)?;
        for g in 0..8 {
            let a: Vec<f64> = y.iter().map(|row| log_transform(row[g]).unwrap()).collect();
            let b: Vec<f64> = yhat.iter().map(|row| log_transform(row[g]).unwrap()).collect();
            let want = oracle_pcc(&a, &b).map_err(|e| anyhow::anyhow!("{e:?}"))?;
            worst = worst.max((p[g] - want).abs());
        }
        let (mse, mae) = mse_mae(&y, &yhat)?;
        let (omse, omae) = oracle_mse_mae(&y.concat(), &yhat.concat());
        worst = worst.max((mse - omse).abs()).max((mae - omae).abs());
        for k in 1..=8 {
            worst = worst.max((pcc_topk(&p, k)? - oracle_topk_mean(&p, k)).abs());
        }
    }
    let y: Vec<Vec<f64>> = (0..20).map(|i| (0..8).map(|g| ((i * 7 + g * 3) % 11) as f64).collect()).collect();
    let perfect = EvalReport::compute(&y, &y)?;
    let exact = perfect.pcc_all == 1.0 && perfect.mse == 0.0 && perfect.mae == 0.0;
    outcome(
        worst < 1e-10 && exact,
        format!(
            "max oracle gap {worst:.1e}; perfect prediction pcc_all {} mse {} mae {}",
            perfect.pcc_all, perfect.mse, perfect.mae
        ),
    )
}

fn c8_clustering() -> Result<Outcome> {
    let mut aris = Vec::new();
    for seed in 0..5 {
        let cfg = SyntheticConfig {
            feature_dim: 8,
            seed: 100 + seed,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg)?;
        let h = build_hierarchy(&ds.gene_profiles(), cfg.n_modules, 12, seed)?;
        let planted = cfg.planted_modules();
        let ari = adjusted_rand_index(&h.major_cluster, &planted);
        ensure!(
            (ari - oracle_adjusted_rand_index(&h.major_cluster, &planted)).abs() < 1e-12,
            "ARI disagrees with oracle"
        );
        aris.push(ari);
    }
    outcome(aris.iter().all(|&a| a == 1.0), format!("ARI per seed {aris:?}"))
}

fn c1_learnability(root: &Path) -> Result<Outcome> {
    let data = root.join("c1-data");
    learnability_data(&data)?;
    let cfg = learnability_config(&data, 30);
    let start = Instant::now();
    let summary = cmd_train(&cfg, &root.join("c1-run"))?;
    let secs = start.elapsed().as_secs_f64();
    let pcc = summary.best_val_pcc_all.unwrap_or(f64::NAN);
    let mse = summary.best_val_mse.unwrap_or(f64::NAN);

    // Count-head mean on the validation slide, reported for comparison only.
    let ck = engine::load_checkpoint(&summary.checkpoint)?;
    let ds = genar_core::dataset::load_dataset(&data)?;
    let (_, val) = genar_cli::train_val_split(&ds, None)?;
    let decoded = engine::generate(&ck.state.model, &val, Decoding::Greedy)?;
    let y: Vec<Vec<f64>> = val.spots.iter().map(|s| s.counts.iter().map(|&c| c as f64).collect()).collect();
    let mu: Vec<Vec<f64>> = decoded.iter().map(|d| d.expected.clone()).collect();
    let mu_report = EvalReport::compute(&y, &mu)?;

    let pass = pcc >= 0.90 && mse <= 0.15 && secs <= 600.0;
    outcome(
        pass,
        format!(
            "val pcc_all {pcc:.4} (>= 0.90: {}), val mse {mse:.4} (<= 0.15: {}), {secs:.0}s, {} epochs; \
             count-head mean on val: pcc_all {:.4} mse {:.4}",
            pcc >= 0.90,
            mse <= 0.15,
            summary.history.len(),
            mu_report.pcc_all,
            mu_report.mse
        ),
    )
}

fn c9_determinism(root: &Path) -> Result<Outcome> {
    let data = root.join("c9-data");
    learnability_data(&data)?;
    let cfg = learnability_config(&data, 3);
    let a = root.join("c9-a");
    let b = root.join("c9-b");
    cmd_train(&cfg, &a)?;
    cmd_train(&cfg, &b)?;
    let same_history = fs::read(a.join("history.jsonl"))? == fs::read(b.join("history.jsonl"))?;
    let same_ckpt = fs::read(a.join("checkpoint.bin"))? == fs::read(b.join("checkpoint.bin"))?;

    let ck = engine::load_checkpoint(a.join("checkpoint.bin"))?;
    let resaved = root.join("c9-resaved.bin");
    engine::save_checkpoint(&resaved, &ck.state, ck.train_config.as_ref())?;
    let same_resave = fs::read(&resaved)? == fs::read(a.join("checkpoint.bin"))?;

    let ds = genar_core::dataset::load_dataset(&data)?;
    let first = engine::generate(&ck.state.model, &ds, Decoding::Greedy)?;
    let second = engine::generate(&engine::load_checkpoint(&resaved)?.state.model, &ds, Decoding::Greedy)?;
    let same_logits = first.iter().zip(&second).all(|(x, y)| {
        x.logits
            .iter()
            .zip(&y.logits)
            .all(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
    });

    let mut pcfg = cfg.clone();
    pcfg.checkpoint = Some(a.join("checkpoint.bin"));
    let p1 = read_predictions(&cmd_predict(&pcfg, &root.join("c9-pred-a"))?)?;
    pcfg.checkpoint = Some(resaved);
    let p2 = read_predictions(&cmd_predict(&pcfg, &root.join("c9-pred-b"))?)?;

    let pass = same_history && same_ckpt && same_resave && same_logits && p1 == p2;
    outcome(
        pass,
        format!(
            "history identical {same_history}, checkpoint identical {same_ckpt}, \
             re-save identical {same_resave}, reloaded logits identical {same_logits}, predictions identical {}",
            p1 == p2
        ),
    )
}

fn c10_ablation(root: &Path) -> Result<Outcome> {
    let data = root.join("c10-data");
    learnability_data(&data)?;

    let mut sweep = learnability_config(&data, 2);
    sweep.preset = Some(Preset::Flags);
    sweep.variants = preset_variants(Preset::Scales, 16);
    let report = cmd_ablate(&sweep, &root.join("c10-sweep"))?;
    let schedules: Vec<Vec<usize>> = report.rows.iter().map(|r| r.schedule.clone()).collect();
    let want_scales = [vec![16], vec![1, 4, 16], vec![1, 2, 4, 16], vec![1, 2, 4, 8, 16]];
    let sweep_ok = report.rows.len() == 7
        && want_scales.iter().all(|s| schedules.contains(s))
        && report.rows.iter().all(|r| r.report.n_genes == 16 && r.report.pcc_all.is_finite());
    if !sweep_ok {
        return outcome(false, format!("sweep rows {schedules:?}"));
    }

    let mut margins = Vec::new();
    for seed in [2021, 2022, 2023] {
        let mut cfg = learnability_config(&data, 30);
        cfg.train.seed = seed;
        cfg.variants = vec![
            Variant {
                schedule: Some(vec![16]),
                ..Variant::named("single-scale")
            },
            Variant {
                schedule: Some(vec![1, 4, 16]),
                ..Variant::named("multi-scale")
            },
        ];
        let rep = cmd_ablate(&cfg, &root.join(format!("c10-seed{seed}")))?;
        let single = rep.rows[0].report.pcc_all;
        let multi = rep.rows[1].report.pcc_all;
        margins.push((seed, single, multi));
    }
    let pass = margins.iter().all(|&(_, s, m)| m > s);
    let text: Vec<String> = margins
        .iter()
        .map(|(seed, s, m)| format!("seed {seed}: multi {m:.4} vs single {s:.4}"))
        .collect();
    outcome(pass, format!("7 sweep rows emitted; {}", text.join("; ")))
}

type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let criteria: Vec<(u32, &str, Check)> = vec![
        (2, "pooling oracle equivalence", Box::new(c2_pooling)),
        (3, "gradient checks", Box::new(c3_gradients)),
        (4, "causality", Box::new(c4_causality)),
        (5, "teacher-forcing equivalence", Box::new(c5_teacher_forcing)),
        (6, "loss identities", Box::new(c6_loss_identities)),
        (7, "metric oracles", Box::new(c7_metric_oracles)),
        (8, "clustering recovery", Box::new(c8_clustering)),
        (9, "determinism", Box::new(move || c9_determinism(root))),
        (1, "synthetic learnability", Box::new(move || c1_learnability(root))),
        (10, "ablation harness", Box::new(move || c10_ablation(root))),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = Vec::new();
    for (n, name, run) in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.0)) {
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let line = format!(
            "criterion {n:>2} {:<28} {}  ({:.1}s) {detail}",
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push((*n, line, pass));
    }
    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (_, line, _) in &results {
        println!("{line}");
    }
    if results.iter().all(|r| r.2) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
