//! Fixtures shared by the acceptance suite.

use std::path::Path;

use anyhow::Result;

use genar_cli::{cmd_synth, RunConfig};
use genar_core::dataset::SyntheticConfig;
use genar_core::engine::TrainConfig;

/// Verdict of one criterion with a one-line explanation.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

/// Learnability data: 16 genes, 256 spots on 4 slides, 4 modules, amplitude 20.
pub fn learnability_data(dir: &Path) -> Result<()> {
    let cfg = RunConfig {
        synthetic: SyntheticConfig {
            n_genes: 16,
            n_spots: 256,
            n_slides: 4,
            n_modules: 4,
            module_amplitude: 20.0,
            base_rate: 1.0,
            seed: 2021,
            ..Default::default()
        },
        ..Default::default()
    };
    cmd_synth(&cfg, dir)
}

/// Model shrunk to d_model 128, depth 4, heads 4 with schedule (1, 4, 16).
pub fn learnability_config(data: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        data: Some(data.to_path_buf()),
        ..Default::default()
    };
    cfg.model.d_model = 128;
    cfg.model.depth = 4;
    cfg.model.heads = 4;
    cfg.model.schedule = Some(vec![1, 4, 16]);
    cfg.train = TrainConfig {
        epochs,
        lr: 1e-3,
        batch_size: 16,
        ..Default::default()
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learnability_config_is_valid() {
        let cfg = learnability_config(Path::new("data"), 30);
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule(16).unwrap().dims(), &[1, 4, 16]);
        cfg.synthetic.validate().unwrap();
    }
}
