//! TOML run configuration.
//!
//! ```toml
//! [train]
//! epochs = 10
//! batch_scenes = 4
//! lr = 0.001
//! lr_min = 0.00001
//! seed = 0
//! enable_ham = true
//! enable_diffusion = true
//! enable_tt = true
//!
//! [train.diffusion]   # timesteps, cosine_s, snr, clamp_bound
//! [train.loss]        # theta_reg, theta_h, theta_l, smooth_l1_beta, corner_weight, ...
//! [train.ham]         # d, heads, tokens, time_width
//! [train.proposals]   # per_gt, jitter, negatives_per_scene
//! [train.scene]       # object counts, size ranges, point density, clutter
//!
//! [infer]
//! steps = 3
//! ensemble = "mean"   # none | mean | nms
//! seed = 0
//!
//! [eval]
//! proposal_seed = 7
//! ap_iou = 0.5
//! recall_ious = [0.3, 0.5, 0.7]
//! latency_repeats = 3
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use refine3d_core::pipeline::{EvalThresholds, InferConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the jitter draw for evaluation proposals.
    pub proposal_seed: u64,
    pub ap_iou: f64,
    pub recall_ious: Vec<f64>,
    /// Timed inference passes; the fastest is reported.
    pub latency_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = EvalThresholds::default();
        EvalConfig {
            proposal_seed: 7,
            ap_iou: t.ap_iou,
            recall_ious: t.recall_ious,
            latency_repeats: 3,
        }
    }
}

impl EvalConfig {
    pub fn thresholds(&self) -> EvalThresholds {
        EvalThresholds {
            ap_iou: self.ap_iou,
            recall_ious: self.recall_ious.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), Self::load)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::in_section("train", e))?;
        self.infer
            .validate(self.train.diffusion.timesteps)
            .map_err(|e| CliError::in_section("infer", e))?;
        let e = &self.eval;
        if !(e.ap_iou > 0.0 && e.ap_iou <= 1.0) {
            return Err(CliError::Config(format!(
                "[eval] ap_iou must lie in (0, 1], got {}",
                e.ap_iou
            )));
        }
        if e.recall_ious.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(CliError::Config(
                "[eval] recall_ious must lie in (0, 1]".into(),
            ));
        }
        if e.latency_repeats == 0 {
            return Err(CliError::Config(
                "[eval] latency_repeats must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.diffusion.snr = 4.0;
        cfg.train.enable_tt = false;
        cfg.infer.steps = 5;
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::from_toml_str("[train]\nbatch_scenes = 0\n").unwrap_err();
        assert!(err.to_string().contains("batch_scenes"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        let err = RunConfig::from_toml_str("[train.diffusion]\nsnr = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("snr"), "{err}");
        let err = RunConfig::from_toml_str("[infer]\nensemble = \"vote\"\n").unwrap_err();
        assert!(err.to_string().contains("vote"), "{err}");
    }
}
