use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricSpec;
use crate::nets::checkpoint::sha256_hex;
use crate::nets::{DiffusionNetConfig, ValueNetConfig};
use crate::schedule::NoiseSchedule;

/// Training hyperparameters. Serialised as a flat TOML table whose keys are
/// exactly the field names; unknown keys are rejected.
///
/// Defaults are desk scale: a tenth of the reference iteration counts and a
/// quarter of its batch. The reference values are all reachable from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_total: usize,
    /// Iterations of ELBO-only warm-up before the joint phase.
    pub n_th: usize,
    pub gamma: f64,
    /// Weight of the critic term in the actor objective.
    pub alpha: f64,
    pub lr_d_phase1: f64,
    pub lr_d_phase2: f64,
    pub lr_v: f64,
    pub batch: usize,
    pub seed: u64,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Reward metric, see [`MetricSpec`]'s `FromStr`.
    pub metric: String,
    /// Skip the critic entirely and keep regressing on L1 after `n_th`.
    pub elbo_only: bool,
    pub critic_step_input: bool,
    /// Joint-phase order within an iteration: actor update first when true.
    pub d_before_v: bool,
    /// Standard deviation of Gaussian noise added to the actions the critic
    /// is trained on. Zero trains it on the actor's predictions only.
    pub explore_std: f64,
    pub channels: usize,
    pub blocks: usize,
    /// Abort when the batch L1 exceeds this multiple of its baseline.
    pub guard_factor: f64,
    /// Iterations averaged into the divergence baseline.
    pub guard_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_total: 4000,
            n_th: 3000,
            gamma: 0.95,
            alpha: 1.0,
            lr_d_phase1: 2e-4,
            lr_d_phase2: 1e-4,
            lr_v: 1e-5,
            batch: 8,
            seed: 0,
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.035,
            metric: "si_snr".into(),
            elbo_only: false,
            critic_step_input: false,
            d_before_v: true,
            explore_std: 0.0,
            channels: 16,
            blocks: 4,
            guard_factor: 10.0,
            guard_window: 20,
        }
    }
}

impl TrainConfig {
    /// The full-size reference hyperparameters.
    pub fn reference() -> Self {
        TrainConfig {
            n_total: 40_000,
            n_th: 30_000,
            batch: 32,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_th > self.n_total {
            return bad(format!("n_th {} exceeds n_total {}", self.n_th, self.n_total));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} must be finite and nonnegative", self.alpha));
        }
        for (name, lr) in [
            ("lr_d_phase1", self.lr_d_phase1),
            ("lr_d_phase2", self.lr_d_phase2),
            ("lr_v", self.lr_v),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} {lr} must be positive"));
            }
        }
        if !(self.explore_std.is_finite() && self.explore_std >= 0.0) {
            return bad(format!(
                "explore_std {} must be finite and nonnegative",
                self.explore_std
            ));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.channels == 0 || self.blocks == 0 {
            return bad("network needs at least one channel and one block".into());
        }
        if !(self.guard_factor > 1.0) || self.guard_window == 0 {
            return bad("guard_factor must exceed 1 and guard_window be positive".into());
        }
        self.metric_spec()?;
        self.schedule()?;
        Ok(())
    }

    pub fn metric_spec(&self) -> Result<MetricSpec> {
        self.metric.parse()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn diffusion_net(&self) -> DiffusionNetConfig {
        DiffusionNetConfig {
            channels: self.channels,
            blocks: self.blocks,
            ..DiffusionNetConfig::default()
        }
    }

    pub fn value_net(&self) -> ValueNetConfig {
        ValueNetConfig {
            step_input: self.critic_step_input,
            ..ValueNetConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn phase(&self, iter: usize) -> u8 {
        if iter < self.n_th {
            1
        } else {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        TrainConfig::reference().validate().unwrap();
        assert_eq!(TrainConfig::reference().n_total, 40_000);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = TrainConfig::from_toml("alpha = 0.1\nseed = 7\n").unwrap();
        assert_eq!((cfg.alpha, cfg.seed, cfg.n_total), (0.1, 7, 4000));
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "n_th = 5000",
            "gamma = 1.0",
            "alpha = -1.0",
            "batch = 0",
            "lr_v = 0.0",
            "metric = \"pesq\"",
            "beta_max = 2.0",
            "unknown_key = 1",
        ] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
