//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 0
//!
//! [data]            # generator parameters, see `synthgen`
//! problem = "sine1d"
//!
//! [model]           # latent sizes and widths, see `nets::ModelConfig`
//! dim_w = 256
//! ...
//! [model.arch]
//! problem = "sine1d"
//! ...
//!
//! [train]           # optimizer, schedule and curriculum, see `trainer::TrainConfig`
//! batch_size = 256
//! ...
//! ```
//!
//! The generator's `batch_size` and `seed` keys are overridden by
//! `train.batch_size` and the top-level `seed` when training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Architecture, ModelConfig};
use crate::synthgen::{DataSpec, GradientBatchSpec, SineBatchSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Full-scale 1D experiment.
    pub fn sine_reference() -> Self {
        Self {
            seed: 0,
            data: DataSpec::Sine1d(SineBatchSpec::default()),
            model: ModelConfig::sine_reference(),
            train: TrainConfig::reference(16),
        }
    }

    /// Full-scale 2D experiment.
    pub fn gradient_reference() -> Self {
        Self {
            seed: 0,
            data: DataSpec::Gradient2d(GradientBatchSpec::default()),
            model: ModelConfig::gradient_reference(),
            train: TrainConfig::reference(8),
        }
    }

    /// Desk-scale 1D experiment: frequencies 1..=5, at most 4 parts,
    /// 100 timesteps, small networks.
    pub fn sine_desk() -> Self {
        let data = SineBatchSpec {
            freq_range: (1, 5),
            parts_range: (1, 4),
            timesteps: 100,
            resolution: 50.0,
            ..SineBatchSpec::default()
        };
        let mut model = ModelConfig::sine_tiny(100, 5);
        model.dim_w = 32;
        model.dim_z = 4;
        model.graph_layers = 3;
        model.graph_width = 64;
        model.precision = crate::nets::Precision::F32;
        if let Architecture::Sine1d(a) = &mut model.arch {
            a.label_embed = 8;
            a.pz_hidden = 128;
            a.dec_channels = [16, 16, 8, 8];
            a.enc_channels = [8, 16, 16];
            a.qz_hidden = 8;
        }
        let train = TrainConfig {
            batch_size: 32,
            adam_alpha: 1e-3,
            anneal_every: 6000,
            curriculum_start_k: 2,
            curriculum_step_every: 500,
            curriculum_max_k: 4,
            max_iterations: 10_000,
            checkpoint_every: 1000,
            metrics_every: 100,
            convergence_window: 0,
            ..TrainConfig::reference(4)
        };
        Self {
            seed: 0,
            data: DataSpec::Sine1d(data),
            model,
            train,
        }
    }

    /// Test-scale 1D experiment (widths at most 8).
    pub fn sine_tiny() -> Self {
        let data = SineBatchSpec {
            freq_range: (1, 5),
            parts_range: (1, 4),
            timesteps: 100,
            batch_size: 8,
            ..SineBatchSpec::default()
        };
        let train = TrainConfig {
            batch_size: 8,
            adam_alpha: 1e-3,
            curriculum_step_every: 50,
            curriculum_max_k: 4,
            max_iterations: 200,
            checkpoint_every: 50,
            metrics_every: 10,
            convergence_window: 0,
            ..TrainConfig::reference(4)
        };
        Self {
            seed: 0,
            data: DataSpec::Sine1d(data),
            model: ModelConfig::sine_tiny(100, 5),
            train,
        }
    }

    /// Test-scale 2D experiment.
    pub fn gradient_tiny() -> Self {
        let data = GradientBatchSpec {
            anchor_count_range: (1, 3),
            batch_size: 4,
            ..GradientBatchSpec::default()
        };
        let train = TrainConfig {
            batch_size: 4,
            adam_alpha: 1e-3,
            curriculum_step_every: 50,
            curriculum_max_k: 3,
            max_iterations: 100,
            checkpoint_every: 50,
            metrics_every: 10,
            convergence_window: 0,
            ..TrainConfig::reference(3)
        };
        Self {
            seed: 0,
            data: DataSpec::Gradient2d(data),
            model: ModelConfig::gradient_tiny(),
            train,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn problem_name(&self) -> &'static str {
        self.model.problem_name()
    }

    /// Generator spec actually used for training.
    pub fn effective_data(&self) -> DataSpec {
        let mut d = self.data.clone();
        match &mut d {
            DataSpec::Sine1d(s) => {
                s.batch_size = self.train.batch_size;
                s.seed = self.seed;
            }
            DataSpec::Gradient2d(s) => {
                s.batch_size = self.train.batch_size;
                s.seed = self.seed;
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        match (&self.data, &self.model.arch) {
            (DataSpec::Sine1d(d), Architecture::Sine1d(a)) => {
                if d.timesteps != a.timesteps {
                    return Err(Error::Config(format!(
                        "data.timesteps = {} but model.arch.timesteps = {}",
                        d.timesteps, a.timesteps
                    )));
                }
                if d.freq_range.0 != a.freq_min || d.num_freqs() != a.num_freqs {
                    return Err(Error::Config(format!(
                        "data.freq_range = {:?} does not match the model's frequency vocabulary \
                         (freq_min = {}, num_freqs = {})",
                        d.freq_range, a.freq_min, a.num_freqs
                    )));
                }
            }
            (DataSpec::Gradient2d(_), Architecture::Gradient2d(_)) => {}
            _ => {
                return Err(Error::Config(
                    "data.problem and model.arch.problem disagree".into(),
                ))
            }
        }
        Ok(())
    }
}
