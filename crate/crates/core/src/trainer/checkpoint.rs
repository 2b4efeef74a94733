//! Checkpoint archive layout (safetensors):
//!
//! * tensors `param/<path>`, `adam_m/<path>`, `adam_v/<path>` for every model
//!   parameter path;
//! * metadata `schema` (integer), `config` (the experiment config as JSON) and
//!   `state` (counters, schedule scale, random-stream states and partial
//!   metric sums, as JSON).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricWindow;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nets::CompVae;
use crate::tensorio;

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Convergence bookkeeping: sums over the current block and the previous
/// block's mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub(super) struct ConvergenceState {
    pub block_len: usize,
    pub block_sum: f64,
    pub prev_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(super) struct TrainState {
    /// Completed iterations.
    pub iteration: usize,
    /// Product of divergence-recovery reductions applied to the learning rate.
    pub lr_scale: f64,
    pub consecutive_restores: usize,
    pub total_restores: usize,
    pub adam_steps: u64,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub window: MetricWindow,
    pub convergence: ConvergenceState,
    pub converged: bool,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: BTreeMap<String, Tensor>,
    pub(super) adam_m: BTreeMap<String, Tensor>,
    pub(super) adam_v: BTreeMap<String, Tensor>,
    pub(super) state: TrainState,
}

impl Checkpoint {
    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn problem_name(&self) -> &'static str {
        self.config.problem_name()
    }

    pub fn expect_problem(&self, problem: &str) -> Result<()> {
        if self.problem_name() != problem {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, expected {problem}",
                self.problem_name()
            )));
        }
        Ok(())
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn build_model(&self) -> Result<CompVae> {
        let model = CompVae::new(self.config.model.clone(), self.config.seed)?;
        model.params().load(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [
            ("param", &self.params),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            for (k, t) in map {
                tensors.insert(format!("{prefix}/{k}"), t.clone());
            }
        }
        let meta = HashMap::from([
            ("schema".to_string(), CHECKPOINT_SCHEMA.to_string()),
            ("config".to_string(), to_json(&self.config, path)?),
            ("state".to_string(), to_json(&self.state, path)?),
        ]);
        tensorio::save(path, &tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = tensorio::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::checkpoint(path, format!("missing metadata key {k:?}")))
        };
        let schema: u32 = field("schema")?
            .parse()
            .map_err(|_| Error::checkpoint(path, "schema is not an integer"))?;
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::checkpoint(
                path,
                format!("schema version {schema}, this build reads {CHECKPOINT_SCHEMA}"),
            ));
        }
        let config: ExperimentConfig = serde_json::from_str(field("config")?)
            .map_err(|e| Error::checkpoint(path, format!("config: {e}")))?;
        config.validate()?;
        let state: TrainState = serde_json::from_str(field("state")?)
            .map_err(|e| Error::checkpoint(path, format!("state: {e}")))?;
        let mut params = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (k, t) in tensors {
            let (prefix, name) = k
                .split_once('/')
                .ok_or_else(|| Error::checkpoint(path, format!("unexpected tensor {k}")))?;
            let map = match prefix {
                "param" => &mut params,
                "adam_m" => &mut adam_m,
                "adam_v" => &mut adam_v,
                _ => return Err(Error::checkpoint(path, format!("unexpected tensor {k}"))),
            };
            map.insert(name.to_string(), t);
        }
        Ok(Self {
            config,
            params,
            adam_m,
            adam_v,
            state,
        })
    }
}

fn to_json<T: Serialize>(v: &T, path: &Path) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::checkpoint(path, e.to_string()))
}
