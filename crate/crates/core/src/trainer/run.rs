use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ConvergenceState, TrainState};
use super::metrics::{self, MetricWindow, MetricsRow};
use super::{elbo_step, Adam, ElboBreakdown, StepNoise};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nets::CompVae;
use crate::synthgen::BatchStream;

/// Random streams derived from the experiment seed: parameter init uses
/// stream 0 of the seed, batches stream 1, per-step noise stream 2.
fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Converged,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub stop: StopReason,
    pub restores: usize,
    pub last: Option<MetricsRow>,
}

/// Owns the model, optimizer, data stream and noise stream of one run.
pub struct Trainer {
    config: ExperimentConfig,
    model: CompVae,
    adam: Adam,
    stream: BatchStream,
    state: TrainState,
    out_dir: Option<PathBuf>,
    rows: Vec<MetricsRow>,
    last_good: Checkpoint,
    started: Instant,
}

impl Trainer {
    /// Fresh run. With an output directory, the metrics log is (re)created as
    /// `metrics.tsv` and checkpoints land in `checkpoints/`.
    pub fn new(config: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let model = CompVae::new(config.model.clone(), config.seed)?;
        let t = &config.train;
        let adam = Adam::new(model.params(), t.adam_beta1, t.adam_beta2, t.adam_eps)?;
        let mut stream = BatchStream::new(config.effective_data(), t.curriculum_k(0))?;
        stream.set_rng(seeded_stream(config.seed, 1));
        let state = TrainState {
            iteration: 0,
            lr_scale: 1.0,
            consecutive_restores: 0,
            total_restores: 0,
            adam_steps: 0,
            data_rng: stream.rng().clone(),
            noise_rng: seeded_stream(config.seed, 2),
            window: MetricWindow::default(),
            convergence: ConvergenceState::default(),
            converged: false,
            elapsed_s: 0.0,
        };
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            std::fs::write(&path, format!("{}\n", metrics::METRICS_HEADER))
                .map_err(|e| Error::io(&path, e))?;
            let cfg_path = dir.join("config.toml");
            std::fs::write(&cfg_path, config.to_toml_string()?)
                .map_err(|e| Error::io(&cfg_path, e))?;
        }
        let mut trainer = Self {
            last_good: Checkpoint {
                config: config.clone(),
                params: BTreeMap::new(),
                adam_m: BTreeMap::new(),
                adam_v: BTreeMap::new(),
                state: state.clone(),
            },
            config,
            model,
            adam,
            stream,
            state,
            out_dir,
            rows: Vec::new(),
            started: Instant::now(),
        };
        trainer.last_good = trainer.snapshot()?;
        Ok(trainer)
    }

    /// Continues a run from a checkpoint. `max_iterations` overrides the
    /// stored iteration cap. Metrics rows past the checkpoint are dropped from
    /// an existing log so numbering stays contiguous.
    pub fn resume(
        checkpoint: &Path,
        out_dir: Option<PathBuf>,
        max_iterations: Option<usize>,
    ) -> Result<Self> {
        let mut ck = Checkpoint::load(checkpoint)?;
        if let Some(m) = max_iterations {
            ck.config.train.max_iterations = m;
            ck.config.train.validate()?;
        }
        let model = ck.build_model()?;
        let t = &ck.config.train;
        let mut adam = Adam::new(model.params(), t.adam_beta1, t.adam_beta2, t.adam_eps)?;
        adam.restore(ck.state.adam_steps, ck.adam_m.clone(), ck.adam_v.clone())?;
        let mut stream = BatchStream::new(
            ck.config.effective_data(),
            t.curriculum_k(ck.state.iteration),
        )?;
        stream.set_rng(ck.state.data_rng.clone());
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            metrics::truncate_after(&dir.join("metrics.tsv"), ck.state.iteration)?;
        }
        Ok(Self {
            config: ck.config.clone(),
            model,
            adam,
            stream,
            state: ck.state.clone(),
            out_dir,
            rows: Vec::new(),
            last_good: ck,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &CompVae {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn learning_rate(&self) -> f64 {
        self.config
            .train
            .learning_rate(self.state.iteration, self.state.lr_scale)
    }

    /// Metrics rows logged by this process.
    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    fn elapsed(&self) -> f64 {
        self.state.elapsed_s + self.started.elapsed().as_secs_f64()
    }

    fn snapshot(&mut self) -> Result<Checkpoint> {
        self.state.data_rng = self.stream.rng().clone();
        self.state.adam_steps = self.adam.steps();
        let mut state = self.state.clone();
        state.elapsed_s = self.elapsed();
        let copy = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, t)| Ok((k.clone(), t.copy()?))).collect()
        };
        Ok(Checkpoint {
            config: self.config.clone(),
            params: self.model.params().snapshot()?,
            adam_m: copy(self.adam.first_moments())?,
            adam_v: copy(self.adam.second_moments())?,
            state,
        })
    }

    fn checkpoint_path(&self, iteration: usize) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| {
            d.join("checkpoints")
                .join(format!("ckpt_{iteration:08}.safetensors"))
        })
    }

    /// Records a checkpoint in memory and, with an output directory, on disk
    /// (numbered file plus `checkpoints/latest.safetensors`).
    pub fn checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let ck = self.snapshot()?;
        let path = self.checkpoint_path(ck.state.iteration);
        if let (Some(path), Some(dir)) = (&path, &self.out_dir) {
            ck.save(path)?;
            let latest = dir.join("checkpoints").join("latest.safetensors");
            std::fs::copy(path, &latest).map_err(|e| Error::io(&latest, e))?;
        }
        self.last_good = ck;
        Ok(path)
    }

    /// Writes the current state to an explicit path.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let ck = self.snapshot()?;
        ck.save(path)
    }

    /// Rolls back to the last checkpoint and lowers the learning rate.
    fn recover(&mut self) -> Result<()> {
        let restores = self.state.consecutive_restores + 1;
        let total = self.state.total_restores + 1;
        let scale = self.state.lr_scale * self.config.train.anneal_factor;
        if restores > self.config.train.max_restores {
            return Err(Error::Diverged(restores - 1));
        }
        let elapsed = self.elapsed();
        let ck = self.last_good.clone();
        self.model.params().load(&ck.params)?;
        self.adam
            .restore(ck.state.adam_steps, ck.adam_m.clone(), ck.adam_v.clone())?;
        self.state = ck.state.clone();
        self.state.consecutive_restores = restores;
        self.state.total_restores = total;
        self.state.lr_scale = scale;
        self.state.elapsed_s = elapsed;
        self.started = Instant::now();
        self.stream.set_rng(ck.state.data_rng.clone());
        self.rows.retain(|r| r.iteration <= ck.state.iteration);
        if let Some(dir) = &self.out_dir {
            metrics::truncate_after(&dir.join("metrics.tsv"), ck.state.iteration)?;
        }
        Ok(())
    }

    /// One optimization step. Returns the breakdown, or `None` when the loss
    /// was non-finite and the run rolled back.
    pub fn step(&mut self) -> Result<Option<ElboBreakdown>> {
        let t = self.state.iteration;
        let tc = &self.config.train;
        let k_max = tc.curriculum_k(t);
        let lr = tc.learning_rate(t, self.state.lr_scale);
        self.stream.set_curriculum_k(k_max)?;
        let batch = self.stream.next_batch()?;
        let x = self.model.x_tensor(&batch.data, batch.batch_size())?;
        let labels = self.model.label_tensors(&batch.labels)?;
        let noise = StepNoise::sample(
            &mut self.state.noise_rng,
            &self.model,
            batch.batch_size(),
            batch.parts(),
        )?;
        let (breakdown, grads) = match elbo_step(&self.model, &x, &labels, &noise) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                self.recover()?;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        self.adam.step(self.model.params(), &grads, lr)?;
        self.state.iteration += 1;
        let it = self.state.iteration;
        self.state.window.push(&breakdown);

        let tc = &self.config.train;
        if it % tc.metrics_every == 0 {
            if let Some(avg) = self.state.window.take() {
                let row = MetricsRow {
                    iteration: it,
                    k_max,
                    learning_rate: lr,
                    l_w: avg.l_w,
                    l_z: avg.l_z,
                    l_x: avg.l_x,
                    elbo: avg.total,
                    wall_time_s: self.elapsed(),
                };
                if let Some(dir) = &self.out_dir {
                    metrics::append(&dir.join("metrics.tsv"), &row)?;
                }
                self.rows.push(row);
            }
        }
        if tc.convergence_window > 0 {
            let c = &mut self.state.convergence;
            c.block_len += 1;
            c.block_sum += breakdown.total;
            if c.block_len == tc.convergence_window {
                let mean = c.block_sum / c.block_len as f64;
                if let Some(prev) = c.prev_mean {
                    if prev - mean < tc.convergence_tol_bits {
                        self.state.converged = true;
                    }
                }
                c.prev_mean = Some(mean);
                c.block_len = 0;
                c.block_sum = 0.0;
            }
        }
        if it % tc.checkpoint_every == 0 {
            self.state.consecutive_restores = 0;
            self.checkpoint()?;
        }
        Ok(Some(breakdown))
    }

    /// Runs until `max_iterations` or convergence, then writes a final
    /// checkpoint.
    pub fn run(&mut self) -> Result<TrainSummary> {
        while self.state.iteration < self.config.train.max_iterations && !self.state.converged {
            self.step()?;
        }
        if self.last_good.state.iteration != self.state.iteration || self.out_dir.is_some() {
            self.checkpoint()?;
        }
        Ok(TrainSummary {
            iterations: self.state.iteration,
            stop: if self.state.converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            },
            restores: self.state.total_restores,
            last: self.rows.last().copied(),
        })
    }

    /// Path of the most recent on-disk checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        self.out_dir
            .as_ref()
            .map(|d| d.join("checkpoints").join("latest.safetensors"))
            .filter(|p| p.exists())
    }
}
