//! Training: the three ELBO terms, Adam with step annealing, the part-count
//! curriculum, divergence recovery, checkpoints and metrics.
//!
//! One iteration draws a batch with `K ~ U[1, K(t)]` parts, samples
//! `z ~ q(z | x)`, then `{w_i} ~ q({w_i} | x, z, {l_i})`, and minimizes
//!
//! * `L_w = KL(q({w_i} | ...) || prod_i p(w_i | l_i))`, in closed form;
//! * `L_z = log q(z | x) - log p(z | w~)` at the sampled `z, w~`;
//! * `L_x = -log p(x | z, w~)`,
//!
//! each averaged over the batch. Reported values are in bits.

mod adam;
mod checkpoint;
mod metrics;
mod run;

use std::f64::consts::LN_2;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentcorr::{kl_corr_vs_diag_batched, sample_correlated};
use crate::nets::{CompVae, LabelTensors};
use crate::noise::standard_normal;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA};
pub use metrics::{read_metrics, MetricsRow, METRICS_HEADER};
pub use run::{StopReason, TrainSummary, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Halve (by `anneal_factor`) the learning rate every this many iterations.
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub alpha_min: f64,
    pub curriculum_start_k: usize,
    pub curriculum_step_every: usize,
    pub curriculum_max_k: usize,
    pub max_iterations: usize,
    pub checkpoint_every: usize,
    pub metrics_every: usize,
    /// Early stop when the mean ELBO of consecutive blocks of this many
    /// iterations improves by less than `convergence_tol_bits`; 0 disables.
    pub convergence_window: usize,
    pub convergence_tol_bits: f64,
    /// Consecutive divergence recoveries tolerated before aborting.
    pub max_restores: usize,
}

impl TrainConfig {
    pub fn reference(curriculum_max_k: usize) -> Self {
        Self {
            batch_size: 256,
            adam_alpha: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            anneal_every: 20_000,
            anneal_factor: 0.5,
            alpha_min: 1e-6,
            curriculum_start_k: 2,
            curriculum_step_every: 3000,
            curriculum_max_k,
            max_iterations: 500_000,
            checkpoint_every: 5000,
            metrics_every: 100,
            convergence_window: 10_000,
            convergence_tol_bits: 0.1,
            max_restores: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("anneal_every", self.anneal_every),
            ("curriculum_start_k", self.curriculum_start_k),
            ("curriculum_step_every", self.curriculum_step_every),
            ("curriculum_max_k", self.curriculum_max_k),
            ("max_iterations", self.max_iterations),
            ("checkpoint_every", self.checkpoint_every),
            ("metrics_every", self.metrics_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be >= 1")));
            }
        }
        let positive = [
            ("adam_alpha", self.adam_alpha),
            ("adam_eps", self.adam_eps),
            ("alpha_min", self.alpha_min),
            ("anneal_factor", self.anneal_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if self.anneal_factor > 1.0 {
            return Err(Error::Config("train.anneal_factor must be <= 1".into()));
        }
        if self.curriculum_start_k > self.curriculum_max_k {
            return Err(Error::Config(
                "train.curriculum_start_k exceeds train.curriculum_max_k".into(),
            ));
        }
        if !(self.convergence_tol_bits >= 0.0) {
            return Err(Error::Config(
                "train.convergence_tol_bits must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `K(t) = min(start + floor(t / step_every), max)`.
    pub fn curriculum_k(&self, t: usize) -> usize {
        (self.curriculum_start_k + t / self.curriculum_step_every).min(self.curriculum_max_k)
    }

    /// `max(alpha * factor^floor(t / anneal_every) * scale, alpha_min)`, where
    /// `scale` accumulates divergence-recovery reductions.
    pub fn learning_rate(&self, t: usize, scale: f64) -> f64 {
        let steps = (t / self.anneal_every).min(i32::MAX as usize) as i32;
        (self.adam_alpha * self.anneal_factor.powi(steps) * scale).max(self.alpha_min)
    }
}

/// Per-iteration ELBO terms in bits, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub l_w: f64,
    pub l_z: f64,
    pub l_x: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn from_bits(l_w: f64, l_z: f64, l_x: f64) -> Self {
        Self {
            l_w,
            l_z,
            l_x,
            total: l_w + l_z + l_x,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_w.is_finite() && self.l_z.is_finite() && self.l_x.is_finite()
    }
}

/// The standard-normal draws of one iteration. Keeping them explicit makes a
/// step a deterministic function of (parameters, batch, noise).
#[derive(Clone, Debug)]
pub struct StepNoise {
    /// `(B, dim_z)`, reparametrizes `z ~ q(z | x)`.
    pub z: Tensor,
    /// `(B, K, label_dim)`, symmetry-breaking noise on the graph's node inputs.
    pub node: Tensor,
    /// `(B, K, dim_w)`, reparametrizes the correlated draw of `{w_i}`.
    pub w: Tensor,
}

impl StepNoise {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        model: &CompVae,
        b: usize,
        k: usize,
    ) -> Result<Self> {
        let cfg = model.config();
        let (dt, dev) = (model.dtype(), model.device());
        let z = standard_normal(rng, (b, cfg.dim_z), dt, dev)?;
        let node = standard_normal(rng, (b, k, cfg.label_dim()), dt, dev)?;
        let w = standard_normal(rng, (b, k, cfg.dim_w), dt, dev)?;
        Ok(Self { z, node, w })
    }

    /// Reorders the part axis of the per-part noise.
    pub fn permute_parts(&self, perm: &[u32]) -> Result<Self> {
        let idx = Tensor::new(perm, self.w.device())?;
        Ok(Self {
            z: self.z.clone(),
            node: self.node.index_select(&idx, 1)?,
            w: self.w.index_select(&idx, 1)?,
        })
    }
}

/// Differentiable ELBO terms in nats (scalar tensors, batch means).
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub l_w: Tensor,
    pub l_z: Tensor,
    pub l_x: Tensor,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl ElboTerms {
    pub fn breakdown(&self) -> Result<ElboBreakdown> {
        Ok(ElboBreakdown::from_bits(
            scalar(&self.l_w)? / LN_2,
            scalar(&self.l_z)? / LN_2,
            scalar(&self.l_x)? / LN_2,
        ))
    }
}

/// Forward pass of one training iteration.
pub fn elbo_terms(
    model: &CompVae,
    x: &Tensor,
    labels: &LabelTensors,
    noise: &StepNoise,
) -> Result<ElboTerms> {
    let b = x.dim(0)? as f64;
    let pre = model.preprocess(x)?;
    let qz = model.encode_z(&pre)?;
    let z = qz.sample(&noise.z)?;
    let family = model.encode_w(&pre, &z, labels, &noise.node)?;
    let w = sample_correlated(&family, &noise.w)?;
    let w_tilde = CompVae::aggregate(&w)?;

    let pw = model.prior_w(labels)?;
    let l_w = (kl_corr_vs_diag_batched(&family, &pw)?.sum_all()? / b)?;
    let pz = model.prior_z(&w_tilde)?;
    let l_z = ((qz.log_prob(&z)? - pz.log_prob(&z)?)?.sum_all()? / b)?;
    let px = model.decode(&z, &w_tilde)?;
    let l_x = (px.log_prob(x)?.sum_all()?.neg()? / b)?;
    let total = ((&l_w + &l_z)? + &l_x)?;
    Ok(ElboTerms {
        l_w,
        l_z,
        l_x,
        total,
    })
}

/// Forward pass plus gradients; fails with `NonFinite` on a non-finite loss.
pub fn elbo_step(
    model: &CompVae,
    x: &Tensor,
    labels: &LabelTensors,
    noise: &StepNoise,
) -> Result<(ElboBreakdown, candle_core::backprop::GradStore)> {
    let terms = elbo_terms(model, x, labels, noise)?;
    let breakdown = terms.breakdown()?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("ELBO ({breakdown:?})")));
    }
    let grads = terms.total.backward()?;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests;
