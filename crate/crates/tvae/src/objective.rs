//! ELBO assembly: reconstruction NLL, closed-form Gaussian KL against a
//! standard normal prior, per-dimension KL thresholding (free bits), and the
//! KL weight schedules.
//!
//! The training loss is `recon_nll + beta * sum_i max(lambda, kl_i)` where
//! `kl_i` is the batch-mean KL of latent dimension `i`. Dimensions at or
//! below the floor contribute the constant `lambda` with zero gradient.

use crate::diffcore::{Element, Tensor};
use crate::model::LatentState;

/// KL weight schedule over training steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// beta = 0 everywhere (encoder warm-up).
    Zero,
    /// Fixed beta.
    Constant { beta: f64 },
    /// beta = min(1, step / (steps_per_epoch * total_epochs)).
    Linear { total_epochs: u32 },
    /// `cycles` cycles over `total_epochs`; within each cycle beta ramps
    /// 0 -> 1 linearly during the first `ramp_fraction`, then holds 1.
    Cyclical { cycles: u32, ramp_fraction: f64, total_epochs: u32 },
}

impl Schedule {
    pub fn validate(&self) -> crate::Result<()> {
        match *self {
            Schedule::Constant { beta } if !(0.0..=1.0).contains(&beta) => Err(
                crate::Error::Config(format!("constant schedule beta {beta} outside [0, 1]")),
            ),
            Schedule::Linear { total_epochs: 0 } => {
                Err(crate::Error::Config("linear schedule needs total_epochs >= 1".into()))
            }
            Schedule::Cyclical { cycles, ramp_fraction, total_epochs } => {
                if cycles == 0 || total_epochs == 0 {
                    return Err(crate::Error::Config(
                        "cyclical schedule needs cycles >= 1 and total_epochs >= 1".into(),
                    ));
                }
                if !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
                    return Err(crate::Error::Config(format!(
                        "cyclical ramp_fraction {ramp_fraction} outside (0, 1]"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Loss configuration: schedule plus the free-bits floor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub schedule: Schedule,
    /// Per-dimension KL floor lambda (0 disables thresholding).
    pub kl_threshold: f64,
}

impl LossConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.kl_threshold < 0.0 {
            return Err(crate::Error::Config(format!(
                "kl_threshold {} must be >= 0",
                self.kl_threshold
            )));
        }
        self.schedule.validate()
    }
}

/// Everything one optimization step needs to know about its loss.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Token-summed reconstruction NLL over the batch.
    pub recon_nll: f64,
    /// Batch-mean KL per latent dimension.
    pub kl_per_dim: Vec<f64>,
    /// Sum of `kl_per_dim`.
    pub kl_raw: f64,
    /// Sum of `max(lambda, kl_i)`.
    pub kl_thresholded: f64,
    /// KL weight applied this step.
    pub beta: f64,
    /// `recon_nll + beta * kl_thresholded`.
    pub total: f64,
    /// Number of target tokens contributing to `recon_nll`.
    pub token_count: usize,
}

/// Closed-form KL(q || N(0, I)) per latent dimension, averaged over the
/// batch: `0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)`. Shape `[D_z]`.
pub fn gaussian_kl<E: Element>(mu: &Tensor<E>, log_sigma: &Tensor<E>) -> Tensor<E> {
    assert_eq!(mu.shape(), log_sigma.shape(), "mu/log_sigma shape mismatch");
    assert_eq!(mu.shape().len(), 2, "expected [batch, D_z], got {:?}", mu.shape());
    let two = E::from_f64(2.0);
    let sigma_sq = log_sigma.mul_scalar(two).exp();
    let per_elem = mu
        .mul(mu)
        .add(&sigma_sq)
        .add_scalar(-E::ONE)
        .sub(&log_sigma.mul_scalar(two))
        .mul_scalar(E::from_f64(0.5));
    per_elem.mean_axis(0)
}

/// Free-bits floor: `sum_i max(lambda, kl_i)`. Gradient is zero for
/// dimensions at or below the floor.
pub fn threshold_kl<E: Element>(kl_per_dim: &Tensor<E>, lambda: f64) -> Tensor<E> {
    assert!(lambda >= 0.0, "kl threshold {lambda} must be >= 0");
    kl_per_dim.clamp_min(E::from_f64(lambda)).sum_all()
}

/// Token-summed cross entropy over unmasked target positions.
pub fn reconstruction_nll<E: Element>(
    logits: &Tensor<E>,
    targets: &[u32],
    mask: &[bool],
) -> (Tensor<E>, usize) {
    logits.cross_entropy_logits(targets, mask)
}

/// KL weight at a global (phase-local) step.
///
/// Linear: `min(1, step / (steps_per_epoch * total_epochs))`.
/// Cyclical over `T = steps_per_epoch * total_epochs` steps split into
/// `cycles` cycles: within a cycle, ramp 0 -> 1 over the first
/// `ramp_fraction`, then hold 1.
pub fn kl_weight(schedule: Schedule, step: u64, steps_per_epoch: u64) -> f64 {
    assert!(steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
    match schedule {
        Schedule::Zero => 0.0,
        Schedule::Constant { beta } => beta,
        Schedule::Linear { total_epochs } => {
            let denom = steps_per_epoch as f64 * total_epochs as f64;
            (step as f64 / denom).min(1.0)
        }
        Schedule::Cyclical { cycles, ramp_fraction, total_epochs } => {
            let total = steps_per_epoch as f64 * total_epochs as f64;
            let cycle_len = total / cycles as f64;
            let pos = (step as f64) % cycle_len;
            let ramp_len = cycle_len * ramp_fraction;
            (pos / ramp_len).min(1.0)
        }
    }
}

/// Assemble the full training loss. Returns the scalar graph tensor (for
/// `backward`) together with the numeric breakdown.
pub fn elbo_loss<E: Element>(
    logits: &Tensor<E>,
    targets: &[u32],
    mask: &[bool],
    latent: &LatentState<E>,
    cfg: &LossConfig,
    beta: f64,
) -> (Tensor<E>, LossBreakdown) {
    let (recon, token_count) = reconstruction_nll(logits, targets, mask);
    let kl_per_dim = gaussian_kl(&latent.mu, &latent.log_sigma);
    let kl_thr = threshold_kl(&kl_per_dim, cfg.kl_threshold);
    let total = recon.add(&kl_thr.mul_scalar(E::from_f64(beta)));

    let kl_vec: Vec<f64> = kl_per_dim.data().iter().map(|v| v.to_f64()).collect();
    let breakdown = LossBreakdown {
        recon_nll: recon.item().to_f64(),
        kl_raw: kl_vec.iter().sum(),
        kl_per_dim: kl_vec,
        kl_thresholded: kl_thr.item().to_f64(),
        beta,
        total: total.item().to_f64(),
        token_count,
    };
    (total, breakdown)
}
