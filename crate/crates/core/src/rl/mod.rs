//! GRPO fine-tuning of a velocity field over stochastic rollouts.
//!
//! A rollout integrates the flow from noise to data with Euler–Maruyama:
//! `x' = x + v(x, t) dt + sqrt(-dt) sigma_t m`. The noise `m` is either a
//! standard-normal draw (the Flow-GRPO baseline) or the output of a noise
//! search on the latest timesteps. The policy log-probability of a step is the
//! Gaussian density of `x'` around the drift, always evaluated under the
//! standard-normal noise policy, including for searched noise.

mod loss;
mod rollout;
mod sde;
mod train;

pub use loss::{clipped_surrogate, group_advantages, grpo_loss, grpo_loss_batch, LossOutput};
pub use rollout::{rollout_group, StepRecord, Trajectory, TrajectoryGroup};
pub use sde::{gaussian_log_prob, sde_step, SdeStep};
pub use train::{evaluate_policy, train, CountingReward, TrainOutcome};

use crate::error::{check_dims, Error, Result};
use crate::search::CemConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Trajectories per group (`G`).
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    /// Sampler steps during training rollouts.
    pub train_steps: usize,
    /// Sampler steps for evaluation.
    pub eval_steps: usize,
    /// Probability that a logged step enters the loss.
    pub timestep_fraction: f64,
    /// Noise search runs only on steps with `t <= smart_t_threshold`.
    pub smart_t_threshold: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `sigma_t = noise_level * t`.
    pub noise_level: f64,
    /// Rollout groups per epoch.
    pub groups_per_epoch: usize,
    /// Optimizer steps per epoch; the epoch's groups are split evenly between them.
    pub updates_per_epoch: usize,
    pub eval_interval: usize,
    /// Size of the fixed evaluation noise set.
    pub eval_samples: usize,
    /// Divergence guard: abort when the train mean reward stays below
    /// `initial - divergence_margin` for `divergence_patience` epochs.
    pub divergence_margin: f64,
    pub divergence_patience: usize,
    /// Record wall-clock time per epoch. Off by default: timings make metrics
    /// files non-reproducible.
    pub record_wall_time: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 1e-3,
            train_steps: 10,
            eval_steps: 40,
            timestep_fraction: 0.99,
            smart_t_threshold: 0.6,
            ema_decay: 0.999,
            epochs: 100,
            seed: 0,
            noise_level: 0.7,
            groups_per_epoch: 8,
            updates_per_epoch: 2,
            eval_interval: 10,
            eval_samples: 256,
            divergence_margin: 10.0,
            divergence_patience: 10,
            record_wall_time: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.group_size < 2 {
            return fail(format!("group size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0) {
            return fail(format!("clip_eps must be positive, got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0) {
            return fail(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.train_steps == 0 || self.eval_steps == 0 {
            return fail("train_steps and eval_steps must be positive".into());
        }
        if !(self.timestep_fraction > 0.0 && self.timestep_fraction <= 1.0) {
            return fail(format!("timestep_fraction must be in (0, 1], got {}", self.timestep_fraction));
        }
        if !(0.0..=1.0).contains(&self.smart_t_threshold) {
            return fail(format!("smart_t_threshold must be in [0, 1], got {}", self.smart_t_threshold));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.noise_level >= 0.0) {
            return fail(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if self.groups_per_epoch == 0 || self.updates_per_epoch == 0 {
            return fail("groups_per_epoch and updates_per_epoch must be positive".into());
        }
        if self.updates_per_epoch > self.groups_per_epoch {
            return fail("updates_per_epoch cannot exceed groups_per_epoch".into());
        }
        if self.eval_interval == 0 || self.eval_samples == 0 {
            return fail("eval_interval and eval_samples must be positive".into());
        }
        Ok(())
    }

    /// Noise scale at time `t`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        self.noise_level * t
    }
}

/// How the per-step noise of a training rollout is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Fresh standard-normal noise on every step.
    Gaussian,
    /// Reward-guided search on late steps.
    Search(CemConfig),
    /// Single-round select-and-average of `candidates` draws, keeping `keep`.
    OneShot { candidates: usize, keep: usize },
    /// Search loop with uniformly random elites.
    RandomUpdate(CemConfig),
}

impl NoiseSource {
    /// Reward evaluations per search invocation (0 for [`NoiseSource::Gaussian`]).
    pub fn evaluations_per_search(&self) -> usize {
        match self {
            NoiseSource::Gaussian => 0,
            NoiseSource::Search(cfg) | NoiseSource::RandomUpdate(cfg) => cfg.evaluations_per_search(),
            NoiseSource::OneShot { candidates, .. } => *candidates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSource::Gaussian => Ok(()),
            NoiseSource::Search(cfg) | NoiseSource::RandomUpdate(cfg) => cfg.validate(),
            NoiseSource::OneShot { candidates, keep } => {
                if *keep == 0 || keep > candidates {
                    return Err(Error::InvalidArgument(format!(
                        "one-shot search needs 1 <= keep <= candidates, got keep={keep}, candidates={candidates}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `decay * ema + (1 - decay) * current`.
pub fn ema_update(ema: &[f64], current: &[f64], decay: f64) -> Result<Vec<f64>> {
    check_dims(ema.len(), current.len())?;
    Ok(ema.iter().zip(current).map(|(e, c)| decay * e + (1.0 - decay) * c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_cases() {
        let ema = [0.5, -1.0];
        let cur = [2.0, 4.0];
        assert_eq!(ema_update(&ema, &cur, 0.0).unwrap(), cur.to_vec());
        assert_eq!(ema_update(&ema, &cur, 1.0).unwrap(), ema.to_vec());
        let out = ema_update(&[0.0], &[1.0], 0.999).unwrap();
        assert!((out[0] - 0.001).abs() < 1e-15);
        assert!(ema_update(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { clip_eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { ema_decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { updates_per_epoch: 9, ..Default::default() }.validate().is_err());
        assert!(NoiseSource::OneShot { candidates: 25, keep: 12 }.validate().is_ok());
        assert!(NoiseSource::OneShot { candidates: 5, keep: 6 }.validate().is_err());
    }
}
