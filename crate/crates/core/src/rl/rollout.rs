use rand::Rng;

use crate::error::{check_dims, Result};
use crate::flow::VelocityField;
use crate::rewards::Reward;
use crate::rl::sde::{gaussian_log_prob, step_from_velocity};
use crate::rl::{GrpoConfig, NoiseSource};
use crate::search::{one_shot_search, random_update_search, smart_grpo_search, PerturbationContext};
use crate::vector::Vector;

/// Everything needed to replay one sampler step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_before: f64,
    pub t_after: f64,
    pub dt: f64,
    pub sigma_t: f64,
    pub state_before: Vector,
    pub state_after: Vector,
    pub noise_used: Vector,
    /// Log-probability of `state_after` under the rollout (behavior) weights,
    /// with the standard-normal noise policy.
    pub log_prob_behavior: Option<f64>,
    pub log_prob_reference: f64,
    pub smart_selected: bool,
    pub deterministic: bool,
    /// Whether the step enters the loss (timestep subsampling).
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_sample: Vector,
    pub reward: f64,
}

/// `G` trajectories from one shared initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub x1: Vector,
    pub trajectories: Vec<Trajectory>,
    /// Trajectories whose raw reward was non-finite (replaced by group min - 1).
    pub non_finite_rewards: usize,
    pub search_invocations: usize,
    /// Sum over search invocations of the final mean sigma.
    pub search_sigma_sum: f64,
}

impl TrajectoryGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    /// Marks each step as included with probability `fraction`.
    pub fn sample_step_mask<R: Rng + ?Sized>(&mut self, fraction: f64, rng: &mut R) {
        for traj in &mut self.trajectories {
            for step in &mut traj.steps {
                step.included = fraction >= 1.0 || rng.random::<f64>() < fraction;
            }
        }
    }
}

/// Samples `G` stochastic trajectories from one `x1 ~ N(0, I)`.
///
/// `policy` generates the rollout; `reference` is only used for the stored
/// reference log-probabilities.
pub fn rollout_group<R: Reward + ?Sized, G: Rng + ?Sized>(
    policy: &VelocityField,
    reference: &VelocityField,
    reward: &R,
    cfg: &GrpoConfig,
    source: &NoiseSource,
    rng: &mut G,
) -> Result<TrajectoryGroup> {
    cfg.validate()?;
    source.validate()?;
    check_dims(policy.dim(), reference.dim())?;
    let d = policy.dim();
    let x1 = Vector::standard_normal(d, rng);
    let steps = cfg.train_steps;
    let dt = -1.0 / steps as f64;

    let mut trajectories = Vec::with_capacity(cfg.group_size);
    let mut search_invocations = 0;
    let mut search_sigma_sum = 0.0;
    let mut raw_rewards = Vec::with_capacity(cfg.group_size);

    for _ in 0..cfg.group_size {
        let mut x = x1.clone();
        let mut records = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = (steps - k) as f64 / steps as f64;
            let t_after = (steps - k - 1) as f64 / steps as f64;
            let sigma_t = cfg.sigma_at(t);
            let v = policy.eval_unchecked(x.as_slice(), t);
            let use_search = !matches!(source, NoiseSource::Gaussian) && t <= cfg.smart_t_threshold;
            let noise = if use_search {
                let drift: Vec<f64> = x.as_slice().iter().zip(&v).map(|(xi, vi)| xi + vi * dt).collect();
                let ctx = PerturbationContext::new(Vector::from(drift), t, dt, sigma_t)?;
                search_invocations += 1;
                match source {
                    NoiseSource::Search(c) => {
                        let (m, trace) = smart_grpo_search(&ctx, policy, reward, c, rng)?;
                        search_sigma_sum += trace.final_sigma_mean().unwrap_or(0.0);
                        m
                    }
                    NoiseSource::RandomUpdate(c) => {
                        let (m, trace) = random_update_search(&ctx, policy, reward, c, rng)?;
                        search_sigma_sum += trace.final_sigma_mean().unwrap_or(0.0);
                        m
                    }
                    NoiseSource::OneShot { candidates, keep } => {
                        one_shot_search(&ctx, policy, reward, *candidates, *keep, rng)?
                    }
                    NoiseSource::Gaussian => unreachable!("gaussian source never searches"),
                }
            } else {
                Vector::standard_normal(d, rng)
            };
            let step = step_from_velocity(x.as_slice(), &v, dt, sigma_t, noise.as_slice())?;
            let v_ref = reference.eval_unchecked(x.as_slice(), t);
            let ref_mean: Vec<f64> = x.as_slice().iter().zip(&v_ref).map(|(xi, vi)| xi + vi * dt).collect();
            let std = (-dt).sqrt() * sigma_t;
            let log_prob_reference =
                if step.deterministic { 0.0 } else { gaussian_log_prob(step.next.as_slice(), &ref_mean, std) };
            records.push(StepRecord {
                t_before: t,
                t_after,
                dt,
                sigma_t,
                state_before: x.clone(),
                state_after: step.next.clone(),
                noise_used: noise,
                log_prob_behavior: Some(step.log_prob),
                log_prob_reference,
                smart_selected: use_search,
                deterministic: step.deterministic,
                included: true,
            });
            x = step.next;
        }
        raw_rewards.push(reward.evaluate(x.as_slice()));
        trajectories.push(Trajectory { steps: records, final_sample: x, reward: 0.0 });
    }

    let finite_min = raw_rewards.iter().cloned().filter(|r| r.is_finite()).fold(f64::INFINITY, f64::min);
    let fallback = if finite_min.is_finite() { finite_min - 1.0 } else { -1.0 };
    let mut non_finite_rewards = 0;
    for (traj, r) in trajectories.iter_mut().zip(raw_rewards) {
        traj.reward = if r.is_finite() {
            r
        } else {
            non_finite_rewards += 1;
            fallback
        };
    }

    Ok(TrajectoryGroup { x1, trajectories, non_finite_rewards, search_invocations, search_sigma_sum })
}
