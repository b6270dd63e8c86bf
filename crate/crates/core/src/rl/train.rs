use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Divergence, Error, Result};
use crate::flow::optim::Adam;
use crate::flow::{euler_sample, Mlp, VelocityField};
use crate::metrics::{MetricsRow, MetricsSink, Phase};
use crate::rewards::Reward;
use crate::rl::loss::{group_advantages, grpo_loss_batch};
use crate::rl::rollout::{rollout_group, TrajectoryGroup};
use crate::rl::{ema_update, GrpoConfig, NoiseSource};
use crate::rng;
use crate::vector::Vector;

/// Counts calls to the wrapped reward.
pub struct CountingReward<'a, R: Reward + ?Sized> {
    inner: &'a R,
    calls: AtomicU64,
}

impl<'a, R: Reward + ?Sized> CountingReward<'a, R> {
    pub fn new(inner: &'a R) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<R: Reward + ?Sized> Reward for CountingReward<'_, R> {
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(x)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }

    fn upper_bound(&self) -> Option<f64> {
        self.inner.upper_bound()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Raw fine-tuned weights.
    pub policy: Mlp,
    /// EMA weights (used for evaluation).
    pub ema: Mlp,
    pub rows: Vec<MetricsRow>,
    /// Reward calls made by training rollouts, searches included.
    pub train_reward_calls: u64,
    pub search_invocations: u64,
    /// Rollout groups sampled over the run.
    pub groups: u64,
    pub non_finite_rewards: u64,
}

/// Mean and population std of the reward of deterministic `eval_steps`
/// samples from a fixed noise set (derived from `seed`).
pub fn evaluate_policy<R: Reward + ?Sized>(
    field: &VelocityField,
    reward: &R,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut r = rng::stream(seed, "eval-noise", &[]);
    let noise: Vec<Vector> = (0..cfg.eval_samples).map(|_| Vector::standard_normal(field.dim(), &mut r)).collect();
    let rewards = noise
        .par_iter()
        .map(|x1| euler_sample(field, x1, cfg.eval_steps).map(|x0| reward.evaluate(x0.as_slice())))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_std(&rewards))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// GRPO fine-tuning starting from `pretrained`, which also serves as the frozen
/// KL reference.
///
/// Each epoch samples `groups_per_epoch` groups with the current weights,
/// splits them into `updates_per_epoch` consecutive chunks and takes one Adam
/// step per chunk (later chunks are slightly off-policy, which the ratio
/// clipping accounts for). EMA weights are updated after every step and are
/// what evaluation uses. Evaluation runs before training (epoch 0), every
/// `eval_interval` epochs and after the last epoch.
pub fn train<R: Reward + ?Sized>(
    pretrained: &Mlp,
    reward: &R,
    cfg: &GrpoConfig,
    source: &NoiseSource,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    source.validate()?;
    let reference = VelocityField::Mlp(pretrained.clone());
    let mut policy = pretrained.clone();
    let mut ema = pretrained.weights().to_vec();
    let mut weights = pretrained.weights().to_vec();
    let mut opt = Adam::new(weights.len(), cfg.lr);
    let counting = CountingReward::new(reward);
    let mut rows = Vec::new();
    let mut search_invocations = 0u64;
    let mut groups_total = 0u64;
    let mut non_finite_total = 0u64;

    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            policy: pretrained.clone(),
            ema: pretrained.clone(),
            rows,
            train_reward_calls: 0,
            search_invocations: 0,
            groups: 0,
            non_finite_rewards: 0,
        });
    }

    let eval_row = |epoch: usize, ema: &[f64], started: Instant| -> Result<MetricsRow> {
        let field = VelocityField::Mlp(pretrained.with_weights(ema)?);
        let (mean, std) = evaluate_policy(&field, reward, cfg, cfg.seed)?;
        Ok(MetricsRow {
            epoch,
            phase: Phase::Eval,
            mean_reward: mean,
            std_reward: std,
            loss: 0.0,
            kl: 0.0,
            mean_sigma_trace: 0.0,
            smart_invocations: 0,
            wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
        })
    };

    let row = eval_row(0, &ema, Instant::now())?;
    sink.record(&row)?;
    rows.push(row);

    let mut initial_reward = None;
    let mut below = 0usize;
    let chunk = cfg.groups_per_epoch.div_ceil(cfg.updates_per_epoch);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let behavior = VelocityField::Mlp(policy.clone());
        let mut groups = (0..cfg.groups_per_epoch)
            .into_par_iter()
            .map(|g| {
                let mut r = rng::stream(cfg.seed, "rollout", &[epoch as u64, g as u64]);
                rollout_group(&behavior, &reference, &counting, cfg, source, &mut r)
            })
            .collect::<Result<Vec<TrajectoryGroup>>>()?;
        for (g, group) in groups.iter_mut().enumerate() {
            group.sample_step_mask(
                cfg.timestep_fraction,
                &mut rng::stream(cfg.seed, "step-mask", &[epoch as u64, g as u64]),
            );
        }
        let advantages = groups.iter().map(|g| group_advantages(&g.rewards())).collect::<Result<Vec<_>>>()?;

        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut updates = 0usize;
        let pairs: Vec<(&TrajectoryGroup, &[f64])> =
            groups.iter().zip(&advantages).map(|(g, a)| (g, a.as_slice())).collect();
        for batch in pairs.chunks(chunk) {
            let current = VelocityField::Mlp(policy.clone());
            let out = grpo_loss_batch(batch, &current, &reference, cfg)?;
            opt.step(&mut weights, &out.grad);
            policy.set_weights(&weights)?;
            ema = ema_update(&ema, &weights, cfg.ema_decay)?;
            loss_sum += out.loss;
            kl_sum += out.kl;
            updates += 1;
        }

        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
        let (mean_reward, std_reward) = mean_std(&rewards);
        let invocations: usize = groups.iter().map(|g| g.search_invocations).sum();
        let sigma_sum: f64 = groups.iter().map(|g| g.search_sigma_sum).sum();
        search_invocations += invocations as u64;
        groups_total += groups.len() as u64;
        non_finite_total += groups.iter().map(|g| g.non_finite_rewards as u64).sum::<u64>();

        let row = MetricsRow {
            epoch,
            phase: Phase::Train,
            mean_reward,
            std_reward,
            loss: loss_sum / updates as f64,
            kl: kl_sum / updates as f64,
            mean_sigma_trace: if invocations > 0 { sigma_sum / invocations as f64 } else { 0.0 },
            smart_invocations: invocations as u64,
            wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
        };
        sink.record(&row)?;
        rows.push(row);

        let initial = *initial_reward.get_or_insert(mean_reward);
        if mean_reward < initial - cfg.divergence_margin {
            below += 1;
            if below >= cfg.divergence_patience {
                return Err(Error::Diverged(Divergence {
                    epoch,
                    initial_reward: initial,
                    current_reward: mean_reward,
                    margin: cfg.divergence_margin,
                    consecutive: below,
                }));
            }
        } else {
            below = 0;
        }

        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let row = eval_row(epoch, &ema, started)?;
            sink.record(&row)?;
            rows.push(row);
        }
    }

    Ok(TrainOutcome {
        policy,
        ema: pretrained.with_weights(&ema)?,
        rows,
        train_reward_calls: counting.calls(),
        search_invocations,
        groups: groups_total,
        non_finite_rewards: non_finite_total,
    })
}
