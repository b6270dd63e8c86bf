use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::rl::sde::gaussian_log_prob;
use crate::rl::{GrpoConfig, TrajectoryGroup};

/// `(R_i - mean) / (std_pop + 1e-8)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group-relative advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let first = rewards[0];
    if rewards.iter().all(|r| *r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mean = rewards.iter().sum::<f64>() / n;
    // second pass removes the rounding left in the first
    let mean = mean + rewards.iter().map(|r| r - mean).sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)` and whether the clipped branch won.
///
/// The objective can gain at most `(1 + eps) |A|` per step. When `A < 0` and
/// `r > 1 + eps` the unclipped, pessimistic branch is kept, so the magnitude
/// itself is not bounded there.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// `-mean(surrogate) + kl_beta * mean(KL)`.
    pub loss: f64,
    /// Gradient of `loss` with respect to the current MLP weights.
    pub grad: Vec<f64>,
    /// Mean per-step KL between current and reference step distributions.
    pub kl: f64,
    /// Mean clipped surrogate.
    pub surrogate: f64,
    /// Steps that entered the loss.
    pub steps: usize,
    /// Fraction of those steps where the clipped branch was active.
    pub clip_fraction: f64,
}

/// Clipped surrogate with a KL anchor for one group.
pub fn grpo_loss(
    group: &TrajectoryGroup,
    advantages: &[f64],
    current: &VelocityField,
    reference: &VelocityField,
    cfg: &GrpoConfig,
) -> Result<LossOutput> {
    grpo_loss_batch(&[(group, advantages)], current, reference, cfg)
}

/// [`grpo_loss`] averaged over every included step of several groups.
///
/// Steps are replayed from their records: the behavior log-probability is the
/// stored one, never recomputed by resampling.
pub fn grpo_loss_batch(
    batch: &[(&TrajectoryGroup, &[f64])],
    current: &VelocityField,
    reference: &VelocityField,
    cfg: &GrpoConfig,
) -> Result<LossOutput> {
    let mlp = current.as_mlp()?;
    let mut grad = vec![0.0; mlp.num_weights()];

    struct Term<'a> {
        x: &'a [f64],
        t: f64,
        upstream: Vec<f64>,
    }

    let mut n_steps = 0usize;
    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    // Upstream gradients are scaled by 1/n after counting, so collect first.
    let mut terms: Vec<Term> = Vec::new();

    for (group, advantages) in batch {
        if advantages.len() != group.trajectories.len() {
            return Err(Error::DimensionMismatch { expected: group.trajectories.len(), got: advantages.len() });
        }
        for (ti, (traj, &adv)) in group.trajectories.iter().zip(advantages.iter()).enumerate() {
            for (si, step) in traj.steps.iter().enumerate() {
                if !step.included || step.deterministic {
                    continue;
                }
                let behavior =
                    step.log_prob_behavior.ok_or(Error::MissingBehaviorLogProb { trajectory: ti, step: si })?;
                let x = step.state_before.as_slice();
                let (t, dt) = (step.t_before, step.dt);
                let std = (-dt).sqrt() * step.sigma_t;
                let var = std * std;

                let v_cur = mlp.velocity(x, t);
                let v_ref = reference.eval_unchecked(x, t);
                let mean_cur: Vec<f64> = x.iter().zip(&v_cur).map(|(xi, vi)| xi + vi * dt).collect();
                let mean_ref: Vec<f64> = x.iter().zip(&v_ref).map(|(xi, vi)| xi + vi * dt).collect();
                let next = step.state_after.as_slice();

                let log_prob = gaussian_log_prob(next, &mean_cur, std);
                let ratio = (log_prob - behavior).exp();
                let (surrogate, was_clipped) = clipped_surrogate(ratio, adv, cfg.clip_eps);
                let d_surr_d_logp = if was_clipped {
                    clipped += 1;
                    0.0
                } else {
                    ratio * adv
                };

                let kl: f64 = mean_cur.iter().zip(&mean_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * var);

                // d(-surrogate)/dv + beta dKL/dv, before the 1/n scaling
                let upstream: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let d_logp_d_mean = (next[i] - mean_cur[i]) / var;
                        let d_kl_d_mean = (mean_cur[i] - mean_ref[i]) / var;
                        (-d_surr_d_logp * d_logp_d_mean + cfg.kl_beta * d_kl_d_mean) * dt
                    })
                    .collect();

                n_steps += 1;
                surrogate_sum += surrogate;
                kl_sum += kl;
                terms.push(Term { x, t, upstream });
            }
        }
    }

    if n_steps == 0 {
        return Ok(LossOutput { loss: 0.0, grad, kl: 0.0, surrogate: 0.0, steps: 0, clip_fraction: 0.0 });
    }
    let inv_n = 1.0 / n_steps as f64;
    for term in &terms {
        let up: Vec<f64> = term.upstream.iter().map(|u| u * inv_n).collect();
        mlp.velocity_vjp(term.x, term.t, &up, &mut grad);
    }
    let surrogate = surrogate_sum * inv_n;
    let kl = kl_sum * inv_n;
    Ok(LossOutput {
        loss: -surrogate + cfg.kl_beta * kl,
        grad,
        kl,
        surrogate,
        steps: n_steps,
        clip_fraction: clipped as f64 * inv_n,
    })
}
