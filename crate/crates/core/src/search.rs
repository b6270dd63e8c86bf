//! Cross-entropy search over the noise used to perturb a latent.
//!
//! Each iteration draws `K` candidate noises from a diagonal Gaussian
//! `N(mu, sigma^2)`, perturbs the latent with each, scores the one-step decoded
//! sample with the reward, and refits `(mu, sigma)` to the top `floor(P K)`
//! candidates. The search starts from `mu = 0`, `sigma = 1` on every call.
//!
//! Two ablation baselines share the machinery: [`one_shot_search`] (a single
//! round of select-and-average from `N(0, I)`) and [`random_update_search`]
//! (identical loop, but the refit uses a uniformly random subset).

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, Error, Result};
use crate::flow::{check_time, one_step_decode_unchecked, VelocityField};
use crate::rewards::Reward;
use crate::vector::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReturnMode {
    /// Return the final mean (deterministic given the trace).
    #[default]
    Mean,
    /// Return one fresh draw `mu + sigma * n` from the final distribution.
    Sample,
}

/// Point the refit variance is measured around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceCenter {
    /// The mean the candidates were drawn from. Elites that moved away from it
    /// keep `sigma` large, so the search can travel several initial standard
    /// deviations before contracting.
    #[default]
    SamplingMean,
    /// The new elite mean (plain population variance of the elites). Shrinks
    /// `sigma` every round and stalls after roughly `2.6 sigma_0` of travel for
    /// `P = 0.2`.
    EliteMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    /// Candidates per iteration (`K`).
    pub candidates: usize,
    /// Refinement rounds (`N`).
    pub iterations: usize,
    /// Saving fraction `P`; `floor(P K)` elites survive each round.
    pub elite_fraction: f64,
    pub sigma_floor: f64,
    pub return_mode: ReturnMode,
    pub variance_center: VarianceCenter,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            candidates: 5,
            iterations: 5,
            elite_fraction: 0.5,
            sigma_floor: 1e-3,
            return_mode: ReturnMode::Mean,
            variance_center: VarianceCenter::default(),
            seed: 0,
        }
    }
}

/// `floor(P K)`.
///
/// A `1e-9` slack absorbs the rounding in `P = T / K`, so that the fraction
/// computed from an elite count maps back to the same count.
pub fn elite_count(fraction: f64, candidates: usize) -> usize {
    (fraction * candidates as f64 + 1e-9).floor() as usize
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        elite_count(self.elite_fraction, self.candidates)
    }

    /// Reward evaluations one search call performs.
    pub fn evaluations_per_search(&self) -> usize {
        self.candidates * self.iterations
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::InvalidArgument("candidate count K must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iteration count N must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.elite_fraction) {
            return Err(Error::InvalidArgument(format!("elite fraction {} outside [0, 1]", self.elite_fraction)));
        }
        if !(self.sigma_floor >= 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma floor {} must be >= 0", self.sigma_floor)));
        }
        if self.elite_count() == 0 {
            return Err(Error::NoElites { fraction: self.elite_fraction, candidates: self.candidates });
        }
        Ok(())
    }
}

/// Diagonal Gaussian over noise tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    pub mu: Vector,
    pub sigma: Vector,
}

impl NoiseDistribution {
    /// `mu = 0`, `sigma = 1`.
    pub fn standard(dim: usize) -> Self {
        Self { mu: Vector::zeros(dim), sigma: Vector::filled(dim, 1.0) }
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from(
            self.mu
                .as_slice()
                .iter()
                .zip(self.sigma.as_slice())
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>(),
        )
    }
}

/// Where the perturbation is applied: latent `X_t`, its time, the step `dt`
/// (negative, toward data) and the noise scale `sigma_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationContext {
    pub latent: Vector,
    pub t: f64,
    pub dt: f64,
    pub sigma_t: f64,
}

impl PerturbationContext {
    pub fn new(latent: Vector, t: f64, dt: f64, sigma_t: f64) -> Result<Self> {
        check_time(t)?;
        if !(dt < 0.0) {
            return Err(Error::InvalidArgument(format!("step dt = {dt} must be negative")));
        }
        if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise scale sigma_t = {sigma_t} must be >= 0")));
        }
        Ok(Self { latent, t, dt, sigma_t })
    }

    /// Time at which perturbed latents are decoded: `t + dt`, clamped at 0.
    pub fn t_after_step(&self) -> f64 {
        (self.t + self.dt).max(0.0)
    }

    fn amplitude(&self) -> f64 {
        (-self.dt).sqrt() * self.sigma_t
    }
}

/// One refinement round.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Rewards in candidate order; non-finite rewards are stored as `-inf`.
    pub rewards: Vec<f64>,
    /// Selected candidate indices, ascending.
    pub elites: Vec<usize>,
    /// Distribution after the refit.
    pub mu: Vector,
    pub sigma: Vector,
    /// Running maximum of the finite rewards seen so far.
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace {
    pub iterations: Vec<IterationRecord>,
}

impl SearchTrace {
    pub fn reward_evaluations(&self) -> usize {
        self.iterations.iter().map(|r| r.rewards.len()).sum()
    }

    pub fn final_sigma_mean(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.sigma.mean())
    }

    /// `iter,candidate_idx,reward,selected`
    pub fn write_candidates_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,candidate_idx,reward,selected")?;
        for (it, rec) in self.iterations.iter().enumerate() {
            for (i, r) in rec.rewards.iter().enumerate() {
                let sel = u8::from(rec.elites.binary_search(&i).is_ok());
                writeln!(w, "{it},{i},{r},{sel}")?;
            }
        }
        Ok(())
    }

    /// `iter,mu_norm,sigma_norm,best_reward`
    pub fn write_iterations_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,mu_norm,sigma_norm,best_reward")?;
        for (it, rec) in self.iterations.iter().enumerate() {
            writeln!(w, "{it},{},{},{}", rec.mu.norm(), rec.sigma.norm(), rec.best_reward)?;
        }
        Ok(())
    }
}

/// `m_i = mu + sigma * n_i`, `n_i ~ N(0, I)`, drawn candidate by candidate.
pub fn sample_candidates<R: Rng + ?Sized>(dist: &NoiseDistribution, k: usize, rng: &mut R) -> Result<Vec<Vector>> {
    if k == 0 {
        return Err(Error::InvalidArgument("cannot sample zero candidates".into()));
    }
    Ok((0..k).map(|_| dist.draw(rng)).collect())
}

/// `X_t + sqrt(-dt) * sigma_t * m`.
pub fn perturb(ctx: &PerturbationContext, m: &Vector) -> Result<Vector> {
    check_dims(ctx.latent.dim(), m.dim())?;
    if !(ctx.dt < 0.0) {
        return Err(Error::InvalidArgument(format!("step dt = {} must be negative", ctx.dt)));
    }
    ctx.latent.axpy(ctx.amplitude(), m)
}

/// Perturbs with each candidate, one-step decodes at `t + dt`, and scores.
/// Non-finite rewards come back as `-inf`.
pub fn evaluate_candidates<R: Reward + ?Sized>(
    ctx: &PerturbationContext,
    field: &VelocityField,
    candidates: &[Vector],
    reward: &R,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    check_dims(field.dim(), ctx.latent.dim())?;
    let t_dec = ctx.t_after_step();
    candidates
        .iter()
        .map(|m| {
            let z = perturb(ctx, m)?;
            let x0 = one_step_decode_unchecked(field, z.as_slice(), t_dec);
            let r = reward.evaluate(x0.as_slice());
            Ok(if r.is_finite() { r } else { f64::NEG_INFINITY })
        })
        .collect()
}

/// Indices of the `count` highest finite rewards, returned ascending. Ties
/// go to the lower index. If fewer than `count` rewards are finite, all
/// finite ones are returned.
pub fn select_top_count(rewards: &[f64], count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::NoElites { fraction: 0.0, candidates: rewards.len() });
    }
    let mut order: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i].is_finite()).collect();
    // stable sort keeps index order among equal rewards
    order.sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).expect("finite rewards"));
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// [`select_top_count`] with `T = floor(P K)`.
pub fn select_top(rewards: &[f64], fraction: f64) -> Result<Vec<usize>> {
    let count = elite_count(fraction, rewards.len());
    if count == 0 {
        return Err(Error::NoElites { fraction, candidates: rewards.len() });
    }
    select_top_count(rewards, count)
}

/// Elementwise mean and population standard deviation of the elites, with
/// `sigma` clamped to at least `sigma_floor`.
pub fn update_distribution(elites: &[&Vector], sigma_floor: f64) -> Result<NoiseDistribution> {
    let first = elites.first().ok_or(Error::Empty("elite list"))?;
    let d = first.dim();
    for e in elites {
        check_dims(d, e.dim())?;
    }
    let n = elites.len() as f64;
    let mut mu = vec![0.0; d];
    for e in elites {
        for (m, x) in mu.iter_mut().zip(e.as_slice()) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for e in elites {
        for ((v, x), m) in var.iter_mut().zip(e.as_slice()).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(sigma_floor)).collect();
    Ok(NoiseDistribution { mu: Vector::from(mu), sigma: Vector::from(sigma) })
}

/// Like [`update_distribution`], but `sigma^2` is the mean squared deviation
/// of the elites from `center` rather than from their own mean.
pub fn update_distribution_about(elites: &[&Vector], center: &Vector, sigma_floor: f64) -> Result<NoiseDistribution> {
    let mut dist = update_distribution(elites, sigma_floor)?;
    check_dims(dist.dim(), center.dim())?;
    let n = elites.len() as f64;
    let mut var = vec![0.0; center.dim()];
    for e in elites {
        for ((v, x), c) in var.iter_mut().zip(e.as_slice()).zip(center.as_slice()) {
            *v += (x - c) * (x - c);
        }
    }
    dist.sigma = Vector::from(var.iter().map(|v| (v / n).sqrt().max(sigma_floor)).collect::<Vec<_>>());
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selection {
    Greedy,
    Random,
}

/// Reward-guided noise search. Returns the optimised noise and the trace.
pub fn smart_grpo_search<R: Reward + ?Sized, G: Rng + ?Sized>(
    ctx: &PerturbationContext,
    field: &VelocityField,
    reward: &R,
    cfg: &CemConfig,
    rng: &mut G,
) -> Result<(Vector, SearchTrace)> {
    cem_loop(ctx, field, reward, cfg, Selection::Greedy, rng)
}

/// Same loop as [`smart_grpo_search`] but the refit uses a uniformly random
/// subset of size `T`; rewards are still computed and traced.
pub fn random_update_search<R: Reward + ?Sized, G: Rng + ?Sized>(
    ctx: &PerturbationContext,
    field: &VelocityField,
    reward: &R,
    cfg: &CemConfig,
    rng: &mut G,
) -> Result<(Vector, SearchTrace)> {
    cem_loop(ctx, field, reward, cfg, Selection::Random, rng)
}

/// Draws `k` noises from `N(0, I)`, scores them, returns the mean of the best `t`.
pub fn one_shot_search<R: Reward + ?Sized, G: Rng + ?Sized>(
    ctx: &PerturbationContext,
    field: &VelocityField,
    reward: &R,
    k: usize,
    t: usize,
    rng: &mut G,
) -> Result<Vector> {
    if t == 0 || t > k {
        return Err(Error::InvalidArgument(format!("one-shot search needs 1 <= T <= K, got T={t}, K={k}")));
    }
    let candidates = sample_candidates(&NoiseDistribution::standard(ctx.latent.dim()), k, rng)?;
    let rewards = evaluate_candidates(ctx, field, &candidates, reward)?;
    let elites = select_top_count(&rewards, t)?;
    if elites.is_empty() {
        return Err(Error::AllRewardsNonFinite { iteration: 0, candidates: k });
    }
    let chosen: Vec<&Vector> = elites.iter().map(|&i| &candidates[i]).collect();
    Ok(update_distribution(&chosen, 0.0)?.mu)
}

fn cem_loop<R: Reward + ?Sized, G: Rng + ?Sized>(
    ctx: &PerturbationContext,
    field: &VelocityField,
    reward: &R,
    cfg: &CemConfig,
    selection: Selection,
    rng: &mut G,
) -> Result<(Vector, SearchTrace)> {
    cfg.validate()?;
    check_dims(field.dim(), ctx.latent.dim())?;
    let keep = cfg.elite_count();
    let mut dist = NoiseDistribution::standard(ctx.latent.dim());
    let mut trace = SearchTrace { iterations: Vec::with_capacity(cfg.iterations) };
    let mut best = f64::NEG_INFINITY;

    for iteration in 0..cfg.iterations {
        let candidates = sample_candidates(&dist, cfg.candidates, rng)?;
        let rewards = evaluate_candidates(ctx, field, &candidates, reward)?;
        let finite: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i].is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::AllRewardsNonFinite { iteration, candidates: cfg.candidates });
        }
        let elites = match selection {
            Selection::Greedy => select_top_count(&rewards, keep)?,
            Selection::Random => random_subset(&finite, keep, rng),
        };
        let chosen: Vec<&Vector> = elites.iter().map(|&i| &candidates[i]).collect();
        dist = match cfg.variance_center {
            VarianceCenter::SamplingMean => update_distribution_about(&chosen, &dist.mu, cfg.sigma_floor)?,
            VarianceCenter::EliteMean => update_distribution(&chosen, cfg.sigma_floor)?,
        };
        best = finite.iter().map(|&i| rewards[i]).fold(best, f64::max);
        trace.iterations.push(IterationRecord {
            rewards,
            elites,
            mu: dist.mu.clone(),
            sigma: dist.sigma.clone(),
            best_reward: best,
        });
    }

    let out = match cfg.return_mode {
        ReturnMode::Mean => dist.mu,
        ReturnMode::Sample => dist.draw(rng),
    };
    Ok((out, trace))
}

/// Uniform size-`count` subset of `pool`, ascending. Consumes no randomness
/// when the whole pool is kept.
fn random_subset<G: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut G) -> Vec<usize> {
    if count >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> =
        rand::seq::index::sample(rng, pool.len(), count).into_iter().map(|j| pool[j]).collect();
    picked.sort_unstable();
    picked
}
