//! How well the one-step decode predicts the full ODE continuation, by time.

use flowcem::flow::euler_between;
use flowcem::rng;
use flowcem::search::{perturb, PerturbationContext};
use flowcem::{one_step_decode, Reward, Vector, VelocityField};
use rayon::prelude::*;

use crate::config::DecodeConfig;
use crate::error::Result;
use crate::stats::{mean, spearman};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    /// Time of the latent being perturbed.
    pub t: f64,
    pub seed: u64,
    /// Mean distance between the one-step decode and the full Euler decode.
    pub decode_error: f64,
    /// Spearman correlation between the rewards of the two decodes.
    pub reward_rank_corr: f64,
}

pub const DECODE_HEADER: &str = "t,seed,decode_error,reward_rank_corr";

impl DecodeRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{}", self.t, self.seed, self.decode_error, self.reward_rank_corr)
    }
}

fn steps_for(span: f64, full_steps: usize) -> usize {
    ((full_steps as f64 * span).ceil() as usize).max(1)
}

/// For every seed and grid time `t`: integrate one trajectory from `t = 1` to
/// `t`, perturb its next-step latent with `cfg.candidates` standard-normal
/// noises (scale `noise_level * t`), then compare the one-step decode at
/// `t + dt` against the full Euler continuation from there.
///
/// Rows come back ordered by seed, then grid position.
pub fn decode_study<R: Reward + ?Sized>(
    field: &VelocityField,
    reward: &R,
    cfg: &DecodeConfig,
    noise_level: f64,
    seeds: &[u64],
) -> Result<Vec<DecodeRow>> {
    let d = field.dim();
    let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| (0..cfg.t_grid.len()).map(move |i| (s, i))).collect();
    jobs.par_iter()
        .map(|&(seed, i)| {
            let t = cfg.t_grid[i];
            let x1 = Vector::standard_normal(d, &mut rng::stream(seed, "decode-x1", &[]));
            let xt = if t < 1.0 { euler_between(field, &x1, 1.0, t, steps_for(1.0 - t, cfg.full_steps))? } else { x1 };
            let v = field.evaluate(&xt, t)?;
            let drift = xt.add(&v.scale(cfg.dt))?;
            let ctx = PerturbationContext::new(drift, t, cfg.dt, noise_level * t)?;
            let t_dec = ctx.t_after_step();

            let mut r = rng::stream(seed, "decode", &[i as u64]);
            let mut errors = Vec::with_capacity(cfg.candidates);
            let mut quick = Vec::with_capacity(cfg.candidates);
            let mut full = Vec::with_capacity(cfg.candidates);
            for _ in 0..cfg.candidates {
                let z = perturb(&ctx, &Vector::standard_normal(d, &mut r))?;
                let one = one_step_decode(field, &z, t_dec)?;
                let end = if t_dec > 0.0 {
                    euler_between(field, &z, t_dec, 0.0, steps_for(t_dec, cfg.full_steps))?
                } else {
                    z
                };
                errors.push(one.dist_sq(&end).sqrt());
                quick.push(reward.evaluate(one.as_slice()));
                full.push(reward.evaluate(end.as_slice()));
            }
            Ok(DecodeRow { t, seed, decode_error: mean(&errors), reward_rank_corr: spearman(&quick, &full) })
        })
        .collect()
}

/// Per seed, the Spearman correlation between grid time and decode error.
pub fn error_trend(rows: &[DecodeRow]) -> Vec<(u64, f64)> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|s| {
            let (ts, errs): (Vec<f64>, Vec<f64>) =
                rows.iter().filter(|r| r.seed == s).map(|r| (r.t, r.decode_error)).unzip();
            (s, spearman(&ts, &errs))
        })
        .collect()
}
