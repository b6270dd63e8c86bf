//! Analytic reward functions. Rewards are maximised everywhere in the crate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::task::GaussianMixture;
use crate::vector::{parse_scalar_list, parse_vector_list, Vector};

/// A pure scalar score on decoded samples.
pub trait Reward: Sync {
    fn evaluate(&self, x: &[f64]) -> f64;

    fn name(&self) -> &str {
        "custom"
    }

    /// Finite upper bound on the reward, when one is known.
    fn upper_bound(&self) -> Option<f64> {
        None
    }
}

impl<F> Reward for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn evaluate(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Built-in rewards.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardFn {
    /// `-|x - target|^2`; supremum 0.
    NegSqDist { target: Vector },
    /// Mixture log-density; bounded by `log sum_k w_k (2 pi s_k^2)^(-d/2)`.
    MixtureLogDensity(GaussianMixture),
    /// `-((|x - center| - radius) / width)^2`; supremum 0 on the ring.
    Ring { center: Vector, radius: f64, width: f64 },
}

pub fn neg_sq_dist(target: Vector) -> RewardFn {
    RewardFn::NegSqDist { target }
}

/// Modes are `(mean, std, weight)`; weights are normalised internally.
pub fn mixture_logdensity(modes: Vec<(Vector, f64, f64)>) -> Result<RewardFn> {
    let (mut means, mut stds, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (m, s, w) in modes {
        means.push(m);
        stds.push(s);
        weights.push(w);
    }
    Ok(RewardFn::MixtureLogDensity(GaussianMixture::new(means, stds, weights)?))
}

pub fn ring_reward(center: Vector, radius: f64, width: f64) -> Result<RewardFn> {
    if !(radius > 0.0 && width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ring reward needs positive radius and width, got {radius} and {width}"
        )));
    }
    Ok(RewardFn::Ring { center, radius, width })
}

impl Reward for RewardFn {
    fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            RewardFn::NegSqDist { target } => {
                -x.iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            RewardFn::MixtureLogDensity(mix) => mix.log_density(x),
            RewardFn::Ring { center, radius, width } => {
                let r = x.iter().zip(center.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let u = (r - radius) / width;
                -u * u
            }
        }
    }

    fn name(&self) -> &str {
        match self {
            RewardFn::NegSqDist { .. } => "neg_sq_dist",
            RewardFn::MixtureLogDensity(_) => "mixture_logdensity",
            RewardFn::Ring { .. } => "ring",
        }
    }

    fn upper_bound(&self) -> Option<f64> {
        match self {
            RewardFn::NegSqDist { .. } | RewardFn::Ring { .. } => Some(0.0),
            RewardFn::MixtureLogDensity(mix) => {
                let d = mix.dim() as f64;
                let peak: f64 = mix
                    .stds()
                    .iter()
                    .zip(mix.weights())
                    .map(|(s, w)| w * (2.0 * std::f64::consts::PI * s * s).powf(-0.5 * d))
                    .sum();
                Some(peak.ln())
            }
        }
    }
}

/// Names accepted by [`registry_lookup`].
pub const REGISTERED_REWARDS: [&str; 3] = ["neg_sq_dist", "mixture_logdensity", "ring"];

/// Builds a reward from its config name and string parameters.
///
/// | name | params (defaults) |
/// |---|---|
/// | `neg_sq_dist` | `target` (`0,0`) |
/// | `mixture_logdensity` | `means` (`-2,0;2,0`), `stds` (`0.5`), `weights` (`1`) |
/// | `ring` | `center` (`0,0`), `radius` (`1`), `width` (`0.25`) |
pub fn registry_lookup(name: &str, params: &BTreeMap<String, String>) -> Result<RewardFn> {
    let allowed: &[&str] = match name {
        "neg_sq_dist" => &["target"],
        "mixture_logdensity" => &["means", "stds", "weights"],
        "ring" => &["center", "radius", "width"],
        _ => return Err(Error::UnknownReward { name: name.to_string(), available: REGISTERED_REWARDS.to_vec() }),
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "reward '{name}' has no parameter '{bad}' (expected one of: {})",
            allowed.join(", ")
        )));
    }
    let get = |key: &str, default: &'static str| params.get(key).map(String::as_str).unwrap_or(default);
    match name {
        "neg_sq_dist" => Ok(neg_sq_dist(get("target", "0,0").parse()?)),
        "mixture_logdensity" => {
            let means = parse_vector_list(get("means", "-2,0;2,0"))?;
            let k = means.len();
            let stds = broadcast(parse_scalar_list(get("stds", "0.5"))?, k, "stds")?;
            let weights = broadcast(parse_scalar_list(get("weights", "1"))?, k, "weights")?;
            Ok(RewardFn::MixtureLogDensity(GaussianMixture::new(means, stds, weights)?))
        }
        "ring" => {
            let radius = parse_scalar_list(get("radius", "1"))?;
            let width = parse_scalar_list(get("width", "0.25"))?;
            if radius.len() != 1 || width.len() != 1 {
                return Err(Error::InvalidArgument("ring radius and width are scalars".into()));
            }
            ring_reward(get("center", "0,0").parse()?, radius[0], width[0])
        }
        _ => unreachable!("name checked above"),
    }
}

/// A single value is repeated `k` times; otherwise the length must be `k`.
fn broadcast(values: Vec<f64>, k: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; k]),
        n if n == k => Ok(values),
        n => Err(Error::InvalidArgument(format!("{what}: expected 1 or {k} values, got {n}"))),
    }
}
