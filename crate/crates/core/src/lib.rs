//! Reward-guided noise search for GRPO fine-tuning of flow-matching models.
//!
//! The crate is organised bottom-up:
//!
//! - [`flow`]: interpolation path, flow-matching loss and its gradient, velocity
//!   fields (closed-form and a small tanh MLP), Euler and one-step decoders.
//! - [`rewards`]: analytic reward functions behind the [`Reward`] trait.
//! - [`search`]: the cross-entropy search over perturbation noise, plus the
//!   one-shot and random-selection baselines.
//! - [`rl`]: stochastic rollouts, group-relative advantages, the clipped
//!   surrogate with a KL anchor, EMA and the training loop.
//!
//! All arithmetic is `f64`. All randomness comes from [`rng::stream`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod metrics;
pub mod rewards;
pub mod rl;
pub mod rng;
pub mod search;
pub mod task;
pub mod vector;

pub use error::{Error, Result};
pub use flow::{
    checkpoint::Checkpoint, euler_between, euler_integrate, euler_sample, fm_loss, fm_loss_grad, interpolate,
    one_step_decode, target_velocity, FlowSample, Mlp, VelocityField,
};
pub use metrics::{MetricsRow, MetricsSink, Phase};
pub use rewards::{registry_lookup, Reward, RewardFn};
pub use rl::{GrpoConfig, NoiseSource};
pub use search::{CemConfig, NoiseDistribution, PerturbationContext, ReturnMode, SearchTrace, VarianceCenter};
pub use task::{DataTask, GaussianMixture};
pub use vector::Vector;
