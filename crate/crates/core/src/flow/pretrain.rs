//! Flow-matching pretraining of an MLP velocity field.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::mlp::Mlp;
use crate::flow::optim::Adam;
use crate::flow::{fm_loss_and_grad, FlowSample};
use crate::rng;
use crate::task::DataTask;
use crate::vector::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at `max_steps` under cosine decay. Equal to `lr`
    /// for a constant rate.
    pub lr_final: f64,
    /// Plateau window, in optimizer steps.
    pub patience: usize,
    /// Stop once the mean loss over the last window improves on the window
    /// before it by less than this relative amount.
    pub rel_tol: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            max_steps: 6000,
            batch_size: 128,
            lr: 3e-3,
            lr_final: 3e-4,
            patience: 500,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub mlp: Mlp,
    /// Minibatch loss at every optimizer step.
    pub losses: Vec<f64>,
    /// `true` when training stopped on the plateau rule rather than `max_steps`.
    pub plateaued: bool,
}

/// Draws a training batch: `x0` from the task, `x1 ~ N(0, I)`, `t ~ U(0, 1)`.
pub fn sample_batch<R: Rng + ?Sized>(task: &DataTask, size: usize, rng: &mut R) -> Vec<FlowSample> {
    (0..size)
        .map(|_| {
            let x0 = task.sample(rng);
            let x1 = Vector::standard_normal(task.dim(), rng);
            let t: f64 = rng.random();
            FlowSample::new(x0, x1, t)
        })
        .collect()
}

pub fn pretrain(task: &DataTask, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("pretrain batch_size must be positive".into()));
    }
    let dims = Mlp::velocity_dims(task.dim(), &cfg.hidden);
    let mut mlp = Mlp::init(dims, &mut rng::stream(seed, "init", &[]))?;
    let mut weights = mlp.weights().to_vec();
    let mut grad = vec![0.0; weights.len()];
    let mut opt = Adam::new(weights.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut plateaued = false;

    for step in 0..cfg.max_steps {
        let batch = sample_batch(task, cfg.batch_size, &mut rng::stream(seed, "pretrain", &[step as u64]));
        let loss = fm_loss_and_grad(&mlp, &batch, &mut grad);
        opt.lr = cosine_lr(cfg, step);
        losses.push(loss);
        opt.step(&mut weights, &grad);
        mlp.set_weights(&weights)?;
        if plateau_reached(&losses, cfg.patience, cfg.rel_tol) {
            plateaued = true;
            break;
        }
    }
    Ok(PretrainOutcome { mlp, losses, plateaued })
}

fn cosine_lr(cfg: &PretrainConfig, step: usize) -> f64 {
    let progress = step as f64 / cfg.max_steps.max(1) as f64;
    cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn plateau_reached(losses: &[f64], patience: usize, rel_tol: f64) -> bool {
    let n = losses.len();
    if patience == 0 || n < 2 * patience {
        return false;
    }
    let window_mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = window_mean(&losses[n - 2 * patience..n - patience]);
    let cur = window_mean(&losses[n - patience..]);
    if prev <= 0.0 {
        return true;
    }
    (prev - cur) / prev < rel_tol
}
