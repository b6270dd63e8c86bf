//! Flow-matching primitives.
//!
//! Convention: `t = 0` is data, `t = 1` is noise, and the path between a data
//! point `x0` and a noise draw `x1` is the straight line `(1 - t) x0 + t x1`.

pub mod checkpoint;
mod field;
pub mod mlp;
pub mod optim;
pub mod pretrain;

pub use field::VelocityField;
pub use mlp::Mlp;

use crate::error::{check_dims, Error, Result};
use crate::vector::Vector;

/// One `(x0, x1, t)` training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vector,
    pub x1: Vector,
    pub t: f64,
}

impl FlowSample {
    pub fn new(x0: Vector, x1: Vector, t: f64) -> Self {
        Self { x0, x1, t }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x0: &Vector, x1: &Vector, t: f64) -> Result<Vector> {
    check_dims(x0.dim(), x1.dim())?;
    check_time(t)?;
    Ok(x0.zip_with(x1, |a, b| (1.0 - t) * a + t * b))
}

pub fn target_velocity(x0: &Vector, x1: &Vector) -> Result<Vector> {
    x1.sub(x0)
}

fn check_batch(field: &VelocityField, batch: &[FlowSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = field.dim();
    for s in batch {
        check_dims(d, s.x0.dim())?;
        check_dims(d, s.x1.dim())?;
        check_time(s.t)?;
    }
    Ok(())
}

/// Mean over the batch of `|(x1 - x0) - v(x_t, t)|^2`.
pub fn fm_loss(field: &VelocityField, batch: &[FlowSample]) -> Result<f64> {
    check_batch(field, batch)?;
    let mut total = 0.0;
    for s in batch {
        let xt = interpolate(&s.x0, &s.x1, s.t)?;
        let v = field.evaluate(&xt, s.t)?;
        let target = target_velocity(&s.x0, &s.x1)?;
        total += target.dist_sq(&v);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`fm_loss`] with respect to the MLP weights.
pub fn fm_loss_grad(field: &VelocityField, batch: &[FlowSample]) -> Result<Vec<f64>> {
    let mlp = field.as_mlp()?;
    check_batch(field, batch)?;
    let mut grad = vec![0.0; mlp.num_weights()];
    let scale = 2.0 / batch.len() as f64;
    for s in batch {
        let xt = interpolate(&s.x0, &s.x1, s.t)?;
        let target = target_velocity(&s.x0, &s.x1)?;
        let v = mlp.velocity(xt.as_slice(), s.t);
        let upstream: Vec<f64> = v.iter().zip(target.as_slice()).map(|(vi, ti)| scale * (vi - ti)).collect();
        mlp.velocity_vjp(xt.as_slice(), s.t, &upstream, &mut grad);
    }
    Ok(grad)
}

/// Loss and gradient in one pass (used by the pretraining loop).
pub(crate) fn fm_loss_and_grad(mlp: &Mlp, batch: &[FlowSample], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let t = s.t;
        let xt: Vec<f64> = s.x0.as_slice().iter().zip(s.x1.as_slice()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let v = mlp.velocity(&xt, t);
        let mut upstream = Vec::with_capacity(v.len());
        for ((vi, a), b) in v.iter().zip(s.x0.as_slice()).zip(s.x1.as_slice()) {
            let r = vi - (b - a);
            total += r * r;
            upstream.push(2.0 * r / n);
        }
        mlp.velocity_vjp(&xt, t, &upstream, grad);
    }
    total / n
}

/// `z - t * v(z, t)`: the data point reached by following the current
/// velocity in a straight line. Identity at `t = 0`.
pub fn one_step_decode(field: &VelocityField, z: &Vector, t: f64) -> Result<Vector> {
    check_dims(field.dim(), z.dim())?;
    check_time(t)?;
    if t == 0.0 {
        return Ok(z.clone());
    }
    Ok(one_step_decode_unchecked(field, z.as_slice(), t))
}

pub(crate) fn one_step_decode_unchecked(field: &VelocityField, z: &[f64], t: f64) -> Vector {
    if t == 0.0 {
        return Vector::from(z.to_vec());
    }
    let v = field.eval_unchecked(z, t);
    Vector::from(z.iter().zip(&v).map(|(zi, vi)| zi - t * vi).collect::<Vec<_>>())
}

/// Probability-flow ODE sampler: `steps` uniform Euler steps from `t = 1` to `t = 0`.
pub fn euler_sample(field: &VelocityField, x1: &Vector, steps: usize) -> Result<Vector> {
    euler_integrate(field, x1, 1.0, steps)
}

/// Euler integration of the probability-flow ODE from `t_start` down to 0.
pub fn euler_integrate(field: &VelocityField, x: &Vector, t_start: f64, steps: usize) -> Result<Vector> {
    euler_between(field, x, t_start, 0.0, steps)
}

/// `steps` uniform Euler steps of the probability-flow ODE from `t_from` to
/// `t_to` (`t_to <= t_from`).
pub fn euler_between(field: &VelocityField, x: &Vector, t_from: f64, t_to: f64, steps: usize) -> Result<Vector> {
    if steps == 0 {
        return Err(Error::InvalidArgument("euler sampling needs at least one step".into()));
    }
    check_dims(field.dim(), x.dim())?;
    check_time(t_from)?;
    check_time(t_to)?;
    if t_to > t_from {
        return Err(Error::InvalidArgument(format!("cannot integrate forward from t={t_from} to t={t_to}")));
    }
    let n = steps as f64;
    let span = t_from - t_to;
    let dt = -span / n;
    let mut x = x.as_slice().to_vec();
    for k in 0..steps {
        let t = t_to + span * (steps - k) as f64 / n;
        let v = field.eval_unchecked(&x, t);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi * dt;
        }
    }
    Ok(Vector::from(x))
}
