use crate::error::{check_dims, Error, Result};
use crate::flow::mlp::Mlp;
use crate::vector::Vector;

/// Velocity field `v(x, t)` on the straight-line path from data (t=0) to
/// standard-normal noise (t=1).
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    /// `v(x, t) = c` everywhere. A zero constant makes the one-step decoder
    /// the identity.
    Constant(Vector),
    /// Exact field for a point mass at `target`: `v(x, t) = (x - target) / t`.
    Dirac { target: Vector },
    /// Exact field for data `N(mean, scale^2 I)`.
    AffineGaussian { mean: Vector, scale: f64 },
    /// Learned field.
    Mlp(Mlp),
}

impl VelocityField {
    pub fn dim(&self) -> usize {
        match self {
            VelocityField::Constant(c) => c.dim(),
            VelocityField::Dirac { target } => target.dim(),
            VelocityField::AffineGaussian { mean, .. } => mean.dim(),
            VelocityField::Mlp(mlp) => mlp.output_dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            VelocityField::Constant(_) => "constant",
            VelocityField::Dirac { .. } => "dirac",
            VelocityField::AffineGaussian { .. } => "affine_gaussian",
            VelocityField::Mlp(_) => "mlp",
        }
    }

    pub fn as_mlp(&self) -> Result<&Mlp> {
        match self {
            VelocityField::Mlp(mlp) => Ok(mlp),
            other => Err(Error::UnsupportedField(other.kind_name())),
        }
    }

    pub fn evaluate(&self, x: &Vector, t: f64) -> Result<Vector> {
        check_dims(self.dim(), x.dim())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        if t == 0.0 {
            match self {
                VelocityField::Dirac { .. } => {
                    return Err(Error::InvalidArgument("Dirac field is singular at t = 0".into()))
                }
                VelocityField::AffineGaussian { scale, .. } if *scale == 0.0 => {
                    return Err(Error::InvalidArgument("zero-scale Gaussian field is singular at t = 0".into()))
                }
                _ => {}
            }
        }
        Ok(Vector::from(self.eval_unchecked(x.as_slice(), t)))
    }

    /// Evaluation without dimension or time checks, for inner loops.
    pub(crate) fn eval_unchecked(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            VelocityField::Constant(c) => c.as_slice().to_vec(),
            VelocityField::Dirac { target } => x.iter().zip(target.as_slice()).map(|(xi, ti)| (xi - ti) / t).collect(),
            VelocityField::AffineGaussian { mean, scale } => {
                // E[x1 - x0 | x_t = x] for x0 ~ N(m, s^2 I), x1 ~ N(0, I)
                let s2 = scale * scale;
                let u = 1.0 - t;
                let gain = (t - u * s2) / (u * u * s2 + t * t);
                x.iter().zip(mean.as_slice()).map(|(xi, mi)| -mi + gain * (xi - u * mi)).collect()
            }
            VelocityField::Mlp(mlp) => mlp.velocity(x, t),
        }
    }
}

impl From<Mlp> for VelocityField {
    fn from(mlp: Mlp) -> Self {
        VelocityField::Mlp(mlp)
    }
}
