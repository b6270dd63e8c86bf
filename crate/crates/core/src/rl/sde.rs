use crate::error::{check_dims, Error, Result};
use crate::flow::VelocityField;
use crate::vector::Vector;

/// Result of one Euler–Maruyama step.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub next: Vector,
    /// Log-density of `next` under `N(x + v dt, (-dt) sigma_t^2 I)`.
    /// Zero by convention for deterministic steps.
    pub log_prob: f64,
    /// `sigma_t == 0` and `m == 0`: no density exists.
    pub deterministic: bool,
}

/// Log-density of `x` under `N(mean, std^2 I)`, evaluated from `x - mean`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let var = std * std;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    x.iter()
        .zip(mean)
        .map(|(a, m)| {
            let d = a - m;
            norm - 0.5 * d * d / var
        })
        .sum()
}

/// `x' = x + v(x, t) dt + sqrt(-dt) sigma_t m`.
pub fn sde_step(field: &VelocityField, x: &Vector, t: f64, dt: f64, sigma_t: f64, m: &Vector) -> Result<SdeStep> {
    check_dims(field.dim(), x.dim())?;
    check_dims(x.dim(), m.dim())?;
    let v = field.evaluate(x, t)?;
    step_from_velocity(x.as_slice(), v.as_slice(), dt, sigma_t, m.as_slice())
}

pub(crate) fn step_from_velocity(x: &[f64], v: &[f64], dt: f64, sigma_t: f64, m: &[f64]) -> Result<SdeStep> {
    if !(dt < 0.0) {
        return Err(Error::InvalidArgument(format!("step dt = {dt} must be negative")));
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t = {sigma_t} must be >= 0")));
    }
    let mean: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + vi * dt).collect();
    let std = (-dt).sqrt() * sigma_t;
    if std == 0.0 {
        if m.iter().any(|&mi| mi != 0.0) {
            return Err(Error::DegenerateDensity);
        }
        return Ok(SdeStep { next: Vector::from(mean), log_prob: 0.0, deterministic: true });
    }
    let next: Vec<f64> = mean.iter().zip(m).map(|(mu, mi)| mu + std * mi).collect();
    let log_prob = gaussian_log_prob(&next, &mean, std);
    Ok(SdeStep { next: Vector::from(next), log_prob, deterministic: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from(x.to_vec())
    }

    #[test]
    fn zero_noise_is_euler_step_with_normalizer_only() {
        let f = VelocityField::Constant(v(&[1.0, -2.0]));
        let x = v(&[0.5, 0.5]);
        let (dt, s) = (-0.1, 0.7);
        let out = sde_step(&f, &x, 0.6, dt, s, &Vector::zeros(2)).unwrap();
        assert!((out.next[0] - 0.4).abs() < 1e-15 && (out.next[1] - 0.7).abs() < 1e-15);
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * (-dt) * s * s).ln();
        assert!((out.log_prob - expected).abs() < 1e-12);
        assert!(!out.deterministic);
    }

    #[test]
    fn standard_normal_density_at_one() {
        let f = VelocityField::Constant(Vector::zeros(1));
        let out = sde_step(&f, &v(&[0.0]), 1.0, -1.0, 1.0, &v(&[1.0])).unwrap();
        assert_eq!(out.next.as_slice(), &[1.0]);
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((out.log_prob - expected).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        // the step density, viewed as a function of x', over a fine grid
        let (dt, s, x, vel) = (-0.1f64, 0.7, 0.3, -1.2);
        let mean = x + vel * dt;
        let std = (-dt).sqrt() * s;
        let h = 1e-3;
        let n = (20.0 * std / h) as i64;
        let mass: f64 = (-n..=n)
            .map(|i| {
                let xp = mean + i as f64 * h;
                gaussian_log_prob(&[xp], &[mean], std).exp() * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn degenerate_cases() {
        let f = VelocityField::Constant(v(&[1.0]));
        let det = sde_step(&f, &v(&[0.0]), 0.5, -0.5, 0.0, &v(&[0.0])).unwrap();
        assert!(det.deterministic);
        assert_eq!(det.log_prob, 0.0);
        assert_eq!(det.next.as_slice(), &[-0.5]);
        assert!(matches!(sde_step(&f, &v(&[0.0]), 0.5, -0.5, 0.0, &v(&[0.1])), Err(Error::DegenerateDensity)));
        assert!(sde_step(&f, &v(&[0.0]), 0.5, 0.5, 1.0, &v(&[0.1])).is_err());
    }
}
