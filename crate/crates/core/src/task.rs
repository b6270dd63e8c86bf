//! Synthetic data distributions for pretraining the velocity field.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, Error, Result};
use crate::vector::Vector;

/// Isotropic Gaussian mixture `sum_k w_k N(mean_k, std_k^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vector>,
    stds: Vec<f64>,
    /// Normalised to sum to one.
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vector>, stds: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        if stds.len() != means.len() || weights.len() != means.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture has {} means, {} stds, {} weights",
                means.len(),
                stds.len(),
                weights.len()
            )));
        }
        let d = means[0].dim();
        for m in &means {
            check_dims(d, m.dim())?;
        }
        if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("mixture stds must be positive, got {stds:?}")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(format!("mixture weights must be positive, got {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { means, stds, weights })
    }

    pub fn dim(&self) -> usize {
        self.means[0].dim()
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let s = self.stds[k];
        Vector::from(
            self.means[k].as_slice().iter().map(|m| m + s * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
        )
    }

    /// `log sum_k w_k N(x; mean_k, std_k^2 I)`, computed with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.stds)
            .zip(&self.weights)
            .map(|((m, s), w)| {
                let sq: f64 = x.iter().zip(m.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s * s).ln() - 0.5 * sq / (s * s)
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Distance from `x` to the nearest component mean, in units of that component's std.
    pub fn nearest_mode_distance(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .zip(&self.stds)
            .map(|(m, s)| x.iter().zip(m.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / s)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Data distribution a velocity field is pretrained on.
#[derive(Debug, Clone, PartialEq)]
pub enum DataTask {
    Dirac(Vector),
    Mixture(GaussianMixture),
}

impl DataTask {
    pub fn dim(&self) -> usize {
        match self {
            DataTask::Dirac(x) => x.dim(),
            DataTask::Mixture(m) => m.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match self {
            DataTask::Dirac(x) => x.clone(),
            DataTask::Mixture(m) => m.sample(rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn validates_components() {
        let m = || vec![Vector::from(vec![0.0, 0.0])];
        assert!(GaussianMixture::new(m(), vec![1.0], vec![2.0]).is_ok());
        assert!(GaussianMixture::new(m(), vec![0.0], vec![1.0]).is_err());
        assert!(GaussianMixture::new(m(), vec![1.0], vec![-1.0]).is_err());
        assert!(GaussianMixture::new(m(), vec![1.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn samples_follow_weights() {
        let g = GaussianMixture::new(
            vec![Vector::from(vec![-5.0]), Vector::from(vec![5.0])],
            vec![0.1, 0.1],
            vec![1.0, 3.0],
        )
        .unwrap();
        let mut r = rng::stream(2, "test", &[]);
        let right = (0..4000).filter(|_| g.sample(&mut r)[0] > 0.0).count();
        assert!((right as f64 / 4000.0 - 0.75).abs() < 0.03);
    }
}
