use std::ops::Index;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, Error, Result};

/// Fixed-dimension point in `R^d`.
///
/// Used for data samples, noise samples, latents and noise tensors alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite vector entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    /// i.i.d. standard normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn dist_sq(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Vector) -> Result<Vector> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.zip_with(other, |a, b| a + s * b))
    }

    pub(crate) fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }
}

impl From<Vec<f64>> for Vector {
    /// Unchecked conversion; callers own the finiteness invariant.
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl FromStr for Vector {
    type Err = Error;

    /// Comma-separated entries, e.g. `"1.5,-2"`.
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad vector entry '{tok}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Vector::new(values)
    }
}

/// Semicolon-separated vectors, e.g. `"-2,0;2,0"`.
pub fn parse_vector_list(s: &str) -> Result<Vec<Vector>> {
    s.split(';').map(|part| part.trim().parse()).collect()
}

/// Comma- or semicolon-separated scalars.
pub fn parse_scalar_list(s: &str) -> Result<Vec<f64>> {
    s.split([',', ';'])
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number '{tok}': {e}")))
        })
        .collect()
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
