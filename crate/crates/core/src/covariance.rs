//! Inverse covariance with the bits the mixture model needs.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Reciprocal condition number below which a covariance counts as singular.
pub const CONDITION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Precision {
    inverse: Matrix3<f64>,
    log_det: f64,
}

impl Precision {
    pub fn from_covariance(sigma: &Matrix3<f64>) -> Result<Self> {
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularCovariance);
        }
        let sym = (sigma + sigma.transpose()) * 0.5;
        if (sym - sigma).amax() > 1e-9 * sigma.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::SingularCovariance);
        }
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if !(min > 0.0) || min / max < CONDITION_FLOOR {
            return Err(Error::SingularCovariance);
        }
        let inverse = sym.try_inverse().ok_or(Error::SingularCovariance)?;
        Ok(Self {
            inverse: (inverse + inverse.transpose()) * 0.5,
            log_det: eig.iter().map(|v| v.ln()).sum(),
        })
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    #[inline]
    pub fn mahalanobis_sq(&self, r: &Vector3<f64>) -> f64 {
        r.dot(&(self.inverse * r))
    }

    /// Log density of a zero-mean Gaussian at residual `r`.
    #[inline]
    pub fn log_gaussian(&self, r: &Vector3<f64>) -> f64 {
        -0.5 * (self.mahalanobis_sq(r) + self.log_det) - LOG_NORMALIZER_3D
    }
}

/// `(3/2) ln(2π)`.
pub const LOG_NORMALIZER_3D: f64 = 2.756_815_599_614_018;
