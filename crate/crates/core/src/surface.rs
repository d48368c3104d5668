//! The blended articulated implicit surface.
//!
//! Each ellipsoid contributes `f_p(y) = exp(-d²_M(y, x_p) / ν²)` where `x_p`
//! is the datum correspondence on ellipsoid `p`; the surface is the level set
//! `Σ_p f_p(y) = C`. The distance from a set of observations to the surface is
//!
//! ```text
//! F(Λ) = -ν² Σ_i ln Σ_p exp(-d²_ip / ν²)
//! ```
//!
//! evaluated with a shifted log-sum-exp so that it stays finite when every
//! contribution underflows.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::covariance::Precision;
use crate::ellipsoid::{Datum, Ellipsoid, PreparedEllipsoid};
use crate::error::{Error, Result};
use crate::kinematics::{BodyModel, PoseVector};
use crate::math::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendParams {
    /// Blending bandwidth ν, shared by every ellipsoid.
    pub nu: f64,
    /// Surface level C.
    pub level: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            level: 1.0,
        }
    }
}

impl BlendParams {
    pub fn new(nu: f64, level: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "nu must be positive, got {nu}"
            )));
        }
        Ok(Self { nu, level })
    }
}

pub fn contribution(
    e: &Ellipsoid,
    d: &Datum,
    sigma: &Matrix3<f64>,
    params: &BlendParams,
) -> Result<f64> {
    let d2 = e.datum_distance(d, sigma)?;
    Ok((-d2 / (params.nu * params.nu)).exp())
}

/// `f(y) = Σ_p f_p(y)` over already-posed ellipsoids.
pub fn implicit_value(
    ellipsoids: &[Ellipsoid],
    d: &Datum,
    sigma: &Matrix3<f64>,
    params: &BlendParams,
) -> Result<f64> {
    if ellipsoids.is_empty() {
        return Err(Error::EmptyInput("ellipsoids"));
    }
    let surface = BlendedSurface::new(ellipsoids, sigma, *params)?;
    Ok(surface.value(&d.point, &d.normal))
}

/// `F(Λ)` for the model posed at `pose`.
pub fn surface_distance(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    sigma: &Matrix3<f64>,
    params: &BlendParams,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("data"));
    }
    let body = model.pose(pose)?;
    let precision = Precision::from_covariance(sigma)?;
    Ok(blended_distance(data, params.nu, |d, out| {
        out.extend(
            body.prepared()
                .iter()
                .map(|e| precision.mahalanobis_sq(&(d.point - e.surface_point(&d.normal)))),
        )
    }))
}

/// Points-only counterpart of [`surface_distance`]: `d²_ip` is replaced by
/// the squared algebraic distance `q_p(y_i)²`; normals are ignored.
pub fn algebraic_surface_distance(
    model: &BodyModel,
    pose: &PoseVector,
    data: &[Datum],
    params: &BlendParams,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("data"));
    }
    let body = model.pose(pose)?;
    Ok(blended_distance(data, params.nu, |d, out| {
        out.extend(body.prepared().iter().map(|e| {
            let q = e.algebraic_distance(&d.point);
            q * q
        }))
    }))
}

fn blended_distance(
    data: &[Datum],
    nu: f64,
    mut distances: impl FnMut(&Datum, &mut Vec<f64>),
) -> f64 {
    let nu2 = nu * nu;
    let mut buf = Vec::new();
    let terms: Vec<f64> = data
        .iter()
        .map(|d| {
            buf.clear();
            distances(d, &mut buf);
            buf.iter_mut().for_each(|v| *v = -*v / nu2);
            log_sum_exp(&buf)
        })
        .collect();
    -nu2 * pairwise_sum(&terms)
}

/// Summation in a fixed tree order, independent of how the work is split.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// A posed set of ellipsoids with a fixed metric, for repeated evaluation of
/// the implicit function and its spatial gradient.
#[derive(Debug, Clone)]
pub struct BlendedSurface {
    ellipsoids: Vec<PreparedEllipsoid>,
    precision: Precision,
    params: BlendParams,
}

impl BlendedSurface {
    pub fn new(
        ellipsoids: &[Ellipsoid],
        sigma: &Matrix3<f64>,
        params: BlendParams,
    ) -> Result<Self> {
        Ok(Self::from_prepared(
            ellipsoids.iter().map(Ellipsoid::prepare).collect(),
            Precision::from_covariance(sigma)?,
            params,
        ))
    }

    pub fn from_prepared(
        ellipsoids: Vec<PreparedEllipsoid>,
        precision: Precision,
        params: BlendParams,
    ) -> Self {
        Self {
            ellipsoids,
            precision,
            params,
        }
    }

    pub fn params(&self) -> &BlendParams {
        &self.params
    }

    pub fn ellipsoids(&self) -> &[PreparedEllipsoid] {
        &self.ellipsoids
    }

    /// `f(y)` for a point observed with unit normal `n`.
    pub fn value(&self, y: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
        let nu2 = self.params.nu * self.params.nu;
        self.ellipsoids
            .iter()
            .map(|e| {
                let r = y - e.surface_point(n);
                (-self.precision.mahalanobis_sq(&r) / nu2).exp()
            })
            .sum()
    }

    /// `∇_y f` at fixed normal.
    pub fn gradient(&self, y: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
        let nu2 = self.params.nu * self.params.nu;
        self.ellipsoids.iter().fold(Vector3::zeros(), |acc, e| {
            let r = y - e.surface_point(n);
            let f = (-self.precision.mahalanobis_sq(&r) / nu2).exp();
            acc - self.precision.inverse() * r * (2.0 * f / nu2)
        })
    }
}
