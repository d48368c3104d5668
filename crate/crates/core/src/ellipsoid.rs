//! Closed-form geometry of a single ellipsoid.
//!
//! An ellipsoid is stored by its semi-axes `(a, b, c)`, a rotation `R` and a
//! centre `t`. The implicit 4x4 form
//!
//! ```text
//!     Q = | R D R^T        -R D R^T t        |      D = diag(a^-2, b^-2, c^-2)
//!         | -t^T R D R^T    t^T R D R^T t - 1 |
//! ```
//!
//! is assembled on demand. The datum correspondence picks the unique surface
//! point whose outward normal has the same direction as an observed normal:
//! `x = lambda R D^-1 R^T n + t` with `lambda = (n^T R D^-1 R^T n)^(-1/2)`.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::covariance::Precision;
use crate::error::{Error, Result};

/// Normals closer than this to unit length are silently re-normalized.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

const DEGENERATE_NORM: f64 = 1e-9;
const ORTHONORMAL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    semi_axes: Vector3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Ellipsoid {
    /// Builds an ellipsoid, checking positive semi-axes and a proper rotation.
    pub fn new(
        semi_axes: Vector3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !semi_axes.iter().all(|&v| v.is_finite() && v > 0.0) {
            return Err(Error::InvalidEllipsoid(format!(
                "semi-axes must be positive, got {:?}",
                semi_axes.as_slice()
            )));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(defect < ORTHONORMAL_TOLERANCE) || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidEllipsoid(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidEllipsoid("non-finite centre".into()));
        }
        Ok(Self {
            semi_axes,
            rotation,
            translation,
        })
    }

    pub fn sphere(radius: f64, center: Vector3<f64>) -> Result<Self> {
        Self::new(Vector3::repeat(radius), Matrix3::identity(), center)
    }

    /// Axis-aligned ellipsoid.
    pub fn aligned(a: f64, b: f64, c: f64, center: Vector3<f64>) -> Result<Self> {
        Self::new(Vector3::new(a, b, c), Matrix3::identity(), center)
    }

    /// Skips validation; used for ellipsoids produced by composing valid
    /// rigid motions.
    pub(crate) fn from_parts_unchecked(
        semi_axes: Vector3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            semi_axes,
            rotation,
            translation,
        }
    }

    pub fn semi_axes(&self) -> &Vector3<f64> {
        &self.semi_axes
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `a >= b = c`, the shape used by the body model.
    pub fn is_spheroid(&self) -> bool {
        let (a, b, c) = (self.semi_axes.x, self.semi_axes.y, self.semi_axes.z);
        a >= b && (b - c).abs() <= 1e-12 * b.max(1.0)
    }

    pub fn d_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.semi_axes.map(|s| 1.0 / (s * s)))
    }

    /// `Q̄ = R D R^T`.
    pub fn q_bar(&self) -> Matrix3<f64> {
        let m = self.rotation * self.d_matrix() * self.rotation.transpose();
        (m + m.transpose()) * 0.5
    }

    /// `q = -Q̄ t`.
    pub fn q_vec(&self) -> Vector3<f64> {
        -(self.q_bar() * self.translation)
    }

    pub fn q44(&self) -> f64 {
        self.translation.dot(&(self.q_bar() * self.translation)) - 1.0
    }

    /// The full symmetric 4x4 matrix `Q`.
    pub fn q_matrix(&self) -> Matrix4<f64> {
        let qb = self.q_bar();
        let q = self.q_vec();
        let mut out = Matrix4::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&qb);
        out.fixed_view_mut::<3, 1>(0, 3).copy_from(&q);
        out.fixed_view_mut::<1, 3>(3, 0).copy_from(&q.transpose());
        out[(3, 3)] = self.q44();
        out
    }

    /// `R D^-1 R^T`.
    pub fn inverse_shape(&self) -> Matrix3<f64> {
        let d_inv = Matrix3::from_diagonal(&self.semi_axes.map(|s| s * s));
        let m = self.rotation * d_inv * self.rotation.transpose();
        (m + m.transpose()) * 0.5
    }

    pub fn prepare(&self) -> PreparedEllipsoid {
        PreparedEllipsoid {
            center: self.translation,
            inverse_shape: self.inverse_shape(),
            q_bar: self.q_bar(),
        }
    }

    /// Surface point whose outward normal points along `normal`.
    pub fn correspond(&self, normal: &Vector3<f64>) -> Result<Correspondence> {
        let norm = normal.norm();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateNormal);
        }
        Ok(self.prepare().correspond(&(normal / norm)))
    }

    /// `q(Y) = Y^T Q Y`: -1 at the centre, 0 on the surface, positive outside.
    pub fn algebraic_distance(&self, y: &Vector3<f64>) -> f64 {
        let u = y - self.translation;
        u.dot(&(self.q_bar() * u)) - 1.0
    }

    /// Squared Mahalanobis distance between the datum point and its
    /// correspondence on this ellipsoid.
    pub fn datum_distance(&self, datum: &Datum, sigma: &Matrix3<f64>) -> Result<f64> {
        let precision = Precision::from_covariance(sigma)?;
        let x = self.prepare().correspond(&datum.normal).surface_point;
        Ok(precision.mahalanobis_sq(&(datum.point - x)))
    }
}

/// Precomputed matrices for repeated correspondence queries against one
/// posed ellipsoid.
#[derive(Debug, Clone)]
pub struct PreparedEllipsoid {
    pub center: Vector3<f64>,
    pub inverse_shape: Matrix3<f64>,
    pub q_bar: Matrix3<f64>,
}

impl PreparedEllipsoid {
    /// `normal` must already be unit length.
    #[inline]
    pub fn correspond(&self, normal: &Vector3<f64>) -> Correspondence {
        let m = self.inverse_shape * normal;
        let scale = 1.0 / normal.dot(&m).sqrt();
        let offset = m * scale;
        Correspondence {
            surface_point: self.center + offset,
            surface_normal: self.q_bar * offset,
            scale,
        }
    }

    #[inline]
    pub fn surface_point(&self, normal: &Vector3<f64>) -> Vector3<f64> {
        let m = self.inverse_shape * normal;
        self.center + m / normal.dot(&m).sqrt()
    }

    #[inline]
    pub fn algebraic_distance(&self, y: &Vector3<f64>) -> f64 {
        let u = y - self.center;
        u.dot(&(self.q_bar * u)) - 1.0
    }

    /// Point on the surface along the ray from the centre through `y`.
    ///
    /// Its distance to `y` is a monotone function of the algebraic distance,
    /// which makes it the points-only residual of the algebraic baseline.
    #[inline]
    pub fn radial_point(&self, y: &Vector3<f64>) -> Vector3<f64> {
        let u = y - self.center;
        let s = u.dot(&(self.q_bar * u)).sqrt();
        if s > 1e-12 {
            self.center + u / s
        } else {
            self.center
        }
    }

    /// Correspondence together with its first-order response to a rigid
    /// motion of the ellipsoid.
    pub fn datum_attachment(&self, normal: &Vector3<f64>) -> Attachment {
        let m = self.inverse_shape * normal;
        let scale = 1.0 / normal.dot(&m).sqrt();
        let u = m * scale;
        Attachment {
            point: self.center + u,
            sensitivity: (self.inverse_shape - u * u.transpose()) * scale,
            lever: Lever::Direction(*normal),
        }
    }

    pub fn radial_attachment(&self, y: &Vector3<f64>) -> Attachment {
        let u = y - self.center;
        let qu = self.q_bar * u;
        let s = u.dot(&qu).sqrt().max(1e-12);
        Attachment {
            point: self.center + u / s,
            sensitivity: Matrix3::identity() / s - u * qu.transpose() / (s * s * s),
            lever: Lever::Point(*y),
        }
    }
}

/// An observation: a 3-D point with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Datum {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Datum {
    /// Re-normalizes normals within [`NORMAL_TOLERANCE`] of unit length and
    /// rejects anything farther off.
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let norm = normal.norm();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateNormal);
        }
        if (norm - 1.0).abs() > NORMAL_TOLERANCE || !point.iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedNormal(norm));
        }
        Ok(Self {
            point,
            normal: normal / norm,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub surface_point: Vector3<f64>,
    /// Unnormalized gradient `p = Q̄ x + q`, parallel to the query normal.
    pub surface_normal: Vector3<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
enum Lever {
    /// The attachment depends on a world-fixed direction.
    Direction(Vector3<f64>),
    /// The attachment depends on a world-fixed point.
    Point(Vector3<f64>),
}

/// A model point attached to an ellipsoid, with the linear map needed to
/// differentiate it under rigid motion of that ellipsoid.
#[derive(Debug, Clone, Copy)]
pub struct Attachment {
    pub point: Vector3<f64>,
    sensitivity: Matrix3<f64>,
    lever: Lever,
}

impl Attachment {
    /// Velocity of the attached point when the ellipsoid rotates with unit
    /// angular velocity `axis` about the world point `pivot`.
    #[inline]
    pub fn rotation_derivative(&self, axis: &Vector3<f64>, pivot: &Vector3<f64>) -> Vector3<f64> {
        let lever = match self.lever {
            Lever::Direction(n) => axis.cross(&n),
            Lever::Point(y) => axis.cross(&(y - pivot)),
        };
        axis.cross(&(self.point - pivot)) - self.sensitivity * lever
    }

    /// Velocity of the attached point when the ellipsoid translates along `dir`.
    #[inline]
    pub fn translation_derivative(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        match self.lever {
            Lever::Direction(_) => *dir,
            Lever::Point(_) => dir - self.sensitivity * dir,
        }
    }
}
