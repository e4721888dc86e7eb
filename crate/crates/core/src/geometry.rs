//! Pinhole intrinsics and rigid-body poses.
//!
//! Pixel convention: `(u, v)` with `u` the column and `v` the row, origin at
//! the top-left pixel, pixel centres at integer coordinates. Depth is the
//! camera-frame Z coordinate, not the ray length.

use nalgebra::{Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument("non-finite intrinsics".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        Ok(k)
    }

    /// Checks that the principal point lies inside a `width × height` frame.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {width}x{height} frame",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Projects a camera-frame point. The caller checks `p.z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// A rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.check()?;
        Ok(pose)
    }

    /// Like [`RigidPose::new`] but projects a nearly-orthonormal matrix
    /// (error up to `1e-3`) onto the closest rotation first.
    pub fn new_orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > 1e-3 || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "matrix is not close to a rotation (orthogonality error {err:.3e})"
            )));
        }
        let r = Rotation3::from_matrix_eps(&rotation, 1e-15, 100, Rotation3::identity());
        Self::new(*r.matrix(), translation)
    }

    fn check(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pose".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        let det = self.rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthonormal (error {ortho:.3e}, det {det})"
            )));
        }
        Ok(())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `axis_angle` (axis scaled by angle in radians) followed by translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_scaled_axis(axis_angle).matrix(),
            translation,
        }
    }

    /// Exponential map of a twist `[ρ; ω]` (translation part first).
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = omega.cross_matrix();
        let w2 = w * w;
        let (a, b) = if theta < 1e-8 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let v = Matrix3::identity() + w * a + w2 * b;
        Self {
            rotation: *Rotation3::from_scaled_axis(omega).matrix(),
            translation: v * rho,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = 0.5
            * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        let c = (r.trace() - 1.0) / 2.0;
        s.atan2(c)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.rotation - Matrix3::identity()).abs().max() <= tol
            && self.translation.abs().max() <= tol
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_rows(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        Self::new(r, t).or_else(|_| Self::new_orthonormalized(r, t))
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidPose> for PoseRepr {
    fn from(p: RigidPose) -> Self {
        let r = p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for RigidPose {
    type Error = Error;

    fn try_from(p: PoseRepr) -> Result<Self> {
        let r = p.rotation;
        RigidPose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(p.translation),
        )
    }
}
