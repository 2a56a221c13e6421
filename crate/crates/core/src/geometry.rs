//! Rotations, rigid transforms, and screw-axis exponential/log maps.
//!
//! Pose convention: a [`RigidTransform`] maps world to camera,
//! `x_c = R * x_w + t`. The camera center in world coordinates is
//! therefore `-R^T * t`.
//!
//! Numerical notes:
//! * `exp_so3` switches to a two-term Taylor expansion of the Rodrigues
//!   coefficients below [`SMALL_ANGLE`] rad; the closed forms lose digits
//!   to cancellation there.
//! * `log_so3` recovers the angle with `atan2(|skew part|, (trace-1)/2)`,
//!   which stays accurate for both tiny angles and angles approaching pi.
//!   Within [`NEAR_PI_MARGIN`] of pi the axis itself is unrecoverable from
//!   the skew part and the call fails with `AngleNearPi`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Below this angle (rad) the Rodrigues coefficients use Taylor forms.
pub const SMALL_ANGLE: f64 = 1e-6;

/// `log_so3` refuses angles within this margin (rad) of pi.
pub const NEAR_PI_MARGIN: f64 = 1e-3;

/// Rotation matrix in SO(3), world-to-camera when used inside a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `self` after `other`: (self ∘ other)(x) = self(other(x)).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Largest deviation from orthonormality, `max|R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }
}

/// Rigid transform `x_c = R * x_w + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(x) + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            translation: -rt.apply(&self.translation),
            rotation: rt,
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().translation
    }
}

/// Screw axis (omega; v): rotation generator first, translation second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewAxis {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl ScrewAxis {
    pub fn zero() -> Self {
        ScrewAxis {
            omega: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        ScrewAxis {
            omega: Vector3::new(s[0], s[1], s[2]),
            v: Vector3::new(s[3], s[4], s[5]),
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues coefficients (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3).
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Rodrigues formula, `R = I + A [w]x + B [w]x^2`.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let k = skew(omega);
    Rotation(Matrix3::identity() + a * k + b * (k * k))
}

/// Inverse of [`exp_so3`]. Fails with `AngleNearPi` when the rotation
/// angle is within [`NEAR_PI_MARGIN`] of pi.
pub fn log_so3(r: &Rotation) -> Result<Vector3<f64>> {
    let m = r.matrix();
    // w = sin(theta) * axis; c = cos(theta).
    let w = 0.5 * vee(&(m - m.transpose()));
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = w.norm();
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(Error::AngleNearPi { angle: theta });
    }
    let factor = if theta < SMALL_ANGLE {
        // theta / sin(theta) without the 0/0.
        1.0 + theta * theta / 6.0
    } else {
        theta / s
    };
    Ok(w * factor)
}

/// Left Jacobian of SO(3): `V = I + B [w]x + C [w]x^2`.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let k = skew(omega);
    Matrix3::identity() + b * k + c * (k * k)
}

/// Screw-axis exponential: `R = exp_so3(omega)`, `t = V(omega) v`.
pub fn exp_se3(s: &ScrewAxis) -> RigidTransform {
    RigidTransform {
        rotation: exp_so3(&s.omega),
        translation: left_jacobian(&s.omega) * s.v,
    }
}

/// Inverse of [`exp_se3`]; propagates `AngleNearPi` from the rotation log.
pub fn log_se3(t: &RigidTransform) -> Result<ScrewAxis> {
    let omega = log_so3(&t.rotation)?;
    let v = left_jacobian(&omega)
        .lu()
        .solve(&t.translation)
        .ok_or(Error::NonFinite("left Jacobian solve in log_se3"))?;
    Ok(ScrewAxis { omega, v })
}

/// Gram-Schmidt 6D rotation: `a = (a1; a2)`, `b1 = a1/|a1|`,
/// `b2 = normalize(a2 - (b1.a2) b1)`, `b3 = b1 x b2`, columns `(b1,b2,b3)`.
pub fn rot6d_to_rotation(a: &[f64; 6]) -> Result<Rotation> {
    let a1 = Vector3::new(a[0], a[1], a[2]);
    let a2 = Vector3::new(a[3], a[4], a[5]);
    let n1 = a1.norm();
    if n1 < 1e-9 {
        return Err(Error::DegenerateBasis("first basis vector is near zero"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1.dot(&a2) * b1;
    let n2 = u2.norm();
    if n2 < 1e-9 * a2.norm().max(1.0) {
        return Err(Error::DegenerateBasis(
            "second basis vector is near parallel to the first",
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

/// First two columns of the rotation, the canonical 6D encoding.
pub fn rotation_to_rot6d(r: &Rotation) -> [f64; 6] {
    let m = r.matrix();
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Geodesic angle (rad) between two rotations, computed from
/// `Q = a b^T` via `atan2(|skew(Q)|, (trace(Q)-1)/2)`. Unlike the plain
/// `acos` form this keeps full precision for nearly identical inputs.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let q = a.matrix() * b.matrix().transpose();
    let w = 0.5 * vee(&(q - q.transpose()));
    let c = (q.trace() - 1.0) * 0.5;
    w.norm().atan2(c)
}
