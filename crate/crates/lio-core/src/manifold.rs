//! SO(3) primitives: skew matrices, exponential/logarithm maps, and the
//! right Jacobian of the exponential.
//!
//! Conventions used throughout the crate:
//!
//! - Rotations are Hamilton unit quaternions acting on column vectors as
//!   `R * v`, stored behind the [`Rotation`] newtype which renormalizes after
//!   every composition so long products cannot drift off the manifold.
//! - Perturbations are *right* perturbations: a rotation estimate `R` with
//!   local error `dtheta` represents the true rotation `R * exp_so3(dtheta)`.
//! - [`log_so3`] returns the principal axis-angle with norm <= pi. At exactly
//!   pi the axis sign is ambiguous (`q` and `-q` encode the same rotation);
//!   we deterministically flip the axis so that its largest-magnitude
//!   component is positive, which matches recovering the axis from the
//!   largest diagonal element of the rotation matrix.

use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Below this angle (radians) trigonometric coefficient ratios switch to
/// their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric (cross-product) matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// A rotation in SO(3) backed by a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion components in `(w, x, y, z)` order,
    /// normalizing them.
    pub fn from_quaternion_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Builds a rotation from components that are already unit-norm (e.g.
    /// parsed back from our own serialized output). Skipping the
    /// renormalization keeps deserialize → serialize byte-identical; the
    /// caller vouches the input came from a unit quaternion.
    pub fn from_quaternion_wxyz_trusted(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation(UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(q)
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.0
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Composition `self * rhs`, renormalized so that chained products stay
    /// on the unit sphere to machine precision.
    pub fn compose(&self, rhs: &Rotation) -> Rotation {
        let raw = self.0.into_inner() * rhs.0.into_inner();
        Rotation(UnitQuaternion::new_normalize(raw))
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.inverse())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotates by the inverse without forming it: `R^T * v`.
    pub fn rotate_inv(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Deviation of the underlying quaternion norm from one; exposed so
    /// tests can assert the renormalization invariant.
    pub fn norm_error(&self) -> f64 {
        (self.0.as_ref().norm() - 1.0).abs()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotate(&v)
    }
}

/// Exponential map from axis-angle (radians) to a rotation.
///
/// Uses the closed-form half-angle quaternion; below [`SMALL_ANGLE`] the
/// `sin(t/2)/t` ratio switches to its second-order Taylor expansion.
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta = phi.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        // cos(t/2) ~ 1 - t^2/8, sin(t/2)/t ~ 1/2 - t^2/48
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    let v = phi * s;
    Rotation(UnitQuaternion::new_normalize(Quaternion::new(
        w, v.x, v.y, v.z,
    )))
}

/// Principal logarithm: axis-angle with norm <= pi.
///
/// At exactly pi the sign tie-break makes the axis component with the
/// largest magnitude positive (see module docs).
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let q = r.0.quaternion();
    // Work in the w >= 0 hemisphere so the angle is the principal one.
    let (w, mut v) = if q.w < 0.0 {
        (-q.w, -Vector3::new(q.i, q.j, q.k))
    } else {
        (q.w, Vector3::new(q.i, q.j, q.k))
    };
    let vn = v.norm();
    if vn < 1e-12 {
        // theta ~ 2*vn; phi = 2*v/w with w ~ 1. Error is O(vn^3).
        return v * 2.0;
    }
    if w == 0.0 {
        // theta == pi exactly: q and -q coincide, so pick the deterministic
        // axis sign (largest-magnitude component positive).
        let mut dominant = 0;
        for i in 1..3 {
            if v[i].abs() > v[dominant].abs() {
                dominant = i;
            }
        }
        if v[dominant] < 0.0 {
            v = -v;
        }
    }
    let theta = 2.0 * vn.atan2(w);
    v * (theta / vn)
}

/// Right Jacobian of the SO(3) exponential map:
///
/// `A(t) = I - (1 - cos|t|)/|t|^2 * skew(t) + (|t| - sin|t|)/|t|^3 * skew(t)^2`
///
/// so that `exp_so3(t + d) ~ exp_so3(t) * exp_so3(A(t) * d)` for small `d`.
/// Below [`SMALL_ANGLE`] both coefficients use their Taylor expansions,
/// giving `A(t) ~ I - skew(t)/2 + skew(t)^2/6`.
pub fn a_matrix(theta: &Vector3<f64>) -> Matrix3<f64> {
    let t = theta.norm();
    let (c1, c2) = if t < SMALL_ANGLE {
        (0.5 - t * t / 24.0, 1.0 / 6.0 - t * t / 120.0)
    } else {
        // 1 - cos t = 2 sin^2(t/2) avoids cancellation for small-ish t.
        let half_sin = (0.5 * t).sin();
        (2.0 * half_sin * half_sin / (t * t), (t - t.sin()) / (t * t * t))
    };
    let sk = skew(theta);
    Matrix3::identity() - sk * c1 + sk * sk * c2
}

/// Inverse of the *left* Jacobian `A(phi)^T`, i.e. `(A(phi)^T)^{-1}`.
///
/// This is the curvature correction that appears in Jacobians of residuals
/// of the form `log_so3(Z^T * f(x))` when the residual is not small. `A` is
/// invertible for all principal axis-angles (norm <= pi < 2*pi).
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    a_matrix(phi)
        .transpose()
        .try_inverse()
        .expect("A(phi) is invertible for |phi| <= pi")
}
