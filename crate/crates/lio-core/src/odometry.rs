//! Relative-pose measurements from an external odometer (e.g. wheel-leg
//! kinematics) and their residual rows.
//!
//! The odometer reports poses `^M T_O(t)` in its own drifting frame `{M}`.
//! Absolute poses in `{M}` are meaningless to the filter, so consecutive
//! reports are differenced into the relative transform between the odometer
//! frames at two fusion times; `{M}` cancels out. With `T_IO` the
//! odometer-IMU extrinsic, the predicted measurement given world-frame IMU
//! poses at times `k-1` and `k` is
//!
//! ```text
//! z_rot = (R_{k-1} R_io)^T * R_k R_io
//! z_pos = (R_{k-1} R_io)^T * ((R_k - R_{k-1}) p_io + p_k - p_{k-1})
//! ```
//!
//! Residuals: `r_rot = log_so3(z_rot_pred^T * z_rot)`, `r_pos = z_pos -
//! z_pos_pred`. Only the *current* pose and the odometer extrinsics carry
//! error; the previous pose enters as a fixed linearization snapshot. The
//! rotation rows include the inverse-left-Jacobian curvature factor so they
//! agree with central finite differences even far from convergence.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::manifold::{exp_so3, left_jacobian_inv, log_so3, skew, Rotation};
use crate::state::{idx, NavState, STATE_DIM};

/// One odometer pose report `^M T_O` at time `t`.
#[derive(Clone, Copy, Debug)]
pub struct OdomPose {
    pub t: f64,
    pub rot: Rotation,
    pub pos: Vector3<f64>,
}

/// Noise model applied to differenced odometry.
#[derive(Clone, Copy, Debug)]
pub struct OdomNoiseModel {
    /// Rotation noise per relative measurement (rad, isotropic).
    pub sigma_rot: f64,
    /// Translation noise per meter traveled (unitless fraction).
    pub sigma_pos_per_m: f64,
    /// Lower bound on translation noise (m).
    pub sigma_pos_floor: f64,
}

/// Relative pose between the odometer frames at `t0` and `t1`, with the
/// covariance assigned by the noise model.
#[derive(Clone, Copy, Debug)]
pub struct RelPoseMeasurement {
    pub t0: f64,
    pub t1: f64,
    pub rot: Rotation,
    pub pos: Vector3<f64>,
    pub cov_rot: Matrix3<f64>,
    pub cov_pos: Matrix3<f64>,
}

/// Fixed linearization snapshot of the previous fusion pose.
#[derive(Clone, Copy, Debug)]
pub struct PoseSnapshot {
    pub rot: Rotation,
    pub pos: Vector3<f64>,
}

/// The six odometry rows: rotation and translation residuals with their
/// Jacobians over the full error state.
#[derive(Clone, Debug)]
pub struct OdomResidualRows {
    pub r_rot: Vector3<f64>,
    pub r_pos: Vector3<f64>,
    /// Innovation-convention Jacobians: `r ~ H * dx`.
    pub h_rot: SMatrix<f64, 3, STATE_DIM>,
    pub h_pos: SMatrix<f64, 3, STATE_DIM>,
    pub cov_rot: Matrix3<f64>,
    pub cov_pos: Matrix3<f64>,
}

#[derive(Debug, Error)]
pub enum OdomError {
    #[error("cannot interpolate at t={t:.6}: buffer covers [{lo:.6}, {hi:.6}] (+/- {tol:.3}s)")]
    OutOfRange { t: f64, lo: f64, hi: f64, tol: f64 },
    #[error("need at least two odometry poses, got {n}")]
    TooFew { n: usize },
}

/// Pose at time `t` by geodesic interpolation between the bracketing
/// samples (constant-rate rotation, linear translation). Up to `extrap_tol`
/// seconds beyond either end the boundary interval is extrapolated at
/// constant velocity; beyond that an error names the uncovered range.
pub fn interpolate_pose(buf: &[OdomPose], t: f64, extrap_tol: f64) -> Result<OdomPose, OdomError> {
    if buf.len() < 2 {
        return Err(OdomError::TooFew { n: buf.len() });
    }
    let lo = buf[0].t;
    let hi = buf[buf.len() - 1].t;
    if t < lo - extrap_tol || t > hi + extrap_tol {
        return Err(OdomError::OutOfRange {
            t,
            lo,
            hi,
            tol: extrap_tol,
        });
    }
    // Bracketing interval; boundary intervals serve extrapolation too.
    let j = buf
        .partition_point(|p| p.t <= t)
        .clamp(1, buf.len() - 1);
    let a = &buf[j - 1];
    let b = &buf[j];
    let span = b.t - a.t;
    let s = if span > 0.0 { (t - a.t) / span } else { 0.0 };
    let dr = log_so3(&a.rot.inverse().compose(&b.rot));
    Ok(OdomPose {
        t,
        rot: a.rot.compose(&exp_so3(&(dr * s))),
        pos: a.pos + (b.pos - a.pos) * s,
    })
}

/// Differences two odometer poses into a relative-pose measurement.
/// Covariances come from the noise model; translation noise scales with the
/// measured step length but never drops below the floor.
pub fn relative_measurement(
    a: &OdomPose,
    b: &OdomPose,
    noise: &OdomNoiseModel,
) -> RelPoseMeasurement {
    debug_assert!(a.t < b.t, "relative measurement needs increasing stamps");
    let rot = a.rot.inverse().compose(&b.rot);
    let pos = a.rot.rotate_inv(&(b.pos - a.pos));
    let sigma_pos = (noise.sigma_pos_per_m * pos.norm()).max(noise.sigma_pos_floor);
    RelPoseMeasurement {
        t0: a.t,
        t1: b.t,
        rot,
        pos,
        cov_rot: Matrix3::identity() * noise.sigma_rot * noise.sigma_rot,
        cov_pos: Matrix3::identity() * sigma_pos * sigma_pos,
    }
}

/// Predicted relative measurement given the previous snapshot and the
/// current state.
pub fn predict_relative(prev: &PoseSnapshot, x: &NavState) -> (Rotation, Vector3<f64>) {
    let r_prev_io = prev.rot.compose(&x.rot_io);
    let z_rot = r_prev_io.inverse().compose(&x.rot.compose(&x.rot_io));
    let p1 = x.rot.rotate(&x.pos_io) - prev.rot.rotate(&x.pos_io) + x.pos - prev.pos;
    let z_pos = r_prev_io.rotate_inv(&p1);
    (z_rot, z_pos)
}

/// Evaluates the odometry residuals and Jacobians at `x`.
pub fn residual_rows(
    m: &RelPoseMeasurement,
    prev: &PoseSnapshot,
    x: &NavState,
) -> OdomResidualRows {
    let (z_rot_pred, z_pos_pred) = predict_relative(prev, x);
    let r_rot = log_so3(&z_rot_pred.inverse().compose(&m.rot));
    let r_pos = m.pos - z_pos_pred;

    let r_io = x.rot_io.matrix();
    let rk = x.rot.matrix();
    let rk1 = prev.rot.matrix();
    let rk1_io_t = (prev.rot.compose(&x.rot_io)).matrix().transpose();
    // Curvature factor of log(Z^T * f(x)) at non-zero residual.
    let jl_inv = left_jacobian_inv(&r_rot);

    let mut h_rot = SMatrix::<f64, 3, STATE_DIM>::zeros();
    h_rot
        .fixed_view_mut::<3, 3>(0, idx::THETA)
        .copy_from(&(jl_inv * r_io.transpose()));
    h_rot
        .fixed_view_mut::<3, 3>(0, idx::THETA_IO)
        .copy_from(&(jl_inv * (Matrix3::identity() - z_rot_pred.matrix().transpose())));

    let p1 = x.rot.rotate(&x.pos_io) - prev.rot.rotate(&x.pos_io) + x.pos - prev.pos;
    let mut h_pos = SMatrix::<f64, 3, STATE_DIM>::zeros();
    h_pos
        .fixed_view_mut::<3, 3>(0, idx::THETA)
        .copy_from(&(-r_io.transpose() * rk1.transpose() * rk * skew(&x.pos_io)));
    h_pos
        .fixed_view_mut::<3, 3>(0, idx::POS)
        .copy_from(&rk1_io_t);
    h_pos
        .fixed_view_mut::<3, 3>(0, idx::THETA_IO)
        .copy_from(&skew(&(r_io.transpose() * rk1.transpose() * p1)));
    h_pos
        .fixed_view_mut::<3, 3>(0, idx::POS_IO)
        .copy_from(&(rk1_io_t * (rk - rk1)));

    OdomResidualRows {
        r_rot,
        r_pos,
        h_rot,
        h_pos,
        cov_rot: m.cov_rot,
        cov_pos: m.cov_pos,
    }
}
