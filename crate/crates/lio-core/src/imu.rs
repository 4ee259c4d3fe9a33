//! Strapdown IMU propagation of the navigation state and its covariance.
//!
//! Discrete model over one sample interval `dt` (zero-order hold on the
//! bias-corrected measurements `w = gyro - bias_gyro`, `a = acc - bias_acc`):
//!
//! ```text
//! a_world = R * exp_so3(w*dt/2) * a + gravity      (midpoint attitude)
//! rot'    = rot * exp_so3(w*dt)
//! vel'    = vel + a_world * dt
//! pos'    = pos + vel * dt + a_world * dt^2 / 2
//! ```
//!
//! Rotating the specific force by the half-step attitude makes the
//! integrator second-order accurate (the closed-form circular-motion test
//! below fails by millimeters over seconds without it). Biases, gravity and
//! extrinsics are random-walk / constant states.
//!
//! [`transition_matrices`] returns the *exact* Jacobian of this discrete map
//! with respect to the error state, plus the noise input matrix `G` mapping
//! `[n_g, n_wg, n_a, n_wa]` (white gyro/accel noise and bias random walks,
//! continuous-time densities) so that the covariance propagates as
//! `P' = Phi P Phi^T + G Q G^T dt`.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::manifold::{a_matrix, exp_so3, skew};
use crate::state::{idx, CovMatrix, NavState};

/// One IMU sample. The sample at time `t` is held over `[t, t_next)`.
#[derive(Clone, Copy, Debug)]
pub struct ImuSample {
    pub t: f64,
    /// Angular rate measurement (rad/s).
    pub gyro: Vector3<f64>,
    /// Specific force measurement (m/s^2).
    pub acc: Vector3<f64>,
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug)]
pub struct ImuNoise {
    /// Gyro white noise (rad/s/sqrt(Hz)).
    pub sigma_gyro: f64,
    /// Accelerometer white noise (m/s^2/sqrt(Hz)).
    pub sigma_acc: f64,
    /// Gyro bias random walk (rad/s^2/sqrt(Hz)).
    pub sigma_gyro_walk: f64,
    /// Accelerometer bias random walk (m/s^3/sqrt(Hz)).
    pub sigma_acc_walk: f64,
}

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("propagation step must have positive dt, got {dt}")]
    NonPositiveDt { dt: f64 },
}

/// Error-state transition `phi` and noise input `noise_input` for one step.
#[derive(Clone, Debug)]
pub struct Transition {
    pub phi: CovMatrix,
    /// 30x12 mapping of `[n_g, n_wg, n_a, n_wa]` into the error state.
    pub noise_input: SMatrix<f64, 30, 12>,
}

/// Propagates the full state through one IMU sample.
pub fn propagate_state(x: &NavState, u: &ImuSample, dt: f64) -> Result<NavState, ImuError> {
    if dt <= 0.0 {
        return Err(ImuError::NonPositiveDt { dt });
    }
    let w = u.gyro - x.bias_gyro;
    let a = u.acc - x.bias_acc;
    let a_mid = exp_so3(&(w * (0.5 * dt))).rotate(&a);
    let a_world = x.rot.rotate(&a_mid) + x.gravity;
    let mut next = x.clone();
    next.rot = x.rot.compose(&exp_so3(&(w * dt)));
    next.vel = x.vel + a_world * dt;
    next.pos = x.pos + x.vel * dt + a_world * (0.5 * dt * dt);
    Ok(next)
}

/// Exact error-state Jacobian `Phi` and noise input `G` of
/// [`propagate_state`] linearized about `x`.
pub fn transition_matrices(x: &NavState, u: &ImuSample, dt: f64) -> Result<Transition, ImuError> {
    if dt <= 0.0 {
        return Err(ImuError::NonPositiveDt { dt });
    }
    let w = u.gyro - x.bias_gyro;
    let a = u.acc - x.bias_acc;
    let r = x.rot.matrix();
    let m_half = exp_so3(&(w * (0.5 * dt))).matrix();
    let b = r * m_half;
    let a_mid = m_half * a;
    let eye = Matrix3::identity();

    let mut phi = CovMatrix::identity();
    let mut set = |row: usize, col: usize, block: Matrix3<f64>| {
        phi.fixed_view_mut::<3, 3>(row, col).copy_from(&block);
    };
    // Attitude.
    set(idx::THETA, idx::THETA, exp_so3(&(w * dt)).matrix().transpose());
    set(idx::THETA, idx::BG, -a_matrix(&(w * dt)) * dt);
    // Sensitivity of the midpoint-rotated specific force to gyro error.
    let n = 0.5 * b * skew(&a) * a_matrix(&(w * (0.5 * dt)));
    // Velocity.
    set(idx::VEL, idx::THETA, -r * skew(&a_mid) * dt);
    set(idx::VEL, idx::BG, n * (dt * dt));
    set(idx::VEL, idx::BA, -b * dt);
    set(idx::VEL, idx::GRAV, eye * dt);
    // Position.
    set(idx::POS, idx::THETA, -r * skew(&a_mid) * (0.5 * dt * dt));
    set(idx::POS, idx::VEL, eye * dt);
    set(idx::POS, idx::BG, n * (0.5 * dt * dt * dt));
    set(idx::POS, idx::BA, -b * (0.5 * dt * dt));
    set(idx::POS, idx::GRAV, eye * (0.5 * dt * dt));

    let mut g = SMatrix::<f64, 30, 12>::zeros();
    let mut set_g = |row: usize, col: usize, block: Matrix3<f64>| {
        g.fixed_view_mut::<3, 3>(row, col).copy_from(&block);
    };
    // Columns: n_g 0..3, n_wg 3..6, n_a 6..9, n_wa 9..12.
    set_g(idx::THETA, 0, -a_matrix(&(w * dt)));
    set_g(idx::VEL, 0, n * dt);
    set_g(idx::POS, 0, n * (0.5 * dt * dt));
    set_g(idx::VEL, 6, -b);
    set_g(idx::POS, 6, -b * (0.5 * dt));
    set_g(idx::BG, 3, eye);
    set_g(idx::BA, 9, eye);

    Ok(Transition {
        phi,
        noise_input: g,
    })
}

/// Propagates the covariance through one step:
/// `P' = Phi P Phi^T + G Q G^T dt`, re-symmetrized.
pub fn propagate_covariance(
    p: &CovMatrix,
    tr: &Transition,
    noise: &ImuNoise,
    dt: f64,
) -> CovMatrix {
    let mut q = SMatrix::<f64, 12, 12>::zeros();
    for i in 0..3 {
        q[(i, i)] = noise.sigma_gyro * noise.sigma_gyro;
        q[(3 + i, 3 + i)] = noise.sigma_gyro_walk * noise.sigma_gyro_walk;
        q[(6 + i, 6 + i)] = noise.sigma_acc * noise.sigma_acc;
        q[(9 + i, 9 + i)] = noise.sigma_acc_walk * noise.sigma_acc_walk;
    }
    let p_next = tr.phi * p * tr.phi.transpose() + tr.noise_input * q * tr.noise_input.transpose() * dt;
    (p_next + p_next.transpose()) * 0.5
}
