//! Full navigation state and its 30-dimensional error-state tangent space.
//!
//! The error state uses one fixed ordering everywhere in the crate (every
//! Jacobian column, covariance row, and stacked measurement refers to it):
//!
//! | block        | indices | meaning                                   |
//! |--------------|---------|-------------------------------------------|
//! | `dtheta`     | 0..3    | attitude (right perturbation of `rot`)    |
//! | `dp`         | 3..6    | position                                  |
//! | `dv`         | 6..9    | velocity                                  |
//! | `db_g`       | 9..12   | gyroscope bias                            |
//! | `db_a`       | 12..15  | accelerometer bias                        |
//! | `dg`         | 15..18  | gravity vector                            |
//! | `dtheta_il`  | 18..21  | LiDAR-IMU rotation extrinsic              |
//! | `dp_il`      | 21..24  | LiDAR-IMU translation extrinsic           |
//! | `dtheta_io`  | 24..27  | odometer-IMU rotation extrinsic           |
//! | `dp_io`      | 27..30  | odometer-IMU translation extrinsic        |
//!
//! Rotation blocks compose on the right: `rot_true = rot * exp_so3(dtheta)`.
//! All other blocks are plain additive.

use nalgebra::{SMatrix, SVector, Vector3};

use crate::manifold::{exp_so3, log_so3, Rotation};

/// Dimension of the error state.
pub const STATE_DIM: usize = 30;

/// Standard gravity magnitude used by the simulator and initializer (m/s^2).
pub const STANDARD_GRAVITY: f64 = 9.81;

/// First index of each error-state block.
pub mod idx {
    pub const THETA: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
    pub const THETA_IL: usize = 18;
    pub const POS_IL: usize = 21;
    pub const THETA_IO: usize = 24;
    pub const POS_IO: usize = 27;
}

/// Error-state vector in the ordering documented at module level.
pub type ErrorState = SVector<f64, STATE_DIM>;

/// Covariance (or any square matrix) over the error state.
pub type CovMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Full navigation state.
///
/// Frames: `{G}` is the world frame (gravity-aligned at initialization),
/// `{I}` the IMU body frame, `{L}` the LiDAR frame, `{O}` the odometer frame.
#[derive(Clone, Debug)]
pub struct NavState {
    /// IMU attitude `^G_I R` (body-to-world).
    pub rot: Rotation,
    /// IMU position `^G p_I`.
    pub pos: Vector3<f64>,
    /// IMU velocity `^G v_I`.
    pub vel: Vector3<f64>,
    /// Gyroscope bias (rad/s).
    pub bias_gyro: Vector3<f64>,
    /// Accelerometer bias (m/s^2).
    pub bias_acc: Vector3<f64>,
    /// Gravity vector expressed in `{G}`; points *down*, so at rest the
    /// accelerometer measures `-rot^T * gravity`.
    pub gravity: Vector3<f64>,
    /// LiDAR-IMU rotation extrinsic `^I_L R`.
    pub rot_il: Rotation,
    /// LiDAR-IMU translation extrinsic `^I p_L`.
    pub pos_il: Vector3<f64>,
    /// Odometer-IMU rotation extrinsic `^I_O R`.
    pub rot_io: Rotation,
    /// Odometer-IMU translation extrinsic `^I p_O`.
    pub pos_io: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        NavState {
            rot: Rotation::identity(),
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_acc: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            rot_il: Rotation::identity(),
            pos_il: Vector3::zeros(),
            rot_io: Rotation::identity(),
            pos_io: Vector3::zeros(),
        }
    }
}

fn seg(v: &ErrorState, at: usize) -> Vector3<f64> {
    Vector3::new(v[at], v[at + 1], v[at + 2])
}

fn set_seg(v: &mut ErrorState, at: usize, val: &Vector3<f64>) {
    v[at] = val.x;
    v[at + 1] = val.y;
    v[at + 2] = val.z;
}

/// Retracts an error-state increment onto the state: `x ⊞ dx`.
pub fn boxplus(x: &NavState, dx: &ErrorState) -> NavState {
    NavState {
        rot: x.rot.compose(&exp_so3(&seg(dx, idx::THETA))),
        pos: x.pos + seg(dx, idx::POS),
        vel: x.vel + seg(dx, idx::VEL),
        bias_gyro: x.bias_gyro + seg(dx, idx::BG),
        bias_acc: x.bias_acc + seg(dx, idx::BA),
        gravity: x.gravity + seg(dx, idx::GRAV),
        rot_il: x.rot_il.compose(&exp_so3(&seg(dx, idx::THETA_IL))),
        pos_il: x.pos_il + seg(dx, idx::POS_IL),
        rot_io: x.rot_io.compose(&exp_so3(&seg(dx, idx::THETA_IO))),
        pos_io: x.pos_io + seg(dx, idx::POS_IO),
    }
}

/// Local difference `a ⊟ b`, the error state that retracts `b` onto `a`:
/// `boxplus(b, boxminus(a, b)) == a`. Rotation blocks are
/// `log_so3(b.rot^{-1} * a.rot)`.
pub fn boxminus(a: &NavState, b: &NavState) -> ErrorState {
    let mut dx = ErrorState::zeros();
    set_seg(&mut dx, idx::THETA, &log_so3(&b.rot.inverse().compose(&a.rot)));
    set_seg(&mut dx, idx::POS, &(a.pos - b.pos));
    set_seg(&mut dx, idx::VEL, &(a.vel - b.vel));
    set_seg(&mut dx, idx::BG, &(a.bias_gyro - b.bias_gyro));
    set_seg(&mut dx, idx::BA, &(a.bias_acc - b.bias_acc));
    set_seg(&mut dx, idx::GRAV, &(a.gravity - b.gravity));
    set_seg(
        &mut dx,
        idx::THETA_IL,
        &log_so3(&b.rot_il.inverse().compose(&a.rot_il)),
    );
    set_seg(&mut dx, idx::POS_IL, &(a.pos_il - b.pos_il));
    set_seg(
        &mut dx,
        idx::THETA_IO,
        &log_so3(&b.rot_io.inverse().compose(&a.rot_io)),
    );
    set_seg(&mut dx, idx::POS_IO, &(a.pos_io - b.pos_io));
    dx
}

/// Column header matching [`NavState::csv_row`].
pub const CSV_HEADER: &str = "px,py,pz,qw,qx,qy,qz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz,gx,gy,gz,\
qw_il,qx_il,qy_il,qz_il,px_il,py_il,pz_il,qw_io,qx_io,qy_io,qz_io,px_io,py_io,pz_io";

impl NavState {
    /// Serializes the state as one CSV row (no timestamp; see [`CSV_HEADER`]
    /// for the column order). Floats use the shortest representation that
    /// round-trips, so identical states serialize identically.
    pub fn csv_row(&self) -> String {
        let mut fields: Vec<String> = Vec::with_capacity(33);
        let push_vec = |fields: &mut Vec<String>, v: &Vector3<f64>| {
            fields.push(v.x.to_string());
            fields.push(v.y.to_string());
            fields.push(v.z.to_string());
        };
        let push_quat = |fields: &mut Vec<String>, r: &Rotation| {
            for c in r.quaternion_wxyz() {
                fields.push(c.to_string());
            }
        };
        push_vec(&mut fields, &self.pos);
        push_quat(&mut fields, &self.rot);
        push_vec(&mut fields, &self.vel);
        push_vec(&mut fields, &self.bias_gyro);
        push_vec(&mut fields, &self.bias_acc);
        push_vec(&mut fields, &self.gravity);
        push_quat(&mut fields, &self.rot_il);
        push_vec(&mut fields, &self.pos_il);
        push_quat(&mut fields, &self.rot_io);
        push_vec(&mut fields, &self.pos_io);
        fields.join(",")
    }
}
