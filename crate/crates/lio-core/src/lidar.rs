//! LiDAR scan handling: motion undistortion, scan decimation,
//! plane correspondences against the map, and point-to-plane residual rows.
//!
//! A scan is stamped at its *end*; every point carries a non-positive time
//! offset relative to that stamp. Undistortion re-expresses all points in
//! the LiDAR frame at scan end by back-propagating the end-of-scan state
//! through the IMU samples covering the scan (exactly inverting the forward
//! integrator in [`crate::imu`]), so the filter can treat the scan as an
//! instantaneous snapshot.
//!
//! The point-to-plane measurement for a point `p` (LiDAR frame) matched to a
//! map plane with unit normal `u` through anchor `q` is
//!
//! ```text
//! h(x) = u^T * (rot * (rot_il * p + pos_il) + pos - q)
//! ```
//!
//! with residual `r = -h` and Jacobian row `H = dh/d(error state)`, so the
//! linearized innovation satisfies `r ~ H * dx`.

use nalgebra::{RowSVector, Vector3};
use thiserror::Error;

use crate::imu::{propagate_state, ImuSample};
use crate::manifold::{exp_so3, skew, Rotation};
use crate::map::{fit_plane, PointMap};
use crate::state::{idx, NavState, STATE_DIM};

/// Weighting floor for the per-point range noise so noise-free synthetic
/// scans still produce a finite information matrix.
pub const RANGE_SIGMA_FLOOR: f64 = 1e-3;

/// One return within a scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanPoint {
    /// Capture time relative to scan end; always <= 0.
    pub offset: f64,
    /// Position in the LiDAR frame at capture time (m).
    pub pos: Vector3<f64>,
}

/// A LiDAR scan stamped at its end time.
#[derive(Clone, Debug)]
pub struct LidarScan {
    pub end_time: f64,
    /// Per-point range noise standard deviation (m).
    pub sigma: f64,
    pub points: Vec<ScanPoint>,
}

#[derive(Debug, Error)]
pub enum LidarError {
    #[error(
        "IMU stream does not cover scan [{want_from:.6}, {want_to:.6}]: \
         samples available from {have_from:.6}"
    )]
    ImuGap {
        want_from: f64,
        want_to: f64,
        have_from: f64,
    },
    #[error("scan point {index} has positive time offset {offset}")]
    PositiveOffset { index: usize, offset: f64 },
}

/// Pose knot used for interpolating within one IMU interval.
struct Knot {
    t: f64,
    state: NavState,
    /// Bias-corrected rates held over [t, next knot).
    gyro: Vector3<f64>,
    acc_world: Vector3<f64>,
}

/// Re-expresses every point in the LiDAR frame at scan end.
///
/// `x_end` is the state estimate at `scan.end_time`; `imu` must contain
/// samples covering the whole scan (one sample at or before the earliest
/// point capture time), sorted by time.
pub fn undistort(
    scan: &LidarScan,
    imu: &[ImuSample],
    x_end: &NavState,
) -> Result<LidarScan, LidarError> {
    let mut out = LidarScan {
        end_time: scan.end_time,
        sigma: scan.sigma,
        points: Vec::with_capacity(scan.points.len()),
    };
    if scan.points.is_empty() {
        return Ok(out);
    }
    let mut t_min = 0.0f64;
    for (i, p) in scan.points.iter().enumerate() {
        if p.offset > 0.0 {
            return Err(LidarError::PositiveOffset {
                index: i,
                offset: p.offset,
            });
        }
        t_min = t_min.min(p.offset);
    }
    let t_start = scan.end_time + t_min;
    let covered = imu.first().map(|s| s.t <= t_start).unwrap_or(false);
    if !covered {
        return Err(LidarError::ImuGap {
            want_from: t_start,
            want_to: scan.end_time,
            have_from: imu.first().map(|s| s.t).unwrap_or(f64::NAN),
        });
    }

    // Walk backward from the end state, exactly inverting the forward step,
    // recording one knot per IMU interval boundary.
    let mut knots: Vec<Knot> = Vec::new();
    let mut t_cur = scan.end_time;
    let mut x_cur = x_end.clone();
    let mut i = imu.partition_point(|s| s.t < scan.end_time);
    while t_cur > t_start {
        i = i.saturating_sub(1);
        let sample = &imu[i];
        let t_prev = sample.t.min(t_cur);
        let dt = t_cur - t_prev;
        let w = sample.gyro - x_cur.bias_gyro;
        let a = sample.acc - x_cur.bias_acc;
        let x_prev = if dt > 0.0 {
            // Invert: rot' = rot * exp(w dt); vel' = vel + a_w dt;
            //         pos' = pos + vel dt + a_w dt^2/2.
            let rot_prev = x_cur.rot.compose(&exp_so3(&(w * -dt)));
            let a_mid = exp_so3(&(w * (0.5 * dt))).rotate(&a);
            let a_world = rot_prev.rotate(&a_mid) + x_cur.gravity;
            let vel_prev = x_cur.vel - a_world * dt;
            let pos_prev = x_cur.pos - vel_prev * dt - a_world * (0.5 * dt * dt);
            let mut x = x_cur.clone();
            x.rot = rot_prev;
            x.vel = vel_prev;
            x.pos = pos_prev;
            x
        } else {
            x_cur.clone()
        };
        {
            let w_prev = sample.gyro - x_prev.bias_gyro;
            let a_prev = sample.acc - x_prev.bias_acc;
            let a_mid = exp_so3(&(w_prev * (0.5 * dt.max(0.0)))).rotate(&a_prev);
            knots.push(Knot {
                t: t_prev,
                acc_world: x_prev.rot.rotate(&a_mid) + x_prev.gravity,
                gyro: w_prev,
                state: x_prev.clone(),
            });
        }
        t_cur = t_prev;
        x_cur = x_prev;
        if i == 0 {
            break;
        }
    }
    knots.reverse();

    let pose_at = |t: f64| -> (Rotation, Vector3<f64>) {
        if knots.is_empty() || t >= scan.end_time {
            return (x_end.rot, x_end.pos);
        }
        let k = knots.partition_point(|kn| kn.t <= t).saturating_sub(1);
        let kn = &knots[k];
        let tau = (t - kn.t).max(0.0);
        let rot = kn.state.rot.compose(&exp_so3(&(kn.gyro * tau)));
        let pos = kn.state.pos + kn.state.vel * tau + kn.acc_world * (0.5 * tau * tau);
        (rot, pos)
    };

    let rot_end = x_end.rot;
    let pos_end = x_end.pos;
    for p in &scan.points {
        let t = scan.end_time + p.offset;
        let (rot_t, pos_t) = pose_at(t);
        // World position of the point at capture time...
        let world = rot_t.rotate(&(x_end.rot_il.rotate(&p.pos) + x_end.pos_il)) + pos_t;
        // ...re-expressed in the LiDAR frame at scan end.
        let body_end = rot_end.rotate_inv(&(world - pos_end));
        let lidar_end = x_end.rot_il.rotate_inv(&(body_end - x_end.pos_il));
        out.points.push(ScanPoint {
            offset: 0.0,
            pos: lidar_end,
        });
    }
    Ok(out)
}

/// Keeps at most one point per cubic cell of edge `cell`, preserving order
/// (first occupant wins). Used to decimate dense scans before matching.
pub fn voxel_decimate(points: &[ScanPoint], cell: f64) -> Vec<ScanPoint> {
    if cell <= 0.0 {
        return points.to_vec();
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in points {
        let key = (
            (p.pos.x / cell).floor() as i64,
            (p.pos.y / cell).floor() as i64,
            (p.pos.z / cell).floor() as i64,
        );
        if seen.insert(key) {
            out.push(*p);
        }
    }
    out
}

/// Parameters for correspondence search.
#[derive(Clone, Copy, Debug)]
pub struct MatchConfig {
    /// Neighbors fetched per point for plane fitting.
    pub plane_neighbors: usize,
    /// Max out-of-plane distance for a neighborhood to count as planar (m).
    pub plane_tol: f64,
    /// Max |point-to-plane residual| for a correspondence to be kept (m).
    pub corr_gate: f64,
    /// The in-plane lateral rms of the neighborhood must exceed
    /// `max(min_plane_spread, plane_spread_mult * sigma)`. Rejects
    /// needle-shaped neighborhoods (e.g. grazing-incidence points strung
    /// along one ray or ring arc) whose fitted normal is arbitrary and so
    /// would inject phantom constraints in unobservable directions. Noise
    /// jitter itself reads as lateral spread, so the gate must scale with
    /// sigma or needles sneak back in on noisy scans; it also bounds the
    /// noise-induced tilt of legitimate fits to roughly
    /// `1 / plane_spread_mult` radians over the whole noise range.
    pub min_plane_spread: f64,
    pub plane_spread_mult: f64,
    /// The fit rms must stay below `max(plane_rms_mult * sigma,
    /// plane_rms_floor)`. A genuine surface patch is thick only because of
    /// measurement noise, so its rms tracks sigma; a neighborhood straddling
    /// two surfaces (a wall-floor junction) keeps a geometric thickness that
    /// survives sigma -> 0. Such straddling fits have arbitrary tilted
    /// normals and bias the update, so they must not survive on low-noise
    /// data where their relative weight is enormous.
    pub plane_rms_mult: f64,
    pub plane_rms_floor: f64,
    /// Max distance from the query point to its nearest map neighbor (m).
    /// A point on a surface the map already covers has support well within
    /// this radius; a point on a freshly revealed surface does not, and its
    /// nearest neighbors belong to an *adjacent* surface whose plane is a
    /// grossly inconsistent (but individually well-formed) match. Such
    /// points are skipped here and enter the map after the update instead.
    pub max_nn_dist: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            plane_neighbors: 5,
            plane_tol: 0.1,
            corr_gate: 1.0,
            min_plane_spread: 0.03,
            plane_spread_mult: 1.5,
            // A clean 5-point fit has expected rms ~0.6*sigma, so 1.5*sigma
            // keeps legitimate patches through noise fluctuations while
            // rejecting junction-straddling fits as early as possible.
            plane_rms_mult: 1.5,
            // On noise-free data only *exact* fits are trustworthy: a clean
            // single-surface neighborhood fits to ~1e-6 (numerical error),
            // while a junction-straddling one keeps a geometric thickness
            // of 1e-4 m or more. The floor sits between the two.
            plane_rms_floor: 1e-5,
            max_nn_dist: 0.5,
        }
    }
}

/// A point matched to a local plane in the map.
#[derive(Clone, Copy, Debug)]
pub struct PlaneCorrespondence {
    /// The point in the LiDAR frame (scan-end frame after undistortion).
    pub point: Vector3<f64>,
    /// Plane unit normal (world frame).
    pub normal: Vector3<f64>,
    /// Point on the plane (world frame).
    pub anchor: Vector3<f64>,
    /// Measurement noise variance for this row (m^2).
    pub noise_var: f64,
}

/// One linearized measurement row.
#[derive(Clone, Debug)]
pub struct LidarResidualRow {
    /// `-h(x)`: negated signed point-to-plane distance (m).
    pub residual: f64,
    /// `dh/d(dx)` over the full 30-dim error state.
    pub jacobian: RowSVector<f64, STATE_DIM>,
    /// Noise variance of this row (m^2).
    pub noise_var: f64,
}

/// Finds plane correspondences for an (undistorted) scan at state `x`.
/// Points with too few neighbors, non-planar neighborhoods, or residuals
/// beyond the gate are skipped. Input order is preserved.
pub fn find_correspondences(
    scan: &LidarScan,
    map: &PointMap,
    x: &NavState,
    cfg: &MatchConfig,
) -> Vec<PlaneCorrespondence> {
    let mut out = Vec::new();
    if map.len() < cfg.plane_neighbors {
        return out;
    }
    let noise_var = scan.sigma.max(RANGE_SIGMA_FLOOR).powi(2);
    let rms_gate = (cfg.plane_rms_mult * scan.sigma).max(cfg.plane_rms_floor);
    let spread_gate = (cfg.plane_spread_mult * scan.sigma).max(cfg.min_plane_spread);
    let mut neighbors: Vec<Vector3<f64>> = Vec::with_capacity(cfg.plane_neighbors);
    for p in &scan.points {
        let world = x.rot.rotate(&(x.rot_il.rotate(&p.pos) + x.pos_il)) + x.pos;
        let idxs = map.knn(&world, cfg.plane_neighbors);
        if idxs.len() < cfg.plane_neighbors {
            continue;
        }
        neighbors.clear();
        neighbors.extend(idxs.iter().map(|&i| map.point(i)));
        let nearest_sq = neighbors
            .iter()
            .map(|q| (q - world).norm_squared())
            .fold(f64::INFINITY, f64::min);
        if nearest_sq > cfg.max_nn_dist * cfg.max_nn_dist {
            continue;
        }
        let fit = fit_plane(&neighbors, cfg.plane_tol);
        if !fit.valid || fit.rms > rms_gate {
            continue;
        }
        // Robust spread: a single off-line point must not be what makes the
        // neighborhood look two-dimensional.
        if crate::map::min_loo_lateral_rms(&neighbors) < spread_gate {
            continue;
        }
        let residual = fit.distance(&world);
        if residual.abs() > cfg.corr_gate {
            continue;
        }
        out.push(PlaneCorrespondence {
            point: p.pos,
            normal: fit.normal,
            anchor: fit.centroid,
            noise_var,
        });
    }
    out
}

/// Evaluates the residual and Jacobian row of one correspondence at `x`.
pub fn residual_row(corr: &PlaneCorrespondence, x: &NavState) -> LidarResidualRow {
    let body = x.rot_il.rotate(&corr.point) + x.pos_il;
    let world = x.rot.rotate(&body) + x.pos;
    let h = corr.normal.dot(&(world - corr.anchor));
    let r = x.rot.matrix();
    let u_t = corr.normal.transpose();

    let mut jac = RowSVector::<f64, STATE_DIM>::zeros();
    let block_theta = -u_t * r * skew(&body);
    let block_theta_il = -u_t * r * x.rot_il.matrix() * skew(&corr.point);
    let block_pos_il = u_t * r;
    for c in 0..3 {
        jac[idx::THETA + c] = block_theta[c];
        jac[idx::POS + c] = corr.normal[c];
        jac[idx::THETA_IL + c] = block_theta_il[c];
        jac[idx::POS_IL + c] = block_pos_il[c];
    }
    LidarResidualRow {
        residual: -h,
        jacobian: jac,
        noise_var: corr.noise_var,
    }
}

/// Forward-propagates `x` to time `t` through `imu` (used by tests to cross
/// check undistortion against the forward integrator).
pub fn propagate_through(
    x0: &NavState,
    t0: f64,
    t1: f64,
    imu: &[ImuSample],
) -> NavState {
    let mut x = x0.clone();
    let mut t = t0;
    let mut i = imu.partition_point(|s| s.t <= t0).saturating_sub(1);
    while t < t1 {
        let seg_end = if i + 1 < imu.len() { imu[i + 1].t.min(t1) } else { t1 };
        let dt = seg_end - t;
        if dt > 0.0 {
            x = propagate_state(&x, &imu[i], dt).expect("positive dt");
        }
        t = seg_end;
        if i + 1 < imu.len() && t >= imu[i + 1].t {
            i += 1;
        }
    }
    x
}
