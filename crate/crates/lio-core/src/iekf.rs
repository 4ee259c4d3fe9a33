//! Iterated error-state update.
//!
//! Each LiDAR scan triggers a Gauss-Newton iteration on the manifold that
//! minimizes
//!
//! ```text
//! J(dx) = || b + M dx ||^2_{P^-1}  +  || r - H dx ||^2_{R^-1}
//! ```
//!
//! where `b = x_iter ⊟ x_pred` is the drift of the current iterate from the
//! prediction, `M` is the Jacobian of that boxminus composition (identity
//! except for inverse-right-Jacobian rotation blocks), and `(r, H, R)` stack
//! the point-to-plane rows plus — only when the scan is degenerate — the
//! odometry relative-pose rows. The normal equations are solved in
//! information form, so the posterior covariance `(H^T R^-1 H + M^T P^-1
//! M)^{-1}` is symmetric positive definite by construction.
//!
//! Iterations re-find correspondences when the pose moved appreciably,
//! re-linearize, and backtrack on the step until the fixed-stack cost does
//! not increase, which makes the per-iteration cost non-increasing by
//! construction. Degeneracy is judged once per scan, at the first
//! linearization, and held for all its iterations.
//!
//! Extrinsic blocks can be frozen (`freeze_extrinsics`): their covariance
//! rows/columns stay zero and the update never touches them; the solve then
//! runs on the leading 18 error-state dimensions.

use nalgebra::{DMatrix, DVector};

use crate::degeneracy::{detect, pose_hessian, DegeneracyConfig, DegeneracyReport};
use crate::lidar::{
    find_correspondences, residual_row, LidarResidualRow, LidarScan, MatchConfig,
    PlaneCorrespondence,
};
use crate::manifold::{a_matrix, log_so3};
use crate::map::PointMap;
use crate::odometry::{residual_rows, OdomResidualRows, PoseSnapshot, RelPoseMeasurement};
use crate::state::{boxminus, boxplus, idx, CovMatrix, ErrorState, NavState, STATE_DIM};

/// How odometry participates in updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Never fuse odometry.
    LidarOnly,
    /// Fuse odometry only on scans flagged degenerate (the intended mode).
    DegenerationGated,
    /// Fuse odometry on every scan; exists to demonstrate why gating
    /// matters (odometry drift corrupts well-conditioned scans).
    AlwaysFused,
}

#[derive(Clone, Debug)]
pub struct UpdateConfig {
    pub max_iter: usize,
    /// Convergence threshold on the accepted step norm.
    pub step_tol: f64,
    pub match_cfg: MatchConfig,
    pub degeneracy: DegeneracyConfig,
    pub fusion: FusionMode,
    pub freeze_extrinsics: bool,
    /// Pose motion below which correspondences are reused between
    /// iterations (m and rad).
    pub refit_translation: f64,
    pub refit_rotation: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            max_iter: 4,
            step_tol: 1e-6,
            match_cfg: MatchConfig::default(),
            degeneracy: DegeneracyConfig::default(),
            fusion: FusionMode::DegenerationGated,
            freeze_extrinsics: true,
            refit_translation: 1e-3,
            refit_rotation: 0.01f64.to_radians(),
        }
    }
}

/// Stacked measurement set for one iteration.
pub struct MeasurementStack {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Diagonal of the block-diagonal noise covariance.
    pub noise_var: DVector<f64>,
    pub used_odometry: bool,
}

/// Stacks LiDAR rows and, when the report is degenerate (or fusion is
/// forced), the six odometry rows. With a well-conditioned report and no
/// forcing, odometry is excluded regardless of availability.
pub fn build_stack(
    rows: &[LidarResidualRow],
    odom: Option<&OdomResidualRows>,
    report: &DegeneracyReport,
    force_odometry: bool,
) -> MeasurementStack {
    let use_odom = odom.is_some() && (report.degenerate || force_odometry);
    let m = rows.len() + if use_odom { 6 } else { 0 };
    let mut residual = DVector::zeros(m);
    let mut jacobian = DMatrix::zeros(m, STATE_DIM);
    let mut noise_var = DVector::zeros(m);
    for (i, row) in rows.iter().enumerate() {
        residual[i] = row.residual;
        jacobian.row_mut(i).copy_from(&row.jacobian);
        noise_var[i] = row.noise_var;
    }
    if use_odom {
        let o = odom.unwrap();
        let base = rows.len();
        for r in 0..3 {
            residual[base + r] = o.r_rot[r];
            residual[base + 3 + r] = o.r_pos[r];
            noise_var[base + r] = o.cov_rot[(r, r)];
            noise_var[base + 3 + r] = o.cov_pos[(r, r)];
            for c in 0..STATE_DIM {
                jacobian[(base + r, c)] = o.h_rot[(r, c)];
                jacobian[(base + 3 + r, c)] = o.h_pos[(r, c)];
            }
        }
    }
    MeasurementStack {
        residual,
        jacobian,
        noise_var,
        used_odometry: use_odom,
    }
}

/// Jacobian of `dx -> (x_kappa ⊞ dx) ⊟ x_pred` at `dx = 0`: identity except
/// inverse-right-Jacobian blocks on the three rotation components,
/// evaluated at the current boxminus difference.
pub fn m_matrix(x_kappa: &NavState, x_pred: &NavState) -> CovMatrix {
    let mut m = CovMatrix::identity();
    for (block, delta) in [
        (idx::THETA, log_so3(&x_pred.rot.inverse().compose(&x_kappa.rot))),
        (
            idx::THETA_IL,
            log_so3(&x_pred.rot_il.inverse().compose(&x_kappa.rot_il)),
        ),
        (
            idx::THETA_IO,
            log_so3(&x_pred.rot_io.inverse().compose(&x_kappa.rot_io)),
        ),
    ] {
        let inv = a_matrix(&delta)
            .try_inverse()
            .expect("right Jacobian invertible for principal angles");
        m.fixed_view_mut::<3, 3>(block, block).copy_from(&inv);
    }
    m
}

/// Result of one scan update.
#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub state: NavState,
    pub cov: CovMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub used_odometry: bool,
    /// True when the scan was degenerate, fusion is gated, but no odometry
    /// was available (the filter fell back to LiDAR-only).
    pub odometry_missing: bool,
    pub n_points: usize,
    pub final_cost: f64,
    /// (cost before, cost after) per iteration against that iteration's
    /// fixed measurement stack; `after <= before` by construction.
    pub cost_pairs: Vec<(f64, f64)>,
    pub report: Option<DegeneracyReport>,
}

fn passthrough(x_pred: &NavState, p_pred: &CovMatrix) -> UpdateOutcome {
    UpdateOutcome {
        state: x_pred.clone(),
        cov: *p_pred,
        iterations: 0,
        converged: false,
        used_odometry: false,
        odometry_missing: false,
        n_points: 0,
        final_cost: 0.0,
        cost_pairs: Vec::new(),
        report: None,
    }
}

fn lidar_cost(corrs: &[PlaneCorrespondence], x: &NavState) -> f64 {
    let mut c = 0.0;
    for corr in corrs {
        let body = x.rot_il.rotate(&corr.point) + x.pos_il;
        let world = x.rot.rotate(&body) + x.pos;
        let h = corr.normal.dot(&(world - corr.anchor));
        c += h * h / corr.noise_var;
    }
    c
}

fn odom_cost(m: &RelPoseMeasurement, prev: &PoseSnapshot, x: &NavState) -> f64 {
    let rows = residual_rows(m, prev, x);
    let mut c = 0.0;
    for r in 0..3 {
        c += rows.r_rot[r] * rows.r_rot[r] / rows.cov_rot[(r, r)];
        c += rows.r_pos[r] * rows.r_pos[r] / rows.cov_pos[(r, r)];
    }
    c
}

/// Runs the iterated update for one (undistorted) scan.
pub fn iterated_update(
    x_pred: &NavState,
    p_pred: &CovMatrix,
    scan: &LidarScan,
    map: &PointMap,
    odom: Option<(&RelPoseMeasurement, &PoseSnapshot)>,
    cfg: &UpdateConfig,
) -> UpdateOutcome {
    let n = if cfg.freeze_extrinsics { idx::THETA_IL } else { STATE_DIM };

    // Inverse of the prior covariance on the active block.
    let p_act = p_pred.view((0, 0), (n, n)).into_owned();
    let p_inv = match p_act.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            // Nudge once; a prior that still fails is unusable.
            let ridge = 1e-12 * p_act.trace().max(1e-12);
            match (p_act.clone() + DMatrix::identity(n, n) * ridge).cholesky() {
                Some(ch) => ch.inverse(),
                None => return passthrough(x_pred, p_pred),
            }
        }
    };

    let mut x = x_pred.clone();
    let mut corrs = find_correspondences(scan, map, &x, &cfg.match_cfg);
    if corrs.is_empty() {
        return passthrough(x_pred, p_pred);
    }
    let mut rows: Vec<LidarResidualRow> = corrs.iter().map(|c| residual_row(c, &x)).collect();

    // Degeneracy is judged once, at the prediction. Thresholds are
    // configured per unit row weight; scale them to this scan's noise.
    let report = detect(&pose_hessian(&rows), &cfg.degeneracy.scaled(rows[0].noise_var));
    let force = cfg.fusion == FusionMode::AlwaysFused;
    let odom_in = match cfg.fusion {
        FusionMode::LidarOnly => None,
        _ => odom,
    };
    let odometry_missing =
        cfg.fusion == FusionMode::DegenerationGated && report.degenerate && odom.is_none();

    let prior_cost = |x_cand: &NavState| -> f64 {
        let b = boxminus(x_cand, x_pred);
        let b_act = DVector::from_iterator(n, (0..n).map(|i| b[i]));
        (b_act.transpose() * &p_inv * &b_act)[(0, 0)]
    };
    let total_cost = |x_cand: &NavState, corrs: &[PlaneCorrespondence], with_odom: bool| -> f64 {
        let mut c = lidar_cost(corrs, x_cand) + prior_cost(x_cand);
        if with_odom {
            if let Some((m, prev)) = odom_in {
                c += odom_cost(m, prev, x_cand);
            }
        }
        c
    };

    let mut used_odometry = false;
    let mut cost_pairs: Vec<(f64, f64)> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_cost = f64::NAN;

    let assemble = |rows: &[LidarResidualRow],
                    odom_rows: Option<&OdomResidualRows>,
                    x_cur: &NavState|
     -> (DMatrix<f64>, DVector<f64>, bool) {
        let stack = build_stack(rows, odom_rows, &report, force);
        let m_rows = stack.residual.len();
        let j_act = stack.jacobian.columns(0, n).into_owned();
        let mut weighted = j_act.clone();
        let mut wr = DVector::zeros(m_rows);
        for i in 0..m_rows {
            let w = 1.0 / stack.noise_var[i];
            weighted.row_mut(i).scale_mut(w);
            wr[i] = w * stack.residual[i];
        }
        let mut a = j_act.tr_mul(&weighted);
        let mut rhs = j_act.tr_mul(&wr);
        // Prior term.
        let m_full = m_matrix(x_cur, x_pred);
        let m_act = m_full.view((0, 0), (n, n)).into_owned();
        let b = boxminus(x_cur, x_pred);
        let b_act = DVector::from_iterator(n, (0..n).map(|i| b[i]));
        let mtp = m_act.tr_mul(&p_inv);
        a += &mtp * &m_act;
        rhs -= &mtp * &b_act;
        (a, rhs, stack.used_odometry)
    };

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let odom_rows = odom_in.map(|(m, prev)| residual_rows(m, prev, &x));
        let (a, rhs, with_odom) = assemble(&rows, odom_rows.as_ref(), &x);
        used_odometry = with_odom;

        let delta_act = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match a.clone().lu().solve(&rhs) {
                Some(d) => d,
                None => break,
            },
        };
        let mut delta = ErrorState::zeros();
        for i in 0..n {
            delta[i] = delta_act[i];
        }

        // Backtrack against the fixed stack until the cost is non-increasing.
        let cost_before = total_cost(&x, &corrs, with_odom);
        let mut accepted: Option<(NavState, f64, f64)> = None;
        let mut scale = 1.0;
        for _ in 0..8 {
            let cand = boxplus(&x, &(delta * scale));
            let cost_after = total_cost(&cand, &corrs, with_odom);
            if cost_after <= cost_before * (1.0 + 1e-12) + 1e-15 {
                accepted = Some((cand, cost_after, (delta * scale).norm()));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cost_after, step_norm)) = accepted else {
            // No productive direction left: already at a local minimum of
            // this stack.
            cost_pairs.push((cost_before, cost_before));
            last_cost = cost_before;
            converged = true;
            break;
        };
        let moved_t = (cand.pos - x.pos).norm();
        let moved_r = log_so3(&x.rot.inverse().compose(&cand.rot)).norm();
        x = cand;
        cost_pairs.push((cost_before, cost_after));
        last_cost = cost_after;
        if step_norm < cfg.step_tol {
            converged = true;
            break;
        }
        // Refresh correspondences when the pose moved appreciably.
        if moved_t > cfg.refit_translation || moved_r > cfg.refit_rotation {
            let fresh = find_correspondences(scan, map, &x, &cfg.match_cfg);
            if !fresh.is_empty() {
                corrs = fresh;
            }
        }
        rows = corrs.iter().map(|c| residual_row(c, &x)).collect();
    }

    // Posterior covariance from the final linearization.
    let odom_rows = odom_in.map(|(m, prev)| residual_rows(m, prev, &x));
    rows = corrs.iter().map(|c| residual_row(c, &x)).collect();
    let (a, _, _) = assemble(&rows, odom_rows.as_ref(), &x);
    let p_post_act = match a.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => a.lu().try_inverse().unwrap_or(p_act),
    };
    let mut cov = CovMatrix::zeros();
    for i in 0..n {
        for j in 0..n {
            cov[(i, j)] = 0.5 * (p_post_act[(i, j)] + p_post_act[(j, i)]);
        }
    }

    UpdateOutcome {
        state: x,
        cov,
        iterations,
        converged,
        used_odometry,
        odometry_missing,
        n_points: corrs.len(),
        final_cost: if last_cost.is_nan() { 0.0 } else { last_cost },
        cost_pairs,
        report: Some(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::ScanPoint;
    use crate::manifold::exp_so3;
    use crate::odometry::OdomNoiseModel;
    use crate::state::STANDARD_GRAVITY;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn m_matrix_is_identity_at_zero_difference() {
        let x = NavState::default();
        let m = m_matrix(&x, &x);
        assert!((m - CovMatrix::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn m_matrix_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..5 {
            let x_pred = NavState::default();
            let mut dx0 = ErrorState::zeros();
            for i in 0..STATE_DIM {
                dx0[i] = rng.random_range(-0.3..0.3);
            }
            let x_kappa = boxplus(&x_pred, &dx0);
            let m = m_matrix(&x_kappa, &x_pred);
            let h = 1e-6;
            for i in 0..STATE_DIM {
                let mut d = ErrorState::zeros();
                d[i] = h;
                let fp = boxminus(&boxplus(&x_kappa, &d), &x_pred);
                d[i] = -h;
                let fm = boxminus(&boxplus(&x_kappa, &d), &x_pred);
                let fd = (fp - fm) / (2.0 * h);
                for r in 0..STATE_DIM {
                    assert!(
                        (m[(r, i)] - fd[r]).abs() < 1e-6,
                        "M[{r},{i}]: analytic {} vs FD {}",
                        m[(r, i)],
                        fd[r]
                    );
                }
            }
        }
    }

    fn dummy_report(degenerate: bool) -> DegeneracyReport {
        DegeneracyReport {
            eig_rot: [1e5; 3],
            eig_trans: if degenerate { [1.0, 1e5, 1e5] } else { [1e5; 3] },
            dirs_rot: Matrix3::identity(),
            dirs_trans: Matrix3::identity(),
            weak_rot: [false; 3],
            weak_trans: [degenerate, false, false],
            degenerate,
        }
    }

    fn dummy_lidar_rows(k: usize) -> Vec<LidarResidualRow> {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        (0..k)
            .map(|_| {
                let mut jac = nalgebra::RowSVector::<f64, STATE_DIM>::zeros();
                for c in 0..STATE_DIM {
                    jac[c] = rng.random_range(-1.0..1.0);
                }
                LidarResidualRow {
                    residual: rng.random_range(-0.1..0.1),
                    jacobian: jac,
                    noise_var: 0.0025,
                }
            })
            .collect()
    }

    fn dummy_odom_rows() -> OdomResidualRows {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut h_rot = nalgebra::SMatrix::<f64, 3, STATE_DIM>::zeros();
        let mut h_pos = nalgebra::SMatrix::<f64, 3, STATE_DIM>::zeros();
        for r in 0..3 {
            for c in 0..STATE_DIM {
                h_rot[(r, c)] = rng.random_range(-1.0..1.0);
                h_pos[(r, c)] = rng.random_range(-1.0..1.0);
            }
        }
        OdomResidualRows {
            r_rot: Vector3::new(0.01, -0.02, 0.005),
            r_pos: Vector3::new(0.03, 0.01, -0.02),
            h_rot,
            h_pos,
            cov_rot: Matrix3::identity() * 1e-4,
            cov_pos: Matrix3::identity() * 4e-4,
        }
    }

    #[test]
    fn stack_gates_odometry_on_degeneracy() {
        let rows = dummy_lidar_rows(10);
        let odom = dummy_odom_rows();

        let s = build_stack(&rows, Some(&odom), &dummy_report(false), false);
        assert!(!s.used_odometry);
        assert_eq!(s.residual.len(), 10);

        let s = build_stack(&rows, Some(&odom), &dummy_report(true), false);
        assert!(s.used_odometry);
        assert_eq!(s.residual.len(), 16);

        // Forcing bypasses the gate (the always-fused mode).
        let s = build_stack(&rows, Some(&odom), &dummy_report(false), true);
        assert!(s.used_odometry);

        // No odometry available: never used.
        let s = build_stack(&rows, None, &dummy_report(true), false);
        assert!(!s.used_odometry);
    }

    #[test]
    fn stack_information_is_sum_of_parts() {
        let rows = dummy_lidar_rows(8);
        let odom = dummy_odom_rows();
        let s = build_stack(&rows, Some(&odom), &dummy_report(true), false);

        // Dense oracle: H^T R^-1 H of the stack.
        let mut fisher = DMatrix::<f64>::zeros(STATE_DIM, STATE_DIM);
        for i in 0..s.residual.len() {
            let row = s.jacobian.row(i).into_owned();
            fisher += row.transpose() * row.clone() / s.noise_var[i];
        }
        // Sum of the lidar-only and odometry-only Fisher terms.
        let mut parts = DMatrix::<f64>::zeros(STATE_DIM, STATE_DIM);
        for r in &rows {
            let row: nalgebra::RowDVector<f64> =
                nalgebra::RowDVector::from_iterator(STATE_DIM, r.jacobian.iter().cloned());
            parts += row.transpose() * row.clone() / r.noise_var;
        }
        for r in 0..3 {
            let hr = odom.h_rot.row(r).into_owned();
            let hp = odom.h_pos.row(r).into_owned();
            let hr_d = nalgebra::RowDVector::from_iterator(STATE_DIM, hr.iter().cloned());
            let hp_d = nalgebra::RowDVector::from_iterator(STATE_DIM, hp.iter().cloned());
            parts += hr_d.transpose() * hr_d.clone() / odom.cov_rot[(r, r)];
            parts += hp_d.transpose() * hp_d.clone() / odom.cov_pos[(r, r)];
        }
        assert!((fisher - parts).abs().max() < 1e-9);
    }

    /// Box room with walls/floor/ceiling used by the convergence tests.
    /// Each face grid is inset from the face boundary so every scan point's
    /// five nearest neighbors lie on the same face (exactly planar fits);
    /// coincident-edge neighborhoods are a grid artifact real scans lack.
    fn room_map_and_scan(x_true: &NavState) -> (PointMap, LidarScan) {
        let mut map = PointMap::new(0.08, 4096);
        let mut world_pts = Vec::new();
        let (w, d, h) = (4.0, 3.0, 2.5);
        let (step, inset) = (0.1, 0.3);
        let mut push_grid = |f: &dyn Fn(f64, f64) -> Vector3<f64>, a_max: f64, b_max: f64| {
            let mut a = inset;
            while a <= a_max - inset {
                let mut b = inset;
                while b <= b_max - inset {
                    world_pts.push(f(a, b));
                    b += step;
                }
                a += step;
            }
        };
        push_grid(&|a, b| Vector3::new(a - w / 2.0, -d / 2.0, b), w, h); // wall y-
        push_grid(&|a, b| Vector3::new(a - w / 2.0, d / 2.0, b), w, h); // wall y+
        push_grid(&|a, b| Vector3::new(-w / 2.0, a - d / 2.0, b), d, h); // wall x-
        push_grid(&|a, b| Vector3::new(w / 2.0, a - d / 2.0, b), d, h); // wall x+
        push_grid(&|a, b| Vector3::new(a - w / 2.0, b - d / 2.0, 0.0), w, d); // floor
        push_grid(&|a, b| Vector3::new(a - w / 2.0, b - d / 2.0, h), w, d); // ceiling
        map.insert(&world_pts);

        // Scan: every fourth map point observed from the true pose.
        let points: Vec<ScanPoint> = world_pts
            .iter()
            .step_by(4)
            .map(|wp| ScanPoint {
                offset: 0.0,
                pos: x_true
                    .rot_il
                    .rotate_inv(&(x_true.rot.rotate_inv(&(wp - x_true.pos)) - x_true.pos_il)),
            })
            .collect();
        (
            map,
            LidarScan {
                end_time: 0.0,
                sigma: 0.02,
                points,
            },
        )
    }

    fn tight_prior() -> CovMatrix {
        let mut p = CovMatrix::zeros();
        for i in 0..STATE_DIM {
            p[(i, i)] = match i {
                i if i < 3 => 1e-4,
                i if i < 6 => 1e-4,
                i if i < 9 => 1e-2,
                i if i < 18 => 1e-4,
                _ => 1e-6,
            };
        }
        p
    }

    #[test]
    fn perfect_prediction_is_a_fixed_point() {
        let mut x_true = NavState::default();
        x_true.pos = Vector3::new(0.3, -0.2, 1.2);
        let (map, scan) = room_map_and_scan(&x_true);
        let out = iterated_update(&x_true, &tight_prior(), &scan, &map, None, &UpdateConfig::default());
        assert!(out.converged);
        assert!(boxminus(&out.state, &x_true).norm() < 1e-9);
        assert!(!out.used_odometry);
        assert!(out.n_points > 100);
    }

    #[test]
    fn perturbed_prediction_recovers_true_pose() {
        let mut x_true = NavState::default();
        x_true.pos = Vector3::new(0.2, 0.1, 1.3);
        x_true.rot = exp_so3(&Vector3::new(0.02, -0.01, 0.5));
        x_true.gravity = Vector3::new(0.0, 0.0, -STANDARD_GRAVITY);
        let (map, scan) = room_map_and_scan(&x_true);

        let mut delta = ErrorState::zeros();
        delta[idx::THETA] = 0.008;
        delta[idx::THETA + 2] = -0.006;
        delta[idx::POS] = 0.02;
        delta[idx::POS + 1] = -0.015;
        delta[idx::POS + 2] = 0.02;
        let x_pred = boxplus(&x_true, &delta);

        let out = iterated_update(&x_pred, &tight_prior(), &scan, &map, None, &UpdateConfig::default());
        let err = boxminus(&out.state, &x_true);
        let pos_err = err.fixed_rows::<3>(idx::POS).norm();
        let rot_err = err.fixed_rows::<3>(idx::THETA).norm();
        assert!(pos_err < 5e-3, "position error {pos_err}");
        assert!(rot_err < 2e-3, "rotation error {rot_err}");

        // Cost pairs must never increase within an iteration.
        for (before, after) in &out.cost_pairs {
            assert!(after <= &(before * (1.0 + 1e-12) + 1e-15));
        }
        // Posterior covariance symmetric PSD.
        let cov = out.cov;
        assert!((cov - cov.transpose()).abs().max() < 1e-12);
        let act = cov.view((0, 0), (18, 18)).into_owned();
        assert!(act.cholesky().is_some(), "posterior covariance not PD on active block");
        // Frozen extrinsic blocks untouched.
        for i in 18..STATE_DIM {
            assert_eq!(cov[(i, i)], 0.0);
        }
    }

    #[test]
    fn empty_map_passes_prediction_through() {
        let map = PointMap::new(0.1, 128);
        let scan = LidarScan {
            end_time: 0.0,
            sigma: 0.02,
            points: vec![ScanPoint { offset: 0.0, pos: Vector3::x() }],
        };
        let x = NavState::default();
        let p = tight_prior();
        let out = iterated_update(&x, &p, &scan, &map, None, &UpdateConfig::default());
        assert!(!out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.n_points, 0);
        assert!((out.cov - p).abs().max() == 0.0);
    }

    #[test]
    fn gated_update_reports_missing_odometry_under_degeneracy() {
        // Two parallel planes only: translation along x and y unconstrained.
        let mut map = PointMap::new(0.08, 4096);
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 2.0));
            }
        }
        map.insert(&pts);
        let mut x = NavState::default();
        x.pos = Vector3::new(2.0, 2.0, 1.0);
        let scan_pts: Vec<ScanPoint> = pts
            .iter()
            .step_by(3)
            .map(|wp| ScanPoint {
                offset: 0.0,
                pos: x.rot.rotate_inv(&(wp - x.pos)),
            })
            .collect();
        let scan = LidarScan {
            end_time: 0.0,
            sigma: 0.02,
            points: scan_pts,
        };
        let out = iterated_update(&x, &tight_prior(), &scan, &map, None, &UpdateConfig::default());
        let report = out.report.as_ref().unwrap();
        assert!(report.degenerate);
        assert!(out.odometry_missing);
        assert!(!out.used_odometry);
    }

    #[test]
    fn degenerate_scan_with_odometry_constrains_weak_axis() {
        // Corridor-like map: walls at y = +/-1 and floor/ceiling, long in x.
        // Faces are inset from their junction lines (see room fixture).
        let mut map = PointMap::new(0.08, 4096);
        let mut pts = Vec::new();
        for i in 0..400 {
            let xx = i as f64 * 0.1;
            for k in 0..20 {
                let zz = 0.3 + k as f64 * 0.1;
                pts.push(Vector3::new(xx, -1.0, zz));
                pts.push(Vector3::new(xx, 1.0, zz));
            }
            for k in 0..15 {
                let yy = k as f64 * 0.1 - 0.7;
                pts.push(Vector3::new(xx, yy, 0.0));
                pts.push(Vector3::new(xx, yy, 2.5));
            }
        }
        map.insert(&pts);

        let mut x_true = NavState::default();
        x_true.pos = Vector3::new(20.0, 0.0, 1.2);
        let visible: Vec<&Vector3<f64>> = pts
            .iter()
            .filter(|p| (p.x - x_true.pos.x).abs() < 8.0)
            .collect();
        let scan_pts: Vec<ScanPoint> = visible
            .iter()
            .step_by(2)
            .map(|wp| ScanPoint {
                offset: 0.0,
                pos: x_true.rot.rotate_inv(&(*wp - x_true.pos)),
            })
            .collect();
        let scan = LidarScan {
            end_time: 0.1,
            sigma: 0.02,
            points: scan_pts,
        };

        // Prediction off by 5 cm along the unconstrained x axis.
        let mut delta = ErrorState::zeros();
        delta[idx::POS] = 0.05;
        let x_pred = boxplus(&x_true, &delta);

        // Odometry measurement consistent with the truth.
        let prev = PoseSnapshot {
            rot: NavState::default().rot,
            pos: x_true.pos - Vector3::new(0.1, 0.0, 0.0),
        };
        let (z_rot, z_pos) = crate::odometry::predict_relative(&prev, &x_true);
        let noise = OdomNoiseModel {
            sigma_rot: 0.5f64.to_radians(),
            sigma_pos_per_m: 0.02,
            sigma_pos_floor: 0.005,
        };
        let meas = RelPoseMeasurement {
            t0: 0.0,
            t1: 0.1,
            rot: z_rot,
            pos: z_pos,
            cov_rot: Matrix3::identity() * noise.sigma_rot.powi(2),
            cov_pos: Matrix3::identity() * noise.sigma_pos_floor.powi(2),
        };

        // A prior loose along x so the measurement dominates.
        let mut p = tight_prior();
        p[(idx::POS, idx::POS)] = 0.01;

        let out = iterated_update(
            &x_pred,
            &p,
            &scan,
            &map,
            Some((&meas, &prev)),
            &UpdateConfig::default(),
        );
        let report = out.report.as_ref().unwrap();
        assert!(report.degenerate, "corridor scan must be degenerate");
        assert!(
            report.weakest_translation().dot(&Vector3::x()).abs() > 0.9,
            "weak axis should align with x"
        );
        assert!(out.used_odometry);
        let err_x = (out.state.pos.x - x_true.pos.x).abs();
        assert!(
            err_x < 0.02,
            "odometry should pull x back toward truth, err {err_x}"
        );

        // Without odometry the x error persists (nothing constrains it).
        let out_lo = iterated_update(&x_pred, &p, &scan, &map, None, &UpdateConfig::default());
        let err_x_lo = (out_lo.state.pos.x - x_true.pos.x).abs();
        assert!(
            err_x_lo > err_x,
            "lidar-only x error {err_x_lo} should exceed fused {err_x}"
        );
    }
}

