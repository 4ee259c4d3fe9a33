//! Cramér–Rao lower-bound comparison of the two measurement models.
//!
//! For an unbiased estimator the error covariance is bounded below by the
//! inverse Fisher information `J = H^T R^-1 H`. Stacking one scan's
//! point-to-plane rows over the columns `[pose(6), lidar-extrinsic(6)]`
//! gives
//!
//! ```text
//! J_li = [ U  B ]        CRLB_li = (U - B C^-1 B^T)^-1
//!        [ B' C ]
//! ```
//!
//! after marginalizing the extrinsic (Schur complement). Adding relative-pose
//! odometry rows, which touch `[pose(6), odom-extrinsic(6)]` and never the
//! LiDAR extrinsic, extends the information to an 18-column layout whose
//! forbidden cross block (LiDAR-extrinsic x odom-extrinsic) is exactly zero,
//! and the pose bound becomes
//!
//! ```text
//! CRLB_pf = (U + F - B C^-1 B^T - D E^-1 D^T)^-1
//! ```
//!
//! Because `F - D E^-1 D^T` is itself a Schur complement of a PSD matrix,
//! `CRLB_li - CRLB_pf` is PSD: fusing odometry can only tighten the pose
//! bound. [`certify_ordering`] checks that ordering numerically; the dense
//! full-inverse route ([`dense_pose_block`]) exists as an independent oracle
//! for the Schur route and the two must agree to high precision.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Condition-number ceiling for the extrinsic blocks `C` and `E`.
pub const MAX_EXTRINSIC_COND: f64 = 1e12;
/// Relative PSD-gap tolerance used by [`certify_ordering`].
pub const PSD_GAP_RTOL: f64 = 1e-9;
/// Absolute ceiling on the forbidden extrinsic cross block. Assembling from
/// rows with the documented sparsity produces exact zeros, so any excess
/// signals a mislaid column layout.
pub const LAYOUT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CrlbError {
    #[error("{which} information block ill-conditioned (cond {cond:.3e} >= {MAX_EXTRINSIC_COND:.0e})")]
    SingularBlock { which: &'static str, cond: f64 },
    #[error(
        "cross information between LiDAR and odometry extrinsics has max |entry| {max_abs:.3e}; \
         the measurement layout forbids coupling them"
    )]
    LayoutViolation { max_abs: f64 },
}

/// `H^T R^-1 H` for rows with independent noise variances (the diagonal of
/// the block-diagonal `R`).
pub fn fisher(h: &DMatrix<f64>, noise_var: &DVector<f64>) -> DMatrix<f64> {
    assert_eq!(h.nrows(), noise_var.len(), "one variance per row");
    let mut weighted = h.clone();
    for i in 0..h.nrows() {
        weighted.row_mut(i).scale_mut(1.0 / noise_var[i]);
    }
    let j = h.tr_mul(&weighted);
    0.5 * (&j + j.transpose())
}

/// Partitioned Fisher information over `[pose, lidar-extr, odom-extr]`.
///
/// `u`/`b`/`c` come from LiDAR rows, `f`/`d`/`e` from odometry rows. When
/// built from an assembled 18x18 joint the pose blocks arrive merged, so `u`
/// holds `U + F` and `f` stays zero; every formula below only ever uses the
/// sum.
#[derive(Clone, Debug, Default)]
pub struct FisherBlocks {
    pub u: Matrix6<f64>,
    pub b: Matrix6<f64>,
    pub c: Matrix6<f64>,
    pub f: Matrix6<f64>,
    pub d: Matrix6<f64>,
    pub e: Matrix6<f64>,
}

impl FisherBlocks {
    /// Splits a 12x12 LiDAR information matrix over `[pose, lidar-extr]`.
    pub fn from_lidar(j: &SMatrix<f64, 12, 12>) -> Self {
        FisherBlocks {
            u: j.fixed_view::<6, 6>(0, 0).into_owned(),
            b: j.fixed_view::<6, 6>(0, 6).into_owned(),
            c: j.fixed_view::<6, 6>(6, 6).into_owned(),
            ..Default::default()
        }
    }

    /// Adds a 12x12 odometry information matrix over `[pose, odom-extr]`.
    pub fn with_odometry(mut self, j: &SMatrix<f64, 12, 12>) -> Self {
        self.f = j.fixed_view::<6, 6>(0, 0).into_owned();
        self.d = j.fixed_view::<6, 6>(0, 6).into_owned();
        self.e = j.fixed_view::<6, 6>(6, 6).into_owned();
        self
    }

    /// Splits an assembled 18x18 joint information matrix, verifying the
    /// forbidden (lidar-extr x odom-extr) cross block is zero.
    pub fn from_fused_joint(j: &SMatrix<f64, 18, 18>) -> Result<Self, CrlbError> {
        let cross = j.fixed_view::<6, 6>(6, 12);
        let max_abs = cross.abs().max();
        if max_abs > LAYOUT_TOL {
            return Err(CrlbError::LayoutViolation { max_abs });
        }
        Ok(FisherBlocks {
            u: j.fixed_view::<6, 6>(0, 0).into_owned(),
            b: j.fixed_view::<6, 6>(0, 6).into_owned(),
            c: j.fixed_view::<6, 6>(6, 6).into_owned(),
            d: j.fixed_view::<6, 6>(0, 12).into_owned(),
            e: j.fixed_view::<6, 6>(12, 12).into_owned(),
            f: Matrix6::zeros(),
        })
    }

    /// Assembles the 18x18 joint `[[U+F, B, D], [B', C, 0], [D', 0, E]]`.
    pub fn assemble_joint(&self) -> SMatrix<f64, 18, 18> {
        let mut j = SMatrix::<f64, 18, 18>::zeros();
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&(self.u + self.f));
        j.fixed_view_mut::<6, 6>(0, 6).copy_from(&self.b);
        j.fixed_view_mut::<6, 6>(6, 0).copy_from(&self.b.transpose());
        j.fixed_view_mut::<6, 6>(6, 6).copy_from(&self.c);
        j.fixed_view_mut::<6, 6>(0, 12).copy_from(&self.d);
        j.fixed_view_mut::<6, 6>(12, 0).copy_from(&self.d.transpose());
        j.fixed_view_mut::<6, 6>(12, 12).copy_from(&self.e);
        j
    }
}

fn cond6(m: &Matrix6<f64>) -> f64 {
    let sv = m.svd(false, false).singular_values;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in sv.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn checked_inverse(m: &Matrix6<f64>, which: &'static str) -> Result<Matrix6<f64>, CrlbError> {
    let cond = cond6(m);
    if !cond.is_finite() || cond >= MAX_EXTRINSIC_COND {
        return Err(CrlbError::SingularBlock { which, cond });
    }
    m.try_inverse()
        .ok_or(CrlbError::SingularBlock { which, cond })
}

fn symmetrized_inverse(s: &Matrix6<f64>, which: &'static str) -> Result<Matrix6<f64>, CrlbError> {
    let sym = 0.5 * (s + s.transpose());
    let inv = checked_inverse(&sym, which)?;
    Ok(0.5 * (inv + inv.transpose()))
}

/// Pose bound with LiDAR rows only: `(U - B C^-1 B^T)^-1`.
pub fn crlb_pure_lidar(blocks: &FisherBlocks) -> Result<Matrix6<f64>, CrlbError> {
    let c_inv = checked_inverse(&blocks.c, "LiDAR-extrinsic")?;
    let s = blocks.u - blocks.b * c_inv * blocks.b.transpose();
    symmetrized_inverse(&s, "pose (LiDAR-only Schur complement)")
}

/// Pose bound with LiDAR plus odometry: `(U + F - B C^-1 B^T - D E^-1 D^T)^-1`.
pub fn crlb_pose_fusion(blocks: &FisherBlocks) -> Result<Matrix6<f64>, CrlbError> {
    let c_inv = checked_inverse(&blocks.c, "LiDAR-extrinsic")?;
    let e_inv = checked_inverse(&blocks.e, "odometry-extrinsic")?;
    let s = blocks.u + blocks.f
        - blocks.b * c_inv * blocks.b.transpose()
        - blocks.d * e_inv * blocks.d.transpose();
    symmetrized_inverse(&s, "pose (fused Schur complement)")
}

/// Both bounds plus the smallest eigenvalue of their difference.
#[derive(Clone, Debug)]
pub struct CrlbResult {
    pub crlb_li: Matrix6<f64>,
    pub crlb_pf: Matrix6<f64>,
    /// Smallest eigenvalue of `crlb_li - crlb_pf` (>= 0 up to round-off when
    /// the ordering holds).
    pub psd_gap_eigmin: f64,
}

/// Computes both pose bounds from one instance's blocks. For the LiDAR-only
/// bound the odometry pose information `F` must be excluded, so this
/// requires blocks built from the separate 12x12 parts (where `u` holds `U`
/// alone), not from an assembled joint.
pub fn compare(blocks: &FisherBlocks) -> Result<CrlbResult, CrlbError> {
    let crlb_li = crlb_pure_lidar(blocks)?;
    let crlb_pf = crlb_pose_fusion(blocks)?;
    let diff = 0.5 * ((crlb_li - crlb_pf) + (crlb_li - crlb_pf).transpose());
    let psd_gap_eigmin = diff
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(CrlbResult {
        crlb_li,
        crlb_pf,
        psd_gap_eigmin,
    })
}

/// True iff `crlb_li - crlb_pf` is PSD up to a relative round-off allowance:
/// `eigmin >= -PSD_GAP_RTOL * trace(crlb_li)`.
pub fn certify_ordering(r: &CrlbResult) -> bool {
    r.psd_gap_eigmin >= -PSD_GAP_RTOL * r.crlb_li.trace()
}

/// Independent reference route: invert the FULL information matrix densely
/// and read off the leading 6x6 pose block. Works for the 12x12 LiDAR-only
/// joint and the 18x18 fused joint alike. Returns `None` when the joint is
/// singular.
pub fn dense_pose_block(joint: &DMatrix<f64>) -> Option<Matrix6<f64>> {
    let inv = joint.clone().lu().try_inverse()?;
    let mut out = Matrix6::zeros();
    for r in 0..6 {
        for c in 0..6 {
            out[(r, c)] = 0.5 * (inv[(r, c)] + inv[(c, r)]);
        }
    }
    Some(out)
}

/// One certification problem: LiDAR information over `[pose, lidar-extr]`
/// and odometry information over `[pose, odom-extr]`.
#[derive(Clone, Debug)]
pub struct CrlbInstance {
    pub lidar: SMatrix<f64, 12, 12>,
    pub odom: SMatrix<f64, 12, 12>,
}

impl CrlbInstance {
    pub fn blocks(&self) -> FisherBlocks {
        FisherBlocks::from_lidar(&self.lidar).with_odometry(&self.odom)
    }

    /// The assembled 18x18 joint (for the dense oracle and layout checks).
    pub fn joint(&self) -> SMatrix<f64, 18, 18> {
        self.blocks().assemble_joint()
    }

    /// The 12x12 LiDAR-only joint as a dynamic matrix (for the dense oracle).
    pub fn lidar_joint_dyn(&self) -> DMatrix<f64> {
        DMatrix::from_fn(12, 12, |r, c| self.lidar[(r, c)])
    }

    pub fn joint_dyn(&self) -> DMatrix<f64> {
        let j = self.joint();
        DMatrix::from_fn(18, 18, |r, c| j[(r, c)])
    }
}

/// Draws a random dense instance: 48 Gaussian LiDAR rows over
/// `[pose, lidar-extr]` and 12 Gaussian odometry rows over
/// `[pose, odom-extr]` (enough rows to keep `C` and `E` well conditioned),
/// with per-row noise sigmas spread over two decades.
pub fn synthetic_instance<R: Rng + ?Sized>(rng: &mut R) -> CrlbInstance {
    let draw = |rng: &mut R, rows: usize| -> (DMatrix<f64>, DVector<f64>) {
        let h = DMatrix::from_fn(rows, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let vars = DVector::from_fn(rows, |_, _| {
            let sigma = 10f64.powf(rng.random_range(-2.0..0.0));
            sigma * sigma
        });
        (h, vars)
    };
    let (h_li, r_li) = draw(rng, 48);
    let (h_od, r_od) = draw(rng, 12);
    let j_li = fisher(&h_li, &r_li);
    let j_od = fisher(&h_od, &r_od);
    CrlbInstance {
        lidar: SMatrix::from_fn(|r, c| j_li[(r, c)]),
        odom: SMatrix::from_fn(|r, c| j_od[(r, c)]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn max_abs6(m: &Matrix6<f64>) -> f64 {
        m.abs().max()
    }

    #[test]
    fn fisher_identity_rows() {
        let h = DMatrix::<f64>::identity(6, 6);
        let unit = DVector::from_element(6, 1.0);
        assert_eq!(fisher(&h, &unit), DMatrix::identity(6, 6));
        let quad = DVector::from_element(6, 4.0);
        assert_eq!(fisher(&h, &quad), DMatrix::identity(6, 6) * 0.25);
    }

    #[test]
    fn fisher_matches_dense_triple_product() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let h = DMatrix::from_fn(20, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let vars = DVector::from_fn(20, |_, _| rng.random_range(0.1..2.0));
        let j = fisher(&h, &vars);
        // Oracle: explicit H^T diag(1/r) H.
        let r_inv = DMatrix::from_diagonal(&vars.map(|v| 1.0 / v));
        let oracle = h.transpose() * r_inv * &h;
        assert!((j - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn split_identity_input() {
        let b = FisherBlocks::from_lidar(&SMatrix::identity());
        assert_eq!(b.u, Matrix6::identity());
        assert_eq!(b.c, Matrix6::identity());
        assert_eq!(b.b, Matrix6::zeros());
        assert_eq!(b.f, Matrix6::zeros());
    }

    #[test]
    fn joint_round_trips_through_split() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let inst = synthetic_instance(&mut rng);
        let blocks = inst.blocks();
        let joint = blocks.assemble_joint();
        let back = FisherBlocks::from_fused_joint(&joint).unwrap();
        assert!(max_abs6(&(back.u - (blocks.u + blocks.f))) < 1e-12);
        assert!(max_abs6(&(back.b - blocks.b)) < 1e-12);
        assert!(max_abs6(&(back.c - blocks.c)) < 1e-12);
        assert!(max_abs6(&(back.d - blocks.d)) < 1e-12);
        assert!(max_abs6(&(back.e - blocks.e)) < 1e-12);
    }

    #[test]
    fn forbidden_cross_block_is_exactly_zero_by_construction() {
        // Build the joint as fisher() of stacked rows with the documented
        // sparsity; the cross block must come out exactly zero.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut h = DMatrix::<f64>::zeros(30, 18);
        let mut vars = DVector::<f64>::zeros(30);
        for i in 0..18 {
            for c in 0..12 {
                h[(i, c)] = rng.sample::<f64, _>(StandardNormal); // pose + lidar-extr
            }
            vars[i] = rng.random_range(0.01..1.0);
        }
        for i in 18..30 {
            for c in 0..6 {
                h[(i, c)] = rng.sample::<f64, _>(StandardNormal); // pose
            }
            for c in 12..18 {
                h[(i, c)] = rng.sample::<f64, _>(StandardNormal); // odom-extr
            }
            vars[i] = rng.random_range(0.01..1.0);
        }
        let j = fisher(&h, &vars);
        let js: SMatrix<f64, 18, 18> = SMatrix::from_fn(|r, c| j[(r, c)]);
        let blocks = FisherBlocks::from_fused_joint(&js).expect("layout must validate");
        assert!(max_abs6(&blocks.e) > 0.0);
        for r in 6..12 {
            for c in 12..18 {
                assert_eq!(j[(r, c)], 0.0, "cross entry ({r},{c}) must be exactly zero");
            }
        }
    }

    #[test]
    fn layout_violation_is_reported() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut joint = synthetic_instance(&mut rng).joint();
        joint[(7, 13)] = 1e-3;
        joint[(13, 7)] = 1e-3;
        match FisherBlocks::from_fused_joint(&joint) {
            Err(CrlbError::LayoutViolation { max_abs }) => assert_relative_eq!(max_abs, 1e-3),
            other => panic!("expected layout violation, got {other:?}"),
        }
    }

    #[test]
    fn pure_lidar_decoupled_and_hand_cases() {
        // B = 0: bound is U^-1.
        let blocks = FisherBlocks {
            u: Matrix6::identity() * 2.0,
            c: Matrix6::identity(),
            ..Default::default()
        };
        let crlb = crlb_pure_lidar(&blocks).unwrap();
        assert!(max_abs6(&(crlb - Matrix6::identity() * 0.5)) < 1e-14);

        // U = 2I, B = I, C = 2I: Schur = 1.5I, bound = (1.5I)^-1.
        let blocks = FisherBlocks {
            u: Matrix6::identity() * 2.0,
            b: Matrix6::identity(),
            c: Matrix6::identity() * 2.0,
            ..Default::default()
        };
        let crlb = crlb_pure_lidar(&blocks).unwrap();
        assert!(max_abs6(&(crlb - Matrix6::identity() / 1.5)) < 1e-14);
    }

    #[test]
    fn pose_fusion_trivial_reductions() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let inst = synthetic_instance(&mut rng);
        let li_only = FisherBlocks::from_lidar(&inst.lidar);

        // F = D = 0 but E invertible: reduces to the pure-LiDAR bound.
        let mut blocks = li_only.clone();
        blocks.e = Matrix6::identity();
        let pf = crlb_pose_fusion(&blocks).unwrap();
        let li = crlb_pure_lidar(&li_only).unwrap();
        assert!(max_abs6(&(pf - li)) < 1e-12 * max_abs6(&li).max(1.0));

        // D = 0, F = I: bound is (Schur_li + I)^-1.
        blocks.f = Matrix6::identity();
        let pf = crlb_pose_fusion(&blocks).unwrap();
        let schur_li = li.try_inverse().unwrap();
        let oracle = (schur_li + Matrix6::identity()).try_inverse().unwrap();
        assert!(max_abs6(&(pf - oracle)) < 1e-10 * max_abs6(&oracle).max(1.0));
    }

    #[test]
    fn schur_route_matches_dense_inverse_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..20 {
            let inst = synthetic_instance(&mut rng);
            let blocks = inst.blocks();

            let li = crlb_pure_lidar(&blocks).unwrap();
            let li_dense = dense_pose_block(&inst.lidar_joint_dyn()).unwrap();
            let scale = max_abs6(&li_dense);
            assert!(
                max_abs6(&(li - li_dense)) <= 1e-8 * scale,
                "lidar-only Schur vs dense mismatch"
            );

            let pf = crlb_pose_fusion(&blocks).unwrap();
            let pf_dense = dense_pose_block(&inst.joint_dyn()).unwrap();
            let scale = max_abs6(&pf_dense);
            assert!(
                max_abs6(&(pf - pf_dense)) <= 1e-8 * scale,
                "fused Schur vs dense mismatch"
            );
        }
    }

    #[test]
    fn ordering_certified_on_random_instances_with_positive_gap() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for _ in 0..50 {
            let inst = synthetic_instance(&mut rng);
            let result = compare(&inst.blocks()).unwrap();
            assert!(certify_ordering(&result));
            // Random dense odometry information strictly tightens the bound.
            assert!(result.psd_gap_eigmin > 0.0);
        }
    }

    #[test]
    fn ordering_boundary_when_odometry_adds_nothing() {
        // F = D E^-1 D^T makes the odometry Schur term vanish: the two
        // bounds coincide and the gap sits at zero up to round-off.
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let inst = synthetic_instance(&mut rng);
        let mut blocks = inst.blocks();
        let e_inv = blocks.e.try_inverse().unwrap();
        blocks.f = blocks.d * e_inv * blocks.d.transpose();
        let result = compare(&blocks).unwrap();
        assert!(result.psd_gap_eigmin.abs() <= 1e-9 * result.crlb_li.trace());
        assert!(certify_ordering(&result));
    }

    #[test]
    fn full_column_rank_rows_give_positive_definite_information() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let h = DMatrix::from_fn(24, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let vars = DVector::from_element(24, 0.25);
        let j = fisher(&h, &vars);
        let eig_min = j
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(eig_min > 0.0, "full-rank rows must give PD information");
    }

    #[test]
    fn singular_extrinsic_block_is_rejected() {
        let blocks = FisherBlocks {
            u: Matrix6::identity(),
            ..Default::default()
        };
        match crlb_pure_lidar(&blocks) {
            Err(CrlbError::SingularBlock { which, .. }) => {
                assert!(which.contains("LiDAR-extrinsic"))
            }
            other => panic!("expected singular block, got {other:?}"),
        }
        // E singular only trips the fused bound.
        let mut blocks = FisherBlocks {
            u: Matrix6::identity(),
            c: Matrix6::identity(),
            ..Default::default()
        };
        assert!(crlb_pure_lidar(&blocks).is_ok());
        blocks.f = Matrix6::identity();
        match crlb_pose_fusion(&blocks) {
            Err(CrlbError::SingularBlock { which, .. }) => {
                assert!(which.contains("odometry-extrinsic"))
            }
            other => panic!("expected singular block, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Fusing any PSD odometry information never increases a diagonal
        /// entry of the pose bound.
        #[test]
        fn prop_fusion_never_inflates_pose_diagonal(seed in 0u64..1_000_000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let inst = synthetic_instance(&mut rng);
            let result = compare(&inst.blocks()).unwrap();
            let tol = 1e-9 * result.crlb_li.trace();
            for i in 0..6 {
                prop_assert!(result.crlb_pf[(i, i)] <= result.crlb_li[(i, i)] + tol);
            }
        }
    }
}
