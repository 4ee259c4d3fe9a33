//! Trajectory evaluation: TUM-format I/O, timestamp association, rigid
//! alignment, absolute trajectory error, and Monte Carlo aggregation.
//!
//! ATE here is the translational error after the best rigid (no-scale)
//! alignment of the estimate onto the ground truth, the standard way to
//! compare odometry outputs that start in different frames.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::manifold::Rotation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {what}")]
    Parse {
        path: String,
        line: usize,
        what: String,
    },
    #[error("no timestamp pairs within tolerance; trajectories do not overlap")]
    NoOverlap,
    #[error("degenerate point configuration; rigid alignment needs >= 3 spread-out pairs")]
    DegenerateGeometry,
    #[error("empty input")]
    Empty,
}

/// One timestamped pose (TUM convention: world position + body-to-world
/// quaternion).
#[derive(Clone, Debug)]
pub struct TumPose {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub rot: Rotation,
}

/// Parses quaternion components, trusting them verbatim when they are
/// within round-off of unit norm (so our own files re-serialize
/// byte-identically) and renormalizing genuinely off-sphere input.
pub(crate) fn parse_quaternion(w: f64, x: f64, y: f64, z: f64) -> Rotation {
    let norm_sq = w * w + x * x + y * y + z * z;
    if (norm_sq - 1.0).abs() < 1e-9 {
        Rotation::from_quaternion_wxyz_trusted(w, x, y, z)
    } else {
        Rotation::from_quaternion_wxyz(w, x, y, z)
    }
}

/// Reads a TUM trajectory: `t x y z qx qy qz qw` per line, `#` comments
/// allowed, timestamps strictly increasing.
pub fn read_tum(path: &Path) -> Result<Vec<TumPose>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let parse_err = |what: String| EvalError::Parse {
            path: path.display().to_string(),
            line,
            what,
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_ascii_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse()
                .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))?;
        }
        if let Some(prev) = out.last() {
            let prev: &TumPose = prev;
            if vals[0] <= prev.t {
                return Err(parse_err(format!(
                    "timestamps must increase: {} after {}",
                    vals[0], prev.t
                )));
            }
        }
        out.push(TumPose {
            t: vals[0],
            pos: Vector3::new(vals[1], vals[2], vals[3]),
            rot: parse_quaternion(vals[7], vals[4], vals[5], vals[6]),
        });
    }
    Ok(out)
}

/// Serializes a TUM trajectory. Floats use the shortest round-trip form so
/// identical poses always produce identical bytes.
pub fn format_tum(poses: &[TumPose]) -> String {
    let mut s = String::new();
    for p in poses {
        let [w, x, y, z] = p.rot.quaternion_wxyz();
        writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            p.t, p.pos.x, p.pos.y, p.pos.z, x, y, z, w
        )
        .expect("string write");
    }
    s
}

pub fn write_tum(path: &Path, poses: &[TumPose]) -> Result<(), EvalError> {
    std::fs::write(path, format_tum(poses)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A matched (estimate, ground-truth) position pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub t: f64,
    pub est: Vector3<f64>,
    pub gt: Vector3<f64>,
}

/// Greedy nearest-timestamp association. Both inputs must be sorted by
/// time; each ground-truth pose is used at most once; pairs beyond
/// `max_dt` apart are dropped.
pub fn associate(est: &[TumPose], gt: &[TumPose], max_dt: f64) -> Result<Vec<Pair>, EvalError> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for e in est {
        if j >= gt.len() {
            break;
        }
        while j + 1 < gt.len() && (gt[j + 1].t - e.t).abs() < (gt[j].t - e.t).abs() {
            j += 1;
        }
        if (gt[j].t - e.t).abs() <= max_dt {
            pairs.push(Pair {
                t: e.t,
                est: e.pos,
                gt: gt[j].pos,
            });
            j += 1;
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(pairs)
}

/// Rigid transform (rotation then translation).
#[derive(Clone, Debug)]
pub struct RigidTransform {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rot: Rotation::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.rotate(p) + self.trans
    }
}

/// Closed-form least-squares rigid alignment (rotation + translation, no
/// scale) minimizing `sum |T(est) - gt|^2` over the pairs.
pub fn align_se3(pairs: &[Pair]) -> Result<RigidTransform, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let n = pairs.len() as f64;
    let mean_est = pairs.iter().map(|p| p.est).sum::<Vector3<f64>>() / n;
    let mean_gt = pairs.iter().map(|p| p.gt).sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::<f64>::zeros();
    for p in pairs {
        w += (p.gt - mean_gt) * (p.est - mean_est).transpose();
    }
    let svd = w.svd(true, true);
    let sv = svd.singular_values;
    // Collinear or coincident points leave the rotation underdetermined.
    if sv[1] < 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(EvalError::DegenerateGeometry);
    }
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let det = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r_mat = u * fix * v_t;
    let rot = Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(r_mat),
    ));
    let trans = mean_gt - rot.rotate(&mean_est);
    Ok(RigidTransform { rot, trans })
}

/// Translational ATE statistics.
#[derive(Clone, Debug)]
pub struct AteStats {
    pub n: usize,
    pub mean: f64,
    pub rmse: f64,
    pub max: f64,
    pub errors: Vec<f64>,
}

/// Per-pair Euclidean position errors after applying `transform` to the
/// estimate.
pub fn ate(pairs: &[Pair], transform: &RigidTransform) -> AteStats {
    let errors: Vec<f64> = pairs
        .iter()
        .map(|p| (transform.apply(&p.est) - p.gt).norm())
        .collect();
    let n = errors.len();
    let nf = n.max(1) as f64;
    let mean = errors.iter().sum::<f64>() / nf;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let max = errors.iter().cloned().fold(0.0, f64::max);
    AteStats {
        n,
        mean,
        rmse,
        max,
        errors,
    }
}

/// Associates, aligns, and scores in one call.
pub fn evaluate_ate(est: &[TumPose], gt: &[TumPose], max_dt: f64) -> Result<AteStats, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let transform = align_se3(&pairs)?;
    Ok(ate(&pairs, &transform))
}

/// Box-plot summary: quartiles by linear interpolation plus Tukey
/// 1.5 * IQR whiskers clamped to observed values.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linear-interpolation quantile (the common "type 7" convention):
/// `h = (n-1) q`, interpolate between the bracketing order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(values: &[f64]) -> Result<BoxStats, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo = sorted
        .iter()
        .cloned()
        .find(|v| *v >= lo_fence)
        .unwrap_or(sorted[0]);
    let whisker_hi = sorted
        .iter()
        .rev()
        .cloned()
        .find(|v| *v <= hi_fence)
        .unwrap_or(*sorted.last().expect("nonempty"));
    Ok(BoxStats {
        n: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median,
        q1,
        q3,
        whisker_lo,
        whisker_hi,
    })
}
