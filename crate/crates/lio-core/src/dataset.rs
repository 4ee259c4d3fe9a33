//! On-disk dataset layout.
//!
//! A dataset directory is fully self-contained:
//!
//! ```text
//! imu.csv             t,gx,gy,gz,ax,ay,az
//! odom.csv            t,x,y,z,qw,qx,qy,qz
//! scans/scan_<k>.csv  "# end_time=<t> sigma=<s>" header, then offset_t,x,y,z
//! ground_truth.tum    t x y z qx qy qz qw
//! config.toml         the synthesis config that produced the data
//! ```
//!
//! All floats are written with Rust's shortest round-trip formatting, so
//! write → read → write reproduces identical bytes. Timestamps must be
//! strictly increasing within each stream; scan indices must be contiguous
//! from zero.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::eval::{self, TumPose};
use crate::imu::ImuSample;
use crate::lidar::{LidarScan, ScanPoint};
use crate::odometry::OdomPose;
use crate::sim::{self, Dataset, SimConfig, TruthPose};

#[derive(Debug, Error)]
pub enum DatasetError {
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
    #[error("{path}: {what}")]
    Layout { path: String, what: String },
    #[error(transparent)]
    Trajectory(#[from] eval::EvalError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes every stream of `data` plus the config echo into `dir`, creating
/// the directory if needed.
pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &SimConfig) -> Result<(), DatasetError> {
    let scans_dir = dir.join("scans");
    std::fs::create_dir_all(&scans_dir).map_err(io_err(&scans_dir))?;

    let mut imu = String::from("t,gx,gy,gz,ax,ay,az\n");
    for s in &data.imu {
        writeln!(
            imu,
            "{},{},{},{},{},{},{}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.acc.x, s.acc.y, s.acc.z
        )
        .expect("string write");
    }
    let path = dir.join("imu.csv");
    std::fs::write(&path, imu).map_err(io_err(&path))?;

    let mut odom = String::from("t,x,y,z,qw,qx,qy,qz\n");
    for p in &data.odom {
        let [w, x, y, z] = p.rot.quaternion_wxyz();
        writeln!(
            odom,
            "{},{},{},{},{},{},{},{}",
            p.t, p.pos.x, p.pos.y, p.pos.z, w, x, y, z
        )
        .expect("string write");
    }
    let path = dir.join("odom.csv");
    std::fs::write(&path, odom).map_err(io_err(&path))?;

    for (k, scan) in data.scans.iter().enumerate() {
        let mut text = format!("# end_time={} sigma={}\n", scan.end_time, scan.sigma);
        text.push_str("offset_t,x,y,z\n");
        for p in &scan.points {
            writeln!(text, "{},{},{},{}", p.offset, p.pos.x, p.pos.y, p.pos.z)
                .expect("string write");
        }
        let path = scans_dir.join(format!("scan_{k}.csv"));
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }

    let tum: Vec<TumPose> = data
        .ground_truth
        .iter()
        .map(|p| TumPose {
            t: p.t,
            pos: p.pos,
            rot: p.rot.clone(),
        })
        .collect();
    eval::write_tum(&dir.join("ground_truth.tum"), &tum)?;

    let path = dir.join("config.toml");
    let text = toml::to_string_pretty(cfg).expect("sim config serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

/// Splits one CSV data line into exactly `n` floats, with file/line context
/// on any failure.
fn parse_floats(path: &Path, line: usize, raw: &str, n: usize) -> Result<Vec<f64>, DatasetError> {
    let err = |what: String| DatasetError::Parse {
        path: path.display().to_string(),
        line,
        what,
    };
    let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
    if fields.len() != n {
        return Err(err(format!("expected {n} fields, found {}", fields.len())));
    }
    fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.parse()
                .map_err(|e| err(format!("field {}: {e}", i + 1)))
        })
        .collect()
}

fn check_increasing(path: &Path, line: usize, prev: Option<f64>, t: f64) -> Result<(), DatasetError> {
    if let Some(p) = prev {
        if t <= p {
            return Err(DatasetError::Parse {
                path: path.display().to_string(),
                line,
                what: format!("timestamps must increase: {t} after {p}"),
            });
        }
    }
    Ok(())
}

fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (idx, raw) in text.lines().enumerate().skip(1) {
        if raw.trim().is_empty() {
            continue;
        }
        let v = parse_floats(path, idx + 1, raw, 7)?;
        check_increasing(path, idx + 1, out.last().map(|s| s.t), v[0])?;
        out.push(ImuSample {
            t: v[0],
            gyro: Vector3::new(v[1], v[2], v[3]),
            acc: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

fn read_odom_csv(path: &Path) -> Result<Vec<OdomPose>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: Vec<OdomPose> = Vec::new();
    for (idx, raw) in text.lines().enumerate().skip(1) {
        if raw.trim().is_empty() {
            continue;
        }
        let v = parse_floats(path, idx + 1, raw, 8)?;
        check_increasing(path, idx + 1, out.last().map(|p| p.t), v[0])?;
        out.push(OdomPose {
            t: v[0],
            rot: eval::parse_quaternion(v[4], v[5], v[6], v[7]),
            pos: Vector3::new(v[1], v[2], v[3]),
        });
    }
    Ok(out)
}

fn read_scan_csv(path: &Path) -> Result<LidarScan, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |line: usize, what: String| DatasetError::Parse {
        path: path.display().to_string(),
        line,
        what,
    };
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty scan file".into()))?;
    let rest = header
        .strip_prefix("# end_time=")
        .ok_or_else(|| parse_err(1, "expected '# end_time=<t> sigma=<s>' header".into()))?;
    let (end_str, sigma_part) = rest
        .split_once(" sigma=")
        .ok_or_else(|| parse_err(1, "expected 'sigma=' in header".into()))?;
    let end_time: f64 = end_str
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("end_time: {e}")))?;
    let sigma: f64 = sigma_part
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("sigma: {e}")))?;

    lines
        .next()
        .ok_or_else(|| parse_err(2, "missing column header".into()))?;

    let mut points = Vec::new();
    for (idx, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let v = parse_floats(path, idx + 1, raw, 4)?;
        if v[0] > 0.0 {
            return Err(parse_err(
                idx + 1,
                format!("offset_t must be <= 0, found {}", v[0]),
            ));
        }
        points.push(ScanPoint {
            offset: v[0],
            pos: Vector3::new(v[1], v[2], v[3]),
        });
    }
    Ok(LidarScan {
        end_time,
        sigma,
        points,
    })
}

/// Scan files must be `scan_0.csv .. scan_{n-1}.csv` with no gaps or
/// strangers; returns them ordered by index.
fn scan_paths(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let scans_dir = dir.join("scans");
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(&scans_dir).map_err(io_err(&scans_dir))? {
        let entry = entry.map_err(io_err(&scans_dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let k: usize = name
            .strip_prefix("scan_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Layout {
                path: scans_dir.display().to_string(),
                what: format!("unexpected file {name:?}, want scan_<k>.csv"),
            })?;
        indices.push(k);
    }
    indices.sort_unstable();
    for (want, got) in indices.iter().enumerate() {
        if *got != want {
            return Err(DatasetError::Layout {
                path: scans_dir.display().to_string(),
                what: format!("scan indices not contiguous: expected scan_{want}, found scan_{got}"),
            });
        }
    }
    Ok(indices
        .iter()
        .map(|k| scans_dir.join(format!("scan_{k}.csv")))
        .collect())
}

/// Reads a dataset directory back. The initial truth state is reconstructed
/// from the config echo, so the directory alone is sufficient to rerun or
/// re-evaluate anything.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, SimConfig), DatasetError> {
    let cfg_path = dir.join("config.toml");
    let cfg_text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg: SimConfig = toml::from_str(&cfg_text).map_err(|e| DatasetError::Parse {
        path: cfg_path.display().to_string(),
        line: 0,
        what: e.to_string(),
    })?;

    let imu = read_imu_csv(&dir.join("imu.csv"))?;
    let odom = read_odom_csv(&dir.join("odom.csv"))?;

    let mut scans = Vec::new();
    let mut prev_end: Option<f64> = None;
    for path in scan_paths(dir)? {
        let scan = read_scan_csv(&path)?;
        check_increasing(&path, 1, prev_end, scan.end_time)?;
        prev_end = Some(scan.end_time);
        scans.push(scan);
    }

    let ground_truth: Vec<TruthPose> = eval::read_tum(&dir.join("ground_truth.tum"))?
        .into_iter()
        .map(|p| TruthPose {
            t: p.t,
            rot: p.rot,
            pos: p.pos,
        })
        .collect();

    let initial_truth = sim::initial_truth(&cfg);
    Ok((
        Dataset {
            imu,
            odom,
            scans,
            ground_truth,
            initial_truth,
        },
        cfg,
    ))
}
