//! Run and campaign configuration.
//!
//! Everything a run needs lives in one TOML document with a section per
//! subsystem; unknown keys are rejected everywhere so typos fail loudly
//! instead of silently falling back to defaults. The effective config is
//! echoed verbatim into every output directory, making results
//! self-describing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degeneracy::DegeneracyConfig;
use crate::iekf::{FusionMode, UpdateConfig};
use crate::imu::ImuNoise;
use crate::lidar::MatchConfig;
use crate::odometry::OdomNoiseModel;
use crate::sim::{FrameConfig, RigConfig, SimConfig};
use crate::state::{idx, CovMatrix, STATE_DIM};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// How the filter state is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Average a stationary IMU window for gyro bias and gravity.
    Stationary,
    /// Start from the dataset's exact initial state.
    Truth,
}

/// IMU continuous-time noise densities (the filter's process noise).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoiseSection {
    pub sigma_gyro: f64,
    pub sigma_acc: f64,
    pub sigma_gyro_walk: f64,
    pub sigma_acc_walk: f64,
}

impl Default for ImuNoiseSection {
    fn default() -> Self {
        ImuNoiseSection {
            sigma_gyro: 1e-3,
            sigma_acc: 1e-2,
            sigma_gyro_walk: 1e-5,
            sigma_acc_walk: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    /// Map dedup voxel size, m.
    pub voxel: f64,
    /// Unindexed tail length that triggers a kd-tree rebuild.
    pub rebuild_threshold: usize,
    /// Max sensor-to-point range for map insertion, m. The world-frame
    /// error of an inserted point grows with range times attitude error,
    /// so far returns are deferred until observed from closer by.
    pub insert_range: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            voxel: 0.25,
            rebuild_threshold: 4096,
            insert_range: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IekfSection {
    pub max_iter: usize,
    pub step_tol: f64,
    /// Point-to-plane residual gate, m.
    pub corr_gate: f64,
    pub plane_neighbors: usize,
    pub plane_tol: f64,
    /// In-plane spread of a fitted patch must exceed
    /// max(min_plane_spread, plane_spread_mult * sigma).
    pub min_plane_spread: f64,
    pub plane_spread_mult: f64,
    /// Plane fit rms must stay below max(mult * sigma, floor).
    pub plane_rms_mult: f64,
    pub plane_rms_floor: f64,
    /// Max query-to-nearest-map-point distance for matching, m.
    pub max_nn_dist: f64,
    pub freeze_extrinsics: bool,
    /// Scan decimation voxel before matching, m.
    pub scan_voxel: f64,
}

impl Default for IekfSection {
    fn default() -> Self {
        IekfSection {
            max_iter: 4,
            step_tol: 1e-6,
            corr_gate: 1.0,
            plane_neighbors: 5,
            plane_tol: 0.1,
            min_plane_spread: 0.03,
            plane_spread_mult: 1.5,
            plane_rms_mult: 1.5,
            plane_rms_floor: 1e-5,
            max_nn_dist: 0.5,
            freeze_extrinsics: true,
            scan_voxel: 0.4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegeneracySection {
    /// Eigenvalue thresholds in sqrt(row-weight) units; the pipeline scales
    /// them by the scan's 1/sigma before comparing.
    pub threshold_rot: f64,
    pub threshold_trans: f64,
}

impl Default for DegeneracySection {
    fn default() -> Self {
        let d = DegeneracyConfig::default();
        DegeneracySection {
            threshold_rot: d.threshold_rot,
            threshold_trans: d.threshold_trans,
        }
    }
}

/// Noise model for relative-pose measurements derived from the odometry
/// stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdomSection {
    pub sigma_rot_deg: f64,
    pub sigma_pos_per_m: f64,
    pub sigma_pos_floor: f64,
    /// Allowed extrapolation beyond the stream ends, s.
    pub extrap_tol: f64,
}

impl Default for OdomSection {
    fn default() -> Self {
        OdomSection {
            sigma_rot_deg: 0.5,
            sigma_pos_per_m: 0.02,
            sigma_pos_floor: 0.01,
            extrap_tol: 0.02,
        }
    }
}

/// Initial covariance diagonal, one variance per state block.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct P0Section {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub bias_gyro: f64,
    pub bias_acc: f64,
    pub gravity: f64,
    pub extrinsics: f64,
}

impl Default for P0Section {
    fn default() -> Self {
        P0Section {
            rot: 1e-4,
            pos: 1e-4,
            vel: 1e-2,
            bias_gyro: 1e-4,
            bias_acc: 1e-4,
            gravity: 1e-4,
            extrinsics: 1e-6,
        }
    }
}

/// Filter-side extrinsic priors (what the estimator believes, as opposed to
/// the simulator's true mounting).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicsSection {
    pub lidar: FrameConfig,
    pub odom: FrameConfig,
}

impl Default for ExtrinsicsSection {
    fn default() -> Self {
        let rig = RigConfig::default();
        ExtrinsicsSection {
            lidar: rig.lidar,
            odom: rig.odom,
        }
    }
}

/// Complete description of one filter run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub fusion_mode: FusionMode,
    pub init_mode: InitMode,
    /// Stationary initialization window, s.
    pub init_window: f64,
    pub imu_noise: ImuNoiseSection,
    pub map: MapSection,
    pub iekf: IekfSection,
    pub degeneracy: DegeneracySection,
    pub odometry: OdomSection,
    pub p0: P0Section,
    pub extrinsics: ExtrinsicsSection,
    /// Dataset synthesis parameters (used by `simulate` and campaigns).
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fusion_mode: FusionMode::DegenerationGated,
            init_mode: InitMode::Stationary,
            init_window: 1.0,
            imu_noise: ImuNoiseSection::default(),
            map: MapSection::default(),
            iekf: IekfSection::default(),
            degeneracy: DegeneracySection::default(),
            odometry: OdomSection::default(),
            p0: P0Section::default(),
            extrinsics: ExtrinsicsSection::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.init_window <= 0.0 {
            return Err(ConfigError::Invalid("init_window must be positive".into()));
        }
        if self.iekf.max_iter == 0 {
            return Err(ConfigError::Invalid("iekf.max_iter must be >= 1".into()));
        }
        if self.map.voxel <= 0.0 || self.iekf.scan_voxel <= 0.0 {
            return Err(ConfigError::Invalid("voxel sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn imu_noise(&self) -> ImuNoise {
        ImuNoise {
            sigma_gyro: self.imu_noise.sigma_gyro,
            sigma_acc: self.imu_noise.sigma_acc,
            sigma_gyro_walk: self.imu_noise.sigma_gyro_walk,
            sigma_acc_walk: self.imu_noise.sigma_acc_walk,
        }
    }

    pub fn odom_noise(&self) -> OdomNoiseModel {
        OdomNoiseModel {
            sigma_rot: self.odometry.sigma_rot_deg.to_radians(),
            sigma_pos_per_m: self.odometry.sigma_pos_per_m,
            sigma_pos_floor: self.odometry.sigma_pos_floor,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            max_iter: self.iekf.max_iter,
            step_tol: self.iekf.step_tol,
            match_cfg: MatchConfig {
                plane_neighbors: self.iekf.plane_neighbors,
                plane_tol: self.iekf.plane_tol,
                min_plane_spread: self.iekf.min_plane_spread,
                plane_spread_mult: self.iekf.plane_spread_mult,
                plane_rms_mult: self.iekf.plane_rms_mult,
                plane_rms_floor: self.iekf.plane_rms_floor,
                max_nn_dist: self.iekf.max_nn_dist,
                corr_gate: self.iekf.corr_gate,
            },
            degeneracy: DegeneracyConfig {
                threshold_rot: self.degeneracy.threshold_rot,
                threshold_trans: self.degeneracy.threshold_trans,
            },
            fusion: self.fusion_mode,
            freeze_extrinsics: self.iekf.freeze_extrinsics,
            ..UpdateConfig::default()
        }
    }

    /// Initial covariance: block-diagonal from the configured variances.
    /// Frozen extrinsics get exactly zero so the zero rows/columns assert
    /// the blocks are never touched.
    pub fn p0(&self) -> CovMatrix {
        let mut p = CovMatrix::zeros();
        let extr = if self.iekf.freeze_extrinsics {
            0.0
        } else {
            self.p0.extrinsics
        };
        for i in 0..STATE_DIM {
            p[(i, i)] = match i {
                i if i < idx::POS => self.p0.rot,
                i if i < idx::VEL => self.p0.pos,
                i if i < idx::BG => self.p0.vel,
                i if i < idx::BA => self.p0.bias_gyro,
                i if i < idx::GRAV => self.p0.bias_acc,
                i if i < idx::THETA_IL => self.p0.gravity,
                _ => extr,
            };
        }
        p
    }
}

/// Monte Carlo comparison specification: the cross product of noise levels,
/// seeds, and fusion modes over one base configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSpec {
    /// LiDAR range-noise levels, m.
    pub sigmas: Vec<f64>,
    /// Independent seeds per noise level.
    pub runs: usize,
    pub modes: Vec<FusionMode>,
    /// Seed of the first run; run k uses base_seed + k.
    pub base_seed: u64,
    pub base: RunConfig,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        CampaignSpec {
            sigmas: vec![0.03, 0.05, 0.07, 0.09],
            runs: 20,
            modes: vec![FusionMode::DegenerationGated, FusionMode::LidarOnly],
            base_seed: 1,
            base: RunConfig::default(),
        }
    }
}

impl CampaignSpec {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let spec: CampaignSpec = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("campaign spec serializes")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.runs == 0 {
            return Err(ConfigError::Invalid("campaign runs must be >= 1".into()));
        }
        if self.sigmas.is_empty() || self.modes.is_empty() {
            return Err(ConfigError::Invalid(
                "campaign needs at least one sigma and one mode".into(),
            ));
        }
        self.base.validate()
    }
}
