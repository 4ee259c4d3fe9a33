//! Synthetic world, trajectory, and sensor streams.
//!
//! Everything here is a pure function of (config, seed). The world is a set
//! of rectangular planar patches (a corridor by default); the trajectory is
//! an analytic arc-length-parameterized path with closed-form velocity,
//! acceleration, attitude, and body angular rate, so IMU synthesis never
//! differentiates numerically. Sensor streams share one base seed with a
//! fixed ChaCha stream id per subsystem (IMU = 1, LiDAR = 2, odometry = 3),
//! which makes every stream byte-reproducible and independent of the others.
//!
//! All sample timestamps are integer multiples of the IMU period, so scan
//! ends and odometry stamps land exactly on IMU stamps with no floating-
//! point epsilon comparisons downstream.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::imu::{ImuNoise, ImuSample};
use crate::lidar::{LidarScan, ScanPoint};
use crate::manifold::{exp_so3, Rotation};
use crate::odometry::OdomPose;
use crate::state::{NavState, STANDARD_GRAVITY};

/// Rectangular planar patch: center, unit normal, and two in-plane axes
/// with half-extents.
#[derive(Clone, Debug)]
pub struct Patch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    pub fn new(
        center: Vector3<f64>,
        normal: Vector3<f64>,
        axis_u: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    ) -> Patch {
        let normal = normal.normalize();
        let axis_u = (axis_u - normal * normal.dot(&axis_u)).normalize();
        let axis_v = normal.cross(&axis_u);
        Patch {
            center,
            normal,
            axis_u,
            axis_v,
            half_u,
            half_v,
        }
    }

    /// Ray-patch intersection range, if the hit lies inside the extents.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let range = self.normal.dot(&(self.center - origin)) / denom;
        if range <= 0.0 {
            return None;
        }
        let rel = origin + dir * range - self.center;
        if self.axis_u.dot(&rel).abs() <= self.half_u && self.axis_v.dot(&rel).abs() <= self.half_v
        {
            Some(range)
        } else {
            None
        }
    }
}

/// A set of patches; rays return the nearest hit.
#[derive(Clone, Debug)]
pub struct World {
    pub patches: Vec<Patch>,
}

impl World {
    /// Nearest hit range within `(min_range, max_range]`.
    pub fn raycast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        const MIN_RANGE: f64 = 0.1;
        let mut best: Option<f64> = None;
        for patch in &self.patches {
            if let Some(r) = patch.intersect(origin, dir) {
                if r > MIN_RANGE && r <= max_range && best.is_none_or(|b| r < b) {
                    best = Some(r);
                }
            }
        }
        best
    }
}

/// Axis-aligned corridor: floor at z = 0, ceiling at z = height, walls at
/// y = +/- width/2, running along x in [0, length]. With `end_caps`, walls
/// at x = 0 and x = length close it off (a room is a short capped
/// corridor).
pub fn build_corridor(length: f64, width: f64, height: f64, end_caps: bool) -> World {
    assert!(length > 0.0 && width > 0.0 && height > 0.0);
    let (hx, hy, hz) = (length / 2.0, width / 2.0, height / 2.0);
    let cx = hx;
    let cz = hz;
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let mut patches = vec![
        Patch::new(Vector3::new(cx, 0.0, 0.0), z, x, hx, hy), // floor
        Patch::new(Vector3::new(cx, 0.0, height), -z, x, hx, hy), // ceiling
        Patch::new(Vector3::new(cx, -hy, cz), y, x, hx, hz),  // wall y-
        Patch::new(Vector3::new(cx, hy, cz), -y, x, hx, hz),  // wall y+
    ];
    if end_caps {
        patches.push(Patch::new(Vector3::new(0.0, 0.0, cz), x, y, hy, hz));
        patches.push(Patch::new(Vector3::new(length, 0.0, cz), -x, y, hy, hz));
    }
    World { patches }
}

/// World geometry as configured.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub end_caps: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            length: 40.0,
            width: 4.0,
            height: 3.0,
            end_caps: false,
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> World {
        build_corridor(self.length, self.width, self.height, self.end_caps)
    }
}

/// A rotation expressed as a rotation vector in degrees plus a translation,
/// the TOML-friendly form of a rigid transform.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub rotvec_deg: [f64; 3],
    pub pos: [f64; 3],
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            rotvec_deg: [0.0; 3],
            pos: [0.0; 3],
        }
    }
}

impl FrameConfig {
    pub fn rotation(&self) -> Rotation {
        let v = Vector3::new(
            self.rotvec_deg[0].to_radians(),
            self.rotvec_deg[1].to_radians(),
            self.rotvec_deg[2].to_radians(),
        );
        exp_so3(&v)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.pos[0], self.pos[1], self.pos[2])
    }
}

/// Arc-length-parameterized path: the robot holds still, ramps smoothly up
/// to cruise speed, then advances at constant speed along x with sinusoidal
/// lateral/vertical sway and sinusoidal roll/pitch/yaw, all functions of
/// the traveled arc progress so the whole state freezes while stationary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub start: [f64; 3],
    pub speed: f64,
    /// Seconds at rest before moving (the filter's initialization window).
    pub stationary_time: f64,
    /// Seconds spent smoothly ramping from rest to cruise speed.
    pub ramp_time: f64,
    pub sway_amp_y: f64,
    pub sway_wavelength_y: f64,
    pub sway_amp_z: f64,
    pub sway_wavelength_z: f64,
    /// Roll/pitch/yaw sway amplitudes, degrees.
    pub attitude_amp_deg: [f64; 3],
    /// Roll/pitch/yaw sway wavelengths along the path, m.
    pub attitude_wavelength: [f64; 3],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            start: [2.0, 0.0, 1.5],
            speed: 1.0,
            stationary_time: 1.0,
            ramp_time: 2.0,
            sway_amp_y: 0.1,
            sway_wavelength_y: 7.0,
            sway_amp_z: 0.1,
            sway_wavelength_z: 11.0,
            attitude_amp_deg: [5.0, 5.0, 5.0],
            attitude_wavelength: [9.0, 6.0, 5.0],
        }
    }
}

/// Trajectory state at one instant, all closed form.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
    pub rot: Rotation,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
}

/// Arc progress s(t) with first and second time derivatives: zero while
/// stationary, a C1 smoothstep speed ramp, then constant speed.
fn arc_progress(cfg: &TrajectoryConfig, t: f64) -> (f64, f64, f64) {
    let t0 = cfg.stationary_time;
    let tr = cfg.ramp_time.max(1e-9);
    let v = cfg.speed;
    if t <= t0 {
        (0.0, 0.0, 0.0)
    } else if t < t0 + tr {
        let u = (t - t0) / tr;
        // speed = v u^2 (3 - 2u), integrated and differentiated exactly.
        let s = v * tr * (u * u * u - 0.5 * u * u * u * u);
        let sd = v * u * u * (3.0 - 2.0 * u);
        let sdd = v * (6.0 * u - 6.0 * u * u) / tr;
        (s, sd, sdd)
    } else {
        let s_ramp = 0.5 * v * tr;
        (s_ramp + v * (t - t0 - tr), v, 0.0)
    }
}

/// Evaluates the analytic trajectory at time `t`.
pub fn sample_trajectory(cfg: &TrajectoryConfig, t: f64) -> TrajectorySample {
    let (s, sd, sdd) = arc_progress(cfg, t);
    let start = Vector3::new(cfg.start[0], cfg.start[1], cfg.start[2]);

    let ky = 2.0 * std::f64::consts::PI / cfg.sway_wavelength_y;
    let kz = 2.0 * std::f64::consts::PI / cfg.sway_wavelength_z;
    // Position and its derivatives with respect to arc progress.
    let p_s = Vector3::new(
        1.0,
        cfg.sway_amp_y * ky * (ky * s).cos(),
        cfg.sway_amp_z * kz * (kz * s).cos(),
    );
    let p_ss = Vector3::new(
        0.0,
        -cfg.sway_amp_y * ky * ky * (ky * s).sin(),
        -cfg.sway_amp_z * kz * kz * (kz * s).sin(),
    );
    let pos = start
        + Vector3::new(
            s,
            cfg.sway_amp_y * (ky * s).sin(),
            cfg.sway_amp_z * (kz * s).sin(),
        );
    let vel = p_s * sd;
    let acc = p_ss * (sd * sd) + p_s * sdd;

    // Roll/pitch/yaw angles and their arc derivatives.
    let mut ang = [0.0; 3];
    let mut ang_s = [0.0; 3];
    for i in 0..3 {
        let amp = cfg.attitude_amp_deg[i].to_radians();
        let k = 2.0 * std::f64::consts::PI / cfg.attitude_wavelength[i];
        ang[i] = amp * (k * s).sin();
        ang_s[i] = amp * k * (k * s).cos();
    }
    let (roll, pitch, yaw) = (ang[0], ang[1], ang[2]);
    let (roll_d, pitch_d, yaw_d) = (ang_s[0] * sd, ang_s[1] * sd, ang_s[2] * sd);

    // R = Rz(yaw) Ry(pitch) Rx(roll).
    let rot = exp_so3(&(Vector3::z() * yaw))
        .compose(&exp_so3(&(Vector3::y() * pitch)))
        .compose(&exp_so3(&(Vector3::x() * roll)));

    // Body angular rate for ZYX Euler angles.
    let (sr, cr) = (roll.sin(), roll.cos());
    let (sp, cp) = (pitch.sin(), pitch.cos());
    let omega = Vector3::new(
        roll_d - yaw_d * sp,
        pitch_d * cr + yaw_d * cp * sr,
        yaw_d * cp * cr - pitch_d * sr,
    );

    TrajectorySample {
        pos,
        vel,
        acc,
        rot,
        omega,
    }
}

/// Sensor mounting and sampling pattern.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// LiDAR frame in the body frame.
    pub lidar: FrameConfig,
    /// Odometry frame in the body frame.
    pub odom: FrameConfig,
    pub beams: usize,
    /// Vertical field of view +/- this many degrees.
    pub vertical_fov_deg: f64,
    pub azimuth_step_deg: f64,
    pub scan_rate: f64,
    pub max_range: f64,
    pub imu_rate: f64,
    /// Probability that a returned point is dropped (0 disables, and then
    /// consumes no random draws).
    pub drop_probability: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            lidar: FrameConfig {
                rotvec_deg: [0.0, 0.0, 0.5],
                pos: [0.08, 0.02, 0.12],
            },
            odom: FrameConfig {
                rotvec_deg: [0.0, 0.0, -1.0],
                pos: [-0.10, 0.05, -0.30],
            },
            beams: 16,
            vertical_fov_deg: 15.0,
            azimuth_step_deg: 1.0,
            scan_rate: 10.0,
            max_range: 20.0,
            imu_rate: 200.0,
            drop_probability: 0.0,
        }
    }
}

/// Odometry stream synthesis parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdomSimConfig {
    pub rate: f64,
    /// Per-step rotation noise, degrees.
    pub sigma_rot_deg: f64,
    /// Per-step translation noise as a fraction of the step length.
    pub sigma_pos_per_m: f64,
    /// Systematic scale error on translation increments.
    pub drift: f64,
    /// Odometry origin frame {M} expressed in {G}; deliberately not
    /// identity so frame-composition bugs cannot hide.
    pub origin: FrameConfig,
}

impl Default for OdomSimConfig {
    fn default() -> Self {
        OdomSimConfig {
            rate: 20.0,
            sigma_rot_deg: 0.3,
            sigma_pos_per_m: 0.015,
            drift: 0.0,
            origin: FrameConfig {
                rotvec_deg: [0.0, 0.0, 30.0],
                pos: [5.0, -3.0, 0.2],
            },
        }
    }
}

/// IMU noise densities plus initial bias values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuSimConfig {
    pub sigma_gyro: f64,
    pub sigma_acc: f64,
    pub sigma_gyro_walk: f64,
    pub sigma_acc_walk: f64,
    pub bias_gyro0: [f64; 3],
    pub bias_acc0: [f64; 3],
}

impl Default for ImuSimConfig {
    fn default() -> Self {
        ImuSimConfig {
            sigma_gyro: 1e-3,
            sigma_acc: 1e-2,
            sigma_gyro_walk: 1e-5,
            sigma_acc_walk: 1e-4,
            bias_gyro0: [2e-3, -1e-3, 1.5e-3],
            bias_acc0: [1e-2, -1e-2, 2e-2],
        }
    }
}

impl ImuSimConfig {
    pub fn noise(&self) -> ImuNoise {
        ImuNoise {
            sigma_gyro: self.sigma_gyro,
            sigma_acc: self.sigma_acc,
            sigma_gyro_walk: self.sigma_gyro_walk,
            sigma_acc_walk: self.sigma_acc_walk,
        }
    }
}

/// Full synthesis description. `simulate` consumes exactly this.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    /// LiDAR range noise standard deviation, m.
    pub lidar_sigma: f64,
    /// Sample each point from the moving pose at its own timestamp.
    pub distort: bool,
    /// Scale all sensor noise to zero (for noise-free regression runs).
    pub noise_free: bool,
    pub world: WorldConfig,
    pub trajectory: TrajectoryConfig,
    pub rig: RigConfig,
    pub imu: ImuSimConfig,
    pub odometry: OdomSimConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            duration: 18.0,
            lidar_sigma: 0.05,
            distort: true,
            noise_free: false,
            world: WorldConfig::default(),
            trajectory: TrajectoryConfig::default(),
            rig: RigConfig::default(),
            imu: ImuSimConfig::default(),
            odometry: OdomSimConfig::default(),
        }
    }
}

/// Ground-truth body pose at one timestamp.
#[derive(Clone, Debug)]
pub struct TruthPose {
    pub t: f64,
    pub rot: Rotation,
    pub pos: Vector3<f64>,
}

/// Everything a filter run needs, in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub odom: Vec<OdomPose>,
    pub scans: Vec<LidarScan>,
    pub ground_truth: Vec<TruthPose>,
    /// Full true state at t = 0 (for truth-initialized runs).
    pub initial_truth: NavState,
}

/// The exact simulated state at t = 0 (initial biases, extrinsics, and the
/// standard gravity vector included), reconstructible from the config alone.
pub fn initial_truth(cfg: &SimConfig) -> NavState {
    let s0 = sample_trajectory(&cfg.trajectory, 0.0);
    let mut x = NavState::default();
    x.rot = s0.rot;
    x.pos = s0.pos;
    x.vel = s0.vel;
    x.bias_gyro = Vector3::from(cfg.imu.bias_gyro0);
    x.bias_acc = Vector3::from(cfg.imu.bias_acc0);
    x.rot_il = cfg.rig.lidar.rotation();
    x.pos_il = cfg.rig.lidar.translation();
    x.rot_io = cfg.rig.odom.rotation();
    x.pos_io = cfg.rig.odom.translation();
    x
}

fn draw3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// One IMU measurement at time `t` given current biases (no noise; the
/// stream generator adds it).
pub fn synth_imu_clean(
    traj: &TrajectoryConfig,
    t: f64,
    bias_gyro: &Vector3<f64>,
    bias_acc: &Vector3<f64>,
) -> ImuSample {
    let s = sample_trajectory(traj, t);
    let gravity_up = Vector3::new(0.0, 0.0, STANDARD_GRAVITY);
    ImuSample {
        t,
        gyro: s.omega + bias_gyro,
        acc: s.rot.rotate_inv(&(s.acc + gravity_up)) + bias_acc,
    }
}

/// Casts one scan ending at `end_time`. Columns sweep azimuth uniformly
/// over the scan period (the last column lands exactly on `end_time`); all
/// beams of a column share its timestamp. Point coordinates are in the
/// LiDAR frame at the point's own sample time when `distort` is set, else
/// at the scan-end pose; recorded offsets are the true column times either
/// way.
#[allow(clippy::too_many_arguments)]
pub fn raycast_scan<R: Rng>(
    world: &World,
    traj: &TrajectoryConfig,
    end_time: f64,
    rig: &RigConfig,
    sigma: f64,
    rng: &mut R,
    distort: bool,
) -> LidarScan {
    let period = 1.0 / rig.scan_rate;
    let n_az = (360.0 / rig.azimuth_step_deg).round() as usize;
    let r_il = rig.lidar.rotation();
    let p_il = rig.lidar.translation();

    let end_sample = sample_trajectory(traj, end_time);
    let lidar_pose_at = |t: f64| -> (Rotation, Vector3<f64>) {
        let s = if distort {
            sample_trajectory(traj, t)
        } else {
            end_sample.clone()
        };
        (s.rot.compose(&r_il), s.rot.rotate(&p_il) + s.pos)
    };

    let mut points = Vec::new();
    for col in 0..n_az {
        let t_col = end_time - period + (col + 1) as f64 * period / n_az as f64;
        let (rot_gl, pos_gl) = lidar_pose_at(t_col);
        let azimuth = (col as f64 * rig.azimuth_step_deg).to_radians();
        for beam in 0..rig.beams {
            let elevation = if rig.beams > 1 {
                (-rig.vertical_fov_deg
                    + 2.0 * rig.vertical_fov_deg * beam as f64 / (rig.beams - 1) as f64)
                    .to_radians()
            } else {
                0.0
            };
            let dir_l = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let dir_g = rot_gl.rotate(&dir_l);
            let Some(range) = world.raycast(&pos_gl, &dir_g, rig.max_range) else {
                continue;
            };
            if rig.drop_probability > 0.0 && rng.random::<f64>() < rig.drop_probability {
                continue;
            }
            let noisy = range + sigma * rng.sample::<f64, _>(StandardNormal);
            points.push(ScanPoint {
                offset: t_col - end_time,
                pos: dir_l * noisy,
            });
        }
    }
    LidarScan {
        end_time,
        sigma,
        points,
    }
}

/// Generates the full dataset for one configuration.
pub fn simulate(cfg: &SimConfig) -> Dataset {
    let dt = 1.0 / cfg.rig.imu_rate;
    let n_imu = (cfg.duration * cfg.rig.imu_rate).round() as usize;
    let world = cfg.world.build();
    let noise_scale = if cfg.noise_free { 0.0 } else { 1.0 };

    // --- IMU stream (ChaCha stream 1) --------------------------------
    // Each sample is stamped at the interval start t_i but evaluates the
    // trajectory at the interval midpoint, so a zero-order-hold integrator
    // of the stream is second-order accurate. White noise is scaled to the
    // discrete rate (sigma / sqrt(dt)); bias random walks advance by
    // sigma_walk * sqrt(dt) per interval. Draw order per sample: gyro
    // noise, accel noise, gyro-walk step, accel-walk step.
    let mut rng_imu = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng_imu.set_stream(1);
    let white = noise_scale / dt.sqrt();
    let walk = noise_scale * dt.sqrt();
    let mut bias_gyro = Vector3::from(cfg.imu.bias_gyro0);
    let mut bias_acc = Vector3::from(cfg.imu.bias_acc0);
    let initial_truth = initial_truth(cfg);
    let mut imu = Vec::with_capacity(n_imu);
    let mut ground_truth = Vec::with_capacity(n_imu + 1);
    for i in 0..n_imu {
        let t = i as f64 * dt;
        let s = sample_trajectory(&cfg.trajectory, t);
        ground_truth.push(TruthPose {
            t,
            rot: s.rot,
            pos: s.pos,
        });
        let clean = synth_imu_clean(&cfg.trajectory, t + 0.5 * dt, &bias_gyro, &bias_acc);
        let n_g = draw3(&mut rng_imu) * (cfg.imu.sigma_gyro * white);
        let n_a = draw3(&mut rng_imu) * (cfg.imu.sigma_acc * white);
        let w_g = draw3(&mut rng_imu) * (cfg.imu.sigma_gyro_walk * walk);
        let w_a = draw3(&mut rng_imu) * (cfg.imu.sigma_acc_walk * walk);
        imu.push(ImuSample {
            t,
            gyro: clean.gyro + n_g,
            acc: clean.acc + n_a,
        });
        bias_gyro += w_g;
        bias_acc += w_a;
    }
    let t_end = n_imu as f64 * dt;
    let s_end = sample_trajectory(&cfg.trajectory, t_end);
    ground_truth.push(TruthPose {
        t: t_end,
        rot: s_end.rot,
        pos: s_end.pos,
    });

    // --- LiDAR scans (ChaCha stream 2) --------------------------------
    let mut rng_lidar = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng_lidar.set_stream(2);
    let steps_per_scan = (cfg.rig.imu_rate / cfg.rig.scan_rate).round() as usize;
    let mut scans = Vec::new();
    let mut k = steps_per_scan;
    while k <= n_imu {
        let end_time = k as f64 * dt;
        scans.push(raycast_scan(
            &world,
            &cfg.trajectory,
            end_time,
            &cfg.rig,
            noise_scale * cfg.lidar_sigma,
            &mut rng_lidar,
            cfg.distort,
        ));
        k += steps_per_scan;
    }

    // --- Odometry stream (ChaCha stream 3) ----------------------------
    // The first pose is the exact sensor pose in the offset frame {M};
    // subsequent poses integrate true relative motion corrupted per step
    // (rotation noise, then translation scale drift plus noise whose
    // magnitude scales with the step length). Draw order per step:
    // rotation(3), translation(3).
    let mut rng_odom = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng_odom.set_stream(3);
    let r_io = cfg.rig.odom.rotation();
    let p_io = cfg.rig.odom.translation();
    let r_mg = cfg.odometry.origin.rotation();
    let p_mg = cfg.odometry.origin.translation();
    let sensor_pose = |t: f64| -> (Rotation, Vector3<f64>) {
        let s = sample_trajectory(&cfg.trajectory, t);
        (s.rot.compose(&r_io), s.rot.rotate(&p_io) + s.pos)
    };
    let odom_steps = (cfg.rig.imu_rate / cfg.odometry.rate).round() as usize;
    let sigma_rot = noise_scale * cfg.odometry.sigma_rot_deg.to_radians();
    let mut odom = Vec::new();
    let mut j = 0usize;
    let mut prev_true: Option<(Rotation, Vector3<f64>)> = None;
    let mut cur: Option<(Rotation, Vector3<f64>)> = None;
    while j <= n_imu {
        let t = j as f64 * dt;
        let true_pose = sensor_pose(t);
        let next = match (&prev_true, &cur) {
            (Some(prev), Some(cur_pose)) => {
                // True increment in the previous sensor frame.
                let d_rot = prev.0.inverse().compose(&true_pose.0);
                let d_pos = prev.0.rotate_inv(&(true_pose.1 - prev.1));
                let eps_r = draw3(&mut rng_odom) * sigma_rot;
                let eps_p = draw3(&mut rng_odom)
                    * (noise_scale * cfg.odometry.sigma_pos_per_m * d_pos.norm());
                let d_rot_noisy = d_rot.compose(&exp_so3(&eps_r));
                let d_pos_noisy = d_pos * (1.0 + cfg.odometry.drift) + eps_p;
                (
                    cur_pose.0.compose(&d_rot_noisy),
                    cur_pose.1 + cur_pose.0.rotate(&d_pos_noisy),
                )
            }
            _ => (
                // Exact initial pose in {M}.
                r_mg.compose(&true_pose.0),
                r_mg.rotate(&true_pose.1) + p_mg,
            ),
        };
        odom.push(OdomPose {
            t,
            rot: next.0,
            pos: next.1,
        });
        prev_true = Some(true_pose);
        cur = Some(next);
        j += odom_steps;
    }

    Dataset {
        imu,
        odom,
        scans,
        ground_truth,
        initial_truth,
    }
}
