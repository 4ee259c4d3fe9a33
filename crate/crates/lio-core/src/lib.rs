//! Degeneration-aware LiDAR-inertial odometry.
//!
//! The crate implements a tightly-coupled LiDAR-inertial state estimator
//! built around an iterated error-state Kalman filter on a manifold, plus the
//! tooling needed to exercise it end to end:
//!
//! - [`manifold`], [`state`]: SO(3) primitives and the 30-dimensional
//!   error-state parameterization shared by every Jacobian in the crate.
//! - [`imu`]: strapdown propagation of the state and its covariance.
//! - [`map`], [`lidar`]: incremental voxel-deduplicated point map with exact
//!   k-NN, scan undistortion, and point-to-plane residuals.
//! - [`odometry`]: relative-pose measurements from an external odometer and
//!   their residual rows.
//! - [`degeneracy`]: eigenvalue analysis of the pose information matrix that
//!   decides when LiDAR alone no longer constrains the pose.
//! - [`iekf`]: the iterated update that fuses LiDAR rows and (only under
//!   degeneracy) odometry rows.
//! - [`crlb`]: Fisher-information bookkeeping and Cramer-Rao lower-bound
//!   comparison certifying that fusing odometry never loses information.
//! - [`sim`]: an analytic corridor/room simulator producing IMU, LiDAR and
//!   odometry streams with exactly the noise model the filter assumes.
//! - [`eval`]: trajectory association, SE(3) alignment, ATE statistics and
//!   box-plot aggregation.
//! - [`config`], [`dataset`], [`pipeline`]: TOML configuration, on-disk
//!   dataset layout, and the run/campaign/certification drivers used by the
//!   `lio` command-line tool.

pub mod config;
pub mod crlb;
pub mod dataset;
pub mod degeneracy;
pub mod eval;
pub mod iekf;
pub mod imu;
pub mod lidar;
pub mod manifold;
pub mod map;
pub mod odometry;
pub mod pipeline;
pub mod sim;
pub mod state;
