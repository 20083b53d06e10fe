//! Radar-only teach-and-repeat localization.

pub mod config;
pub mod geometry;
pub mod localization;
pub mod map_store;
pub mod metrics;
pub mod odometry;
pub mod preprocessing;
pub mod registration;
pub mod scan_io;
pub mod scenarios;
pub mod sim;
pub mod surface_points;
pub mod trajectory;

pub use config::{Ablation, ConfigError, PipelineConfig};
pub use geometry::{wrap_angle, Pose2, Velocity};
pub use localization::{LocalizationError, LocalizationState};
pub use map_store::TeachGraph;
pub use metrics::{kitti_drift, localization_rmse, DriftReport, RmseReport};
pub use odometry::{Keyframe, OdometryState};
pub use preprocessing::{PointCloud, PolarScan};
pub use registration::{register, RegistrationError, RegistrationResult};
pub use surface_points::{SurfacePoint, SurfacePointSet};
pub use trajectory::TimedPose;
