//! Single-snapshot bistatic SLAM for mmWave links: beam-power map synthesis,
//! angle extraction, time-of-arrival estimation, robust joint UE/landmark
//! estimation and evaluation metrics.

pub mod error;
pub mod geometry;
pub mod simulate;
pub mod angles;
pub mod toa;
pub mod slam;
pub mod metrics;
pub mod pipeline;
pub mod io;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use geometry::{
    diagonal_covariance, jacobian_measurement, predict_measurement, wrap_angle, JointState, Landmark,
    Measurement, PathKind, Pose2, UeState,
};
pub use simulate::{BeamCodebook, BrsrpMap, PathTruth, Scene, WaveformConfig};
