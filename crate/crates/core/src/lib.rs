//! Offline bathymetric submap SLAM.
//!
//! Multibeam pings are aggregated into rigid submaps, overlapping submaps are
//! aligned with a plane-to-plane GICP restricted to `(x, y, yaw)`, and the
//! resulting loop closures are fused with dead reckoning in a planar pose
//! graph. A grid-based consistency metric measures the thickness of the merged
//! bathymetry before and after optimization.

pub mod config;
pub mod consistency;
pub mod error;
pub mod format;
pub mod geometry;
pub mod kdtree;
pub mod measurement;
pub mod pipeline;
pub mod pose_graph;
pub mod registration;
pub mod submap;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{normalize_angle, Pose2, Pose3, Rect};
pub use measurement::{GaussianRelativePose, Ping, Submap};
