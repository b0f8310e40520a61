//! Range-view LiDAR 3D detection toolkit.
//!
//! The crate covers the whole desk-scale pipeline: spherical projection of
//! point clouds into multi-round range images, rotated 3D box geometry and
//! NMS, anchor-free target encoding with dynamic-K assignment, a
//! deterministic forward-only network, nuScenes-style evaluation and a
//! synthetic LiDAR raycaster used as ground truth for all of the above.
//!
//! Data-parallel loops go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators
//! otherwise. Outputs never depend on the number of worker threads.

pub mod boxes;
pub mod error;
pub mod io;
pub mod lidar_geom;
pub mod metrics;
pub mod mrv;
pub mod net;
pub mod parallel;
pub mod pipeline;
pub mod simgen;
pub mod targets;

pub use boxes::Box3D;
pub use error::{Error, Result};
pub use lidar_geom::{LidarSpec, Point, PointCloud, RigidTransform};
pub use mrv::{ProjectionStats, RangeImage};
