//! Degeneracy-aware LiDAR localization: point-to-plane registration on SE(3),
//! per-point observability analysis and fusion of a relative-motion prior.

pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod liegroup;
pub mod observability;
pub mod pointcloud;
pub mod registration;
pub mod scenes;
pub mod trajectory;

pub use liegroup::{PoseSE3, TangentVector, Vec3};
pub use pointcloud::{PointCloud, SpatialIndex};
pub use trajectory::Trajectory;
