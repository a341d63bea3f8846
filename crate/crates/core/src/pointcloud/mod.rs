//! Point-cloud container, exact nearest-neighbor index, PCA normals and
//! voxel downsampling.

mod kdtree;
mod normals;
mod voxel;

pub use kdtree::{Neighbor, SpatialIndex};
pub use normals::{ensure_shape, estimate_normals, planarity_scalar, LocalShape, DEFAULT_NORMAL_K};
pub use voxel::voxel_downsample;

use crate::liegroup::{PoseSE3, Vec3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("{what} has {got} entries but the cloud has {expected} points")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("normal {index} is neither unit length nor unset (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("planarity {index} = {value} is outside [0, 1]")]
    PlanarityOutOfRange { index: usize, value: f64 },
    #[error("invalid eigenvalues ({0}, {1}, {2}): expected σ1 ≥ σ2 ≥ σ3 ≥ 0 and σ1 > 0")]
    InvalidEigenvalues(f64, f64, f64),
    #[error("neighborhood size {k} needs at least 3 neighbors and at most {points} points")]
    BadNeighborhood { k: usize, points: usize },
}

const NORMAL_TOL: f64 = 1e-6;

/// A set of 3-D points with optional per-point normals, planarity and color.
///
/// A zero normal marks a point whose neighborhood was degenerate; such points
/// carry planarity 0 and never produce correspondences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    planarity: Option<Vec<f64>>,
    colors: Option<Vec<[u8; 3]>>,
    frame_id: String,
    timestamp: Option<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn with_timestamp(mut self, timestamp: Option<f64>) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self, CloudError> {
        self.check_len("normals", normals.len())?;
        for (index, n) in normals.iter().enumerate() {
            let norm = n.norm();
            if norm != 0.0 && (norm - 1.0).abs() > NORMAL_TOL {
                return Err(CloudError::NonUnitNormal { index, norm });
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_planarity(mut self, planarity: Vec<f64>) -> Result<Self, CloudError> {
        self.check_len("planarity", planarity.len())?;
        if let Some((index, &value)) = planarity
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(CloudError::PlanarityOutOfRange { index, value });
        }
        self.planarity = Some(planarity);
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Vec<[u8; 3]>) -> Result<Self, CloudError> {
        self.check_len("colors", colors.len())?;
        self.colors = Some(colors);
        Ok(self)
    }

    fn check_len(&self, what: &'static str, got: usize) -> Result<(), CloudError> {
        if got != self.points.len() {
            return Err(CloudError::LengthMismatch {
                what,
                got,
                expected: self.points.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    /// The normal of point `i`, or `None` when absent or unset.
    pub fn normal(&self, i: usize) -> Option<Vec3> {
        self.normals
            .as_ref()
            .map(|n| n[i])
            .filter(|n| n.norm_squared() > 0.0)
    }

    pub fn planarity(&self) -> Option<&[f64]> {
        self.planarity.as_deref()
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    /// Maps points (and normals) through `pose`.
    pub fn transformed(&self, pose: &PoseSE3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| pose.rotate(n)).collect()),
            planarity: self.planarity.clone(),
            colors: self.colors.clone(),
            frame_id: self.frame_id.clone(),
            timestamp: self.timestamp,
        }
    }

    /// Appends another cloud. Optional channels survive only if both clouds carry them.
    pub fn extend(&mut self, other: &PointCloud) {
        fn merge<T: Clone>(a: &mut Option<Vec<T>>, b: &Option<Vec<T>>, a_was_empty: bool) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.extend_from_slice(b),
                (None, Some(b)) if a_was_empty => *a = Some(b.clone()),
                _ => *a = None,
            }
        }
        let was_empty = self.points.is_empty();
        merge(&mut self.normals, &other.normals, was_empty);
        merge(&mut self.planarity, &other.planarity, was_empty);
        merge(&mut self.colors, &other.colors, was_empty);
        self.points.extend_from_slice(&other.points);
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    pub(crate) fn set_shape(&mut self, normals: Vec<Vec3>, planarity: Vec<f64>) {
        debug_assert_eq!(normals.len(), self.points.len());
        debug_assert_eq!(planarity.len(), self.points.len());
        self.normals = Some(normals);
        self.planarity = Some(planarity);
    }
}
