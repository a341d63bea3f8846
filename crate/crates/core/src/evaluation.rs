//! Trajectory error and map quality against ground truth.

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{PoseSE3, Vec3};
use crate::pointcloud::{voxel_downsample, PointCloud, SpatialIndex};
use crate::trajectory::Trajectory;

pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 0.10;
pub const BUILT_MAP_VOXEL: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no estimated pose has a ground-truth pose within the time tolerance")]
    NoAssociations,
    #[error("at least {needed} pose pairs are required, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("cannot evaluate an empty cloud")]
    EmptyCloud,
    #[error("threshold must be positive")]
    BadThreshold,
}

/// An estimated pose and the ground-truth pose matched to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub timestamp: f64,
    pub estimate: PoseSE3,
    pub truth: PoseSE3,
}

/// Nearest-timestamp association; each ground-truth pose is used at most once.
pub fn associate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
) -> Result<Vec<PosePair>, EvalError> {
    let gt_poses = gt.poses();
    let mut used = vec![false; gt_poses.len()];
    let mut pairs = Vec::new();
    for (t, pose) in est.iter() {
        let i = gt_poses.partition_point(|(g, _)| g < t);
        let best = [i.checked_sub(1), Some(i), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt_poses.len() && !used[j])
            .map(|j| (j, (gt_poses[j].0 - t).abs()))
            .filter(|(_, dt)| *dt <= max_dt)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push(PosePair {
                timestamp: *t,
                estimate: *pose,
                truth: gt_poses[j].1,
            });
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Translation error of every pair, in input order.
    pub errors: Vec<f64>,
    /// Rigid transform applied to the estimates before comparison.
    #[serde(skip)]
    pub alignment: PoseSE3,
}

/// Closed-form rigid transform (no scale) minimizing `Σ |T·src − dst|²`.
pub fn rigid_alignment(src: &[Vec3], dst: &[Vec3]) -> PoseSE3 {
    let n = src.len().min(dst.len());
    if n == 0 {
        return PoseSE3::identity();
    }
    let mu_s: Vec3 = src[..n].iter().sum::<Vec3>() / n as f64;
    let mu_d: Vec3 = dst[..n].iter().sum::<Vec3>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (s, d) in src[..n].iter().zip(&dst[..n]) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    PoseSE3::new(rotation, mu_d - rotation * mu_s)
}

/// Translational RMSE over associated pairs, optionally after rigid alignment.
pub fn ate(pairs: &[PosePair], align: bool) -> Result<AteResult, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            needed: 2,
            got: pairs.len(),
        });
    }
    let est: Vec<Vec3> = pairs.iter().map(|p| *p.estimate.translation()).collect();
    let gt: Vec<Vec3> = pairs.iter().map(|p| *p.truth.translation()).collect();
    let alignment = if align {
        rigid_alignment(&est, &gt)
    } else {
        PoseSE3::identity()
    };
    let errors: Vec<f64> = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (alignment.apply(e) - g).norm())
        .collect();
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errors.iter().sum::<f64>() / n;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(AteResult {
        rmse,
        mean,
        median,
        max: *sorted.last().expect("at least two errors"),
        errors,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapQualityResult {
    pub inlier_fraction: f64,
    pub outlier_fraction: f64,
    pub threshold: f64,
    pub points_evaluated: usize,
}

/// Fraction of `built` points farther than `threshold` from the ground-truth map.
pub fn map_outlier_rate(
    built: &PointCloud,
    gt_map_index: &SpatialIndex,
    threshold: f64,
) -> Result<MapQualityResult, EvalError> {
    if built.is_empty() || gt_map_index.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    if !(threshold > 0.0) {
        return Err(EvalError::BadThreshold);
    }
    let outliers = built
        .points()
        .par_iter()
        .filter(|p| gt_map_index.nearest(p).distance > threshold)
        .count();
    let n = built.len();
    let outlier_fraction = outliers as f64 / n as f64;
    Ok(MapQualityResult {
        inlier_fraction: (n - outliers) as f64 / n as f64,
        outlier_fraction,
        threshold,
        points_evaluated: n,
    })
}

/// Union of scans placed at their estimated poses, voxel-downsampled at
/// [`BUILT_MAP_VOXEL`]. Scans and poses are paired in order.
pub fn build_map<'a>(scans: impl IntoIterator<Item = (&'a PointCloud, &'a PoseSE3)>) -> PointCloud {
    let mut points = Vec::new();
    for (scan, pose) in scans {
        points.extend(scan.points().iter().map(|p| pose.apply(p)));
    }
    voxel_downsample(
        &PointCloud::new(points).with_frame_id("map"),
        BUILT_MAP_VOXEL,
    )
}

/// The JSON metrics summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_rmse: f64,
    pub outlier_fraction: Option<f64>,
    pub threshold: f64,
    pub n_points: usize,
    pub n_poses: usize,
}
