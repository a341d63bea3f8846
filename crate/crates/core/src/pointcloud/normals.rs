use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use super::{CloudError, PointCloud, SpatialIndex};
use crate::liegroup::Vec3;

pub const DEFAULT_NORMAL_K: usize = 10;

/// Neighborhoods whose largest singular value falls below this are treated as coincident points.
const DEGENERATE_SIGMA: f64 = 1e-12;

/// Planarity `a2D = (σ2 − σ3) / σ1` from PCA singular values sorted descending.
pub fn planarity_scalar(sigma1: f64, sigma2: f64, sigma3: f64) -> Result<f64, CloudError> {
    let ordered = sigma1 >= sigma2 && sigma2 >= sigma3 && sigma3 >= 0.0;
    if !ordered || !(sigma1 > 0.0) || !sigma1.is_finite() {
        return Err(CloudError::InvalidEigenvalues(sigma1, sigma2, sigma3));
    }
    Ok(((sigma2 - sigma3) / sigma1).clamp(0.0, 1.0))
}

/// PCA summary of one neighborhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalShape {
    /// Singular values of the centered neighborhood, descending.
    pub sigma: [f64; 3],
    /// Eigenvector of the smallest singular value (unoriented).
    pub normal: Vec3,
}

impl LocalShape {
    /// Returns `None` for degenerate (coincident) neighborhoods.
    pub fn fit(points: &[Vec3]) -> Option<LocalShape> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let mean: Vec3 = points.iter().sum::<Vec3>() / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let sigma = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
        if sigma[0] <= DEGENERATE_SIGMA {
            return None;
        }
        let normal = eig.eigenvectors.column(order[2]).normalize();
        Some(LocalShape { sigma, normal })
    }

    pub fn planarity(&self) -> f64 {
        planarity_scalar(self.sigma[0], self.sigma[1], self.sigma[2]).unwrap_or(0.0)
    }
}

/// Flips `n` to face `viewpoint` from `p`; when the viewpoint lies in the
/// tangent plane the largest-magnitude component is made positive.
fn orient(n: Vec3, p: &Vec3, viewpoint: &Vec3) -> Vec3 {
    let facing = n.dot(&(viewpoint - p));
    let scale = (viewpoint - p).norm().max(1.0);
    if facing > 1e-9 * scale {
        n
    } else if facing < -1e-9 * scale {
        -n
    } else if n[n.iamax()] < 0.0 {
        -n
    } else {
        n
    }
}

/// Computes a unit normal and planarity for every point from its `k`
/// nearest neighbors (the point itself included).
///
/// Normals face the cloud's frame origin. Coincident neighborhoods get a
/// zero (unset) normal and planarity 0.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, CloudError> {
    if k < 3 || cloud.len() < k {
        return Err(CloudError::BadNeighborhood {
            k,
            points: cloud.len(),
        });
    }
    let index = SpatialIndex::build(cloud)?;
    let points = cloud.points();
    let viewpoint = Vec3::zeros();
    let shapes: Vec<(Vec3, f64)> = points
        .par_iter()
        .map(|p| {
            let hood: Vec<Vec3> = index.k_nearest(p, k).iter().map(|n| points[n.id]).collect();
            match LocalShape::fit(&hood) {
                Some(shape) => (orient(shape.normal, p, &viewpoint), shape.planarity()),
                None => (Vec3::zeros(), 0.0),
            }
        })
        .collect();
    let (normals, planarity) = shapes.into_iter().unzip();
    let mut out = cloud.clone();
    out.set_shape(normals, planarity);
    Ok(out)
}

/// Fills in whatever shape channels `cloud` lacks. Existing normals are kept
/// and only missing ones (and planarity) come from PCA over `k` neighbors.
pub fn ensure_shape(cloud: &PointCloud, k: usize) -> Result<PointCloud, CloudError> {
    if cloud.normals().is_some() && cloud.planarity().is_some() {
        return Ok(cloud.clone());
    }
    let estimated = estimate_normals(cloud, k)?;
    let normals = match cloud.normals() {
        Some(given) => given
            .iter()
            .zip(estimated.normals().unwrap_or_default())
            .map(|(g, e)| if g.norm() > 0.0 { *g } else { *e })
            .collect(),
        None => estimated.normals().unwrap_or_default().to_vec(),
    };
    let planarity = match cloud.planarity() {
        Some(given) => given.to_vec(),
        None => estimated.planarity().unwrap_or_default().to_vec(),
    };
    let mut out = cloud.clone();
    out.set_shape(normals, planarity);
    Ok(out)
}
