use std::collections::BTreeMap;

use super::PointCloud;
use crate::liegroup::Vec3;

/// Replaces the points of each occupied voxel of edge `leaf` by their centroid.
///
/// Output is ordered by voxel key; normals, planarity and colors are dropped.
/// A non-positive or non-finite `leaf` returns the cloud unchanged.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> PointCloud {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return cloud.clone();
    }
    let mut cells: BTreeMap<[i64; 3], (Vec3, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let key = [
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        ];
        let cell = cells.entry(key).or_insert((Vec3::zeros(), 0));
        cell.0 += p;
        cell.1 += 1;
    }
    PointCloud::new(cells.into_values().map(|(sum, n)| sum / n as f64).collect())
        .with_frame_id(cloud.frame_id())
        .with_timestamp(cloud.timestamp())
}
