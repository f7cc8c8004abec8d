//! Sub-frame partitioning by recursive median splits.

use crate::error::{Error, Result};
use crate::octree::{PointCloud, VoxelCoord};

fn axis_value(c: &VoxelCoord, axis: usize) -> u32 {
    c.to_array()[axis]
}

fn longest_axis(pts: &[VoxelCoord]) -> usize {
    let mut lo = [u32::MAX; 3];
    let mut hi = [0u32; 3];
    for c in pts {
        for (a, v) in c.to_array().into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    (0..3).max_by_key(|&a| (hi[a] - lo[a], std::cmp::Reverse(a))).unwrap()
}

fn split(mut pts: Vec<VoxelCoord>, target: usize, out: &mut Vec<Vec<VoxelCoord>>) {
    if 2 * pts.len() <= 3 * target {
        out.push(pts);
        return;
    }
    let axis = longest_axis(&pts);
    let mid = pts.len() / 2;
    // Ties on the split axis are broken by the full coordinate so the
    // halves always have exactly `mid` and `len - mid` points.
    pts.select_nth_unstable_by(mid, |a, b| axis_value(a, axis).cmp(&axis_value(b, axis)).then(a.cmp(b)));
    let right = pts.split_off(mid);
    split(pts, target, out);
    split(right, target, out);
}

/// Splits `pc` into disjoint parts of between `0.5·target` and
/// `1.5·target` points (a cloud below the band stays whole).
pub fn kdtree_partition(pc: &PointCloud, target: usize) -> Result<Vec<PointCloud>> {
    if target == 0 {
        return Err(Error::InvalidArgument("target size must be at least 1".into()));
    }
    let mut parts = Vec::new();
    split(pc.coords().to_vec(), target, &mut parts);
    parts.into_iter().map(|p| PointCloud::new(p, pc.bitdepth())).collect()
}
