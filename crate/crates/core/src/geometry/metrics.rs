//! Set-to-set distances.

use super::{KdTree, PointCloud};

/// Symmetric Hausdorff distance in millimeters.
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    directed_max(a, &tb).max(directed_max(b, &ta)).sqrt()
}

fn directed_max(from: &PointCloud, to: &KdTree) -> f64 {
    from.points()
        .iter()
        .map(|p| to.nearest(p).1)
        .fold(0.0, f64::max)
}

fn directed_sum(from: &PointCloud, to: &KdTree) -> f64 {
    from.points().iter().map(|p| to.nearest(p).1).sum()
}

/// Chamfer distance in mm²: both directional sums of squared
/// nearest-neighbour distances, normalized once by `|a|`.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    (directed_sum(a, &tb) + directed_sum(b, &ta)) / a.len() as f64
}
