//! Point, cloud and mesh types plus the spatial queries built on them.
//!
//! All coordinates are millimeters. Point order inside a [`PointCloud`] is
//! stable and is the correspondence key used across modules: index `i` of a
//! pre-operative cloud and index `i` of its post-operative counterpart refer
//! to the same material point.

mod kdtree;
mod mesh;
mod metrics;
mod sampling;

pub use kdtree::{knn_query, KdTree, NeighborIndex};
pub use mesh::{closest_point_on_triangle, point_to_mesh_deviation, TriMesh};
pub use metrics::{chamfer_distance, hausdorff_distance};
pub use sampling::farthest_point_sample;

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

/// An ordered, index-addressable set of finite 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_coords(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// Sub-cloud made of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .points
                .get(i)
                .ok_or_else(|| Error::invalid(format!("index {i} out of range ({})", self.len())))?;
            out.push(*p);
        }
        Self::new(out)
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }

    /// Applies a per-point displacement.
    pub fn displaced(&self, field: &DisplacementField) -> Result<Self> {
        if field.len() != self.len() {
            return Err(Error::invalid(format!(
                "displacement length {} does not match cloud size {}",
                field.len(),
                self.len()
            )));
        }
        Self::new(
            self.points
                .iter()
                .zip(field.vectors())
                .map(|(p, d)| p + d)
                .collect(),
        )
    }

    pub fn centroid(&self) -> Point3 {
        let mut acc = Vec3::zeros();
        for p in &self.points {
            acc += p.coords;
        }
        Point3::from(acc / self.len() as f64)
    }
}

#[inline]
pub(crate) fn is_finite(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Anatomical origin of a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceLabel {
    PreOpBone = 0,
    PostOpBone = 1,
    PreOpFace = 2,
}

impl SourceLabel {
    pub const ALL: [SourceLabel; 3] = [
        SourceLabel::PreOpBone,
        SourceLabel::PostOpBone,
        SourceLabel::PreOpFace,
    ];

    pub fn from_index(v: i64) -> Option<Self> {
        match v {
            0 => Some(SourceLabel::PreOpBone),
            1 => Some(SourceLabel::PostOpBone),
            2 => Some(SourceLabel::PreOpFace),
            _ => None,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-hot encoding over (pre-op bone, post-op bone, pre-op face).
    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

/// A point cloud with one source label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    cloud: PointCloud,
    labels: Vec<SourceLabel>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, labels: Vec<SourceLabel>) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        Ok(Self { cloud, labels })
    }

    pub fn uniform(cloud: PointCloud, label: SourceLabel) -> Self {
        let labels = vec![label; cloud.len()];
        Self { cloud, labels }
    }

    #[inline]
    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    #[inline]
    pub fn labels(&self) -> &[SourceLabel] {
        &self.labels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn with_label(&self, label: SourceLabel) -> Self {
        Self::uniform(self.cloud.clone(), label)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let cloud = self.cloud.select(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { cloud, labels })
    }

    pub fn into_parts(self) -> (PointCloud, Vec<SourceLabel>) {
        (self.cloud, self.labels)
    }
}

/// Per-point 3-vectors in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    vectors: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = vectors
            .iter()
            .position(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()))
        {
            return Err(Error::invalid(format!("displacement {i} is not finite")));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Vec3::zeros(); n],
        }
    }

    pub fn constant(n: usize, v: Vec3) -> Self {
        Self { vectors: vec![v; n] }
    }

    /// Displacement taking `from` onto `to` pointwise.
    pub fn between(from: &PointCloud, to: &PointCloud) -> Result<Self> {
        if from.len() != to.len() {
            return Err(Error::invalid(format!(
                "clouds differ in size ({} vs {})",
                from.len(),
                to.len()
            )));
        }
        Self::new(
            from.points()
                .iter()
                .zip(to.points())
                .map(|(a, b)| b - a)
                .collect(),
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    #[inline]
    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    #[inline]
    pub fn get(&self, i: usize) -> &Vec3 {
        &self.vectors[i]
    }

    pub fn into_vectors(self) -> Vec<Vec3> {
        self.vectors
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        indices
            .iter()
            .map(|&i| {
                self.vectors
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|vectors| Self { vectors })
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}
