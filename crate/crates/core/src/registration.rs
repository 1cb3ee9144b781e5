//! Rigid alignment: closed-form landmark fit and point-to-point ICP.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{KdTree, Point3, PointCloud, Vec3};

/// Rotation followed by translation, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        if t.orthonormality_error() > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rotation is not a proper orthonormal matrix"));
        }
        Ok(t)
    }

    /// Rotation by `angle` radians about `axis` through `center`, then shift.
    pub fn about_point(axis: &Vec3, angle: f64, center: &Point3, shift: &Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        let r = *rot.matrix();
        Self {
            rotation: r,
            translation: center.coords - r * center.coords + shift,
        }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points().iter().map(|p| self.apply(p)).collect())
            .expect("rigid image of a finite cloud is finite")
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Max-abs entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Twelve numbers, row-major rotation then translation.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)],
            self.translation.x, self.translation.y, self.translation.z,
        ]
    }
}

/// Least-squares rigid fit without degeneracy checks. Callers guarantee
/// equal, non-zero lengths.
fn fit_rigid(source: &[Point3], target: &[Point3]) -> RigidTransform {
    let n = source.len() as f64;
    let mut cs = Vec3::zeros();
    let mut ct = Vec3::zeros();
    for (s, t) in source.iter().zip(target) {
        cs += s.coords;
        ct += t.coords;
    }
    cs /= n;
    ct /= n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s.coords - cs) * (t.coords - ct).transpose();
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].partial_cmp(&svd.singular_values[b]).unwrap())
            .unwrap();
        d[(smallest, smallest)] = -1.0;
    }
    let r = v * d * u.transpose();
    RigidTransform {
        rotation: r,
        translation: ct - r * cs,
    }
}

/// Closed-form rigid transform minimizing `Σ‖R·s_i + t − t_i‖²` over
/// corresponding landmark pairs.
pub fn landmark_rigid_init(source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "landmark counts differ ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 landmark pairs, got {}",
            source.len()
        )));
    }
    for (name, c) in [("source", source), ("target", target)] {
        if is_collinear(c) {
            return Err(Error::DegenerateConfiguration(format!("{name} landmarks are collinear")));
        }
    }
    Ok(fit_rigid(source.points(), target.points()))
}

fn is_collinear(c: &PointCloud) -> bool {
    let centroid = c.centroid();
    let mut scatter = Matrix3::zeros();
    for p in c.points() {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once one iteration improves the RMS by less than this (mm).
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// RMS correspondence distance at the start of each iteration, followed
    /// by the RMS after the last fit.
    pub rms_history: Vec<f64>,
}

/// Point-to-point ICP from `init`.
pub fn icp_refine(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    opts: &IcpOptions,
) -> IcpResult {
    let tree = KdTree::build(target);
    let mut current = *init;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut matched = Vec::with_capacity(source.len());
    let n = source.len() as f64;
    for _ in 0..opts.max_iters {
        iterations += 1;
        matched.clear();
        let mut sq = 0.0;
        for p in source.points() {
            let (j, d2) = tree.nearest(&current.apply(p));
            matched.push(*target.point(j));
            sq += d2;
        }
        let before = (sq / n).sqrt();
        history.push(before);
        let next = fit_rigid(source.points(), &matched);
        let after_sq: f64 = source
            .points()
            .iter()
            .zip(&matched)
            .map(|(p, q)| (next.apply(p) - q).norm_squared())
            .sum();
        let after = (after_sq / n).sqrt();
        // keep the previous estimate if rounding made the fit worse
        if after <= before {
            current = next;
        }
        if before - after.min(before) < opts.tol {
            history.push(after.min(before));
            break;
        }
    }
    if history.len() == iterations && iterations > 0 {
        // ran out of iterations: record the final objective
        let sq: f64 = source
            .points()
            .iter()
            .map(|p| tree.nearest(&current.apply(p)).1)
            .sum();
        history.push((sq / n).sqrt());
    }
    IcpResult {
        transform: current,
        iterations,
        rms_history: history,
    }
}
