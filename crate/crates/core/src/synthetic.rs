//! Desk-scale synthetic surgical cases: an ellipsoidal bone shell, an
//! offset soft-tissue surface, rigid segment moves, and a smooth
//! kernel-blend deformation oracle supplying the post-operative face.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::case::SurgicalCase;
use crate::error::{Error, Result};
use crate::geometry::{dist2, DisplacementField, LabeledCloud, Point3, PointCloud, SourceLabel, TriMesh, Vec3};
use crate::io::{CaseManifest, RunConfig};
use crate::reconstruction::{build_deformation_graph, DeformationGraph, GraphOptions};
use crate::registration::RigidTransform;
use crate::training::derive_seed;

/// Vertical parameter range `β ∈ [−BETA_MAX, BETA_MAX]`.
pub const BETA_MAX: f64 = 1.1;
/// Bound on the per-point skeletal displacement of a generated plan, mm.
pub const MAX_BONE_DISP: f64 = 10.0;
pub const MAX_ROTATION_DEG: f64 = 6.0;
pub const MAX_TRANSLATION: f64 = 8.0;

/// Parametric `(α, β)` of face landmarks: periorbital, nasal midline,
/// midface, lips and chin.
pub const LANDMARK_PARAMS: [(f64, f64); 19] = [
    (-0.55, 0.45),
    (0.55, 0.45),
    (-0.3, 0.42),
    (0.3, 0.42),
    (-0.8, 0.3),
    (0.8, 0.3),
    (0.0, 0.35),
    (0.0, 0.1),
    (0.0, -0.1),
    (-0.5, 0.0),
    (0.5, 0.0),
    (-0.7, -0.25),
    (0.7, -0.25),
    (0.0, -0.45),
    (-0.3, -0.55),
    (0.3, -0.55),
    (0.0, -0.65),
    (0.0, -0.9),
    (0.0, -1.02),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Segment {
    Maxilla,
    Mandible,
    Chin,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Maxilla, Segment::Mandible, Segment::Chin];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Maxilla => "maxilla",
            Segment::Mandible => "mandible",
            Segment::Chin => "chin",
        }
    }

    pub fn contains(self, alpha: f64, beta: f64) -> bool {
        let chin = beta < -0.85 && alpha.abs() < 0.4;
        match self {
            Segment::Maxilla => (-0.55..-0.1).contains(&beta) && alpha.abs() < 0.9,
            Segment::Mandible => beta < -0.55 && !chin,
            Segment::Chin => chin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    /// Lateral, vertical and anterior semi-axes, mm.
    pub axes: Vec3,
}

impl Ellipsoid {
    pub fn point(&self, alpha: f64, beta: f64) -> Point3 {
        let a = self.axes;
        Point3::new(a.x * beta.cos() * alpha.sin(), a.y * beta.sin(), a.z * beta.cos() * alpha.cos())
    }

    pub fn normal(&self, p: &Point3) -> Vec3 {
        let a = self.axes;
        Vec3::new(p.x / (a.x * a.x), p.y / (a.y * a.y), p.z / (a.z * a.z)).normalize()
    }

    /// `Σ (x_i / a_i)²`; above 1 outside the shell.
    pub fn level(&self, p: &Point3) -> f64 {
        let a = self.axes;
        (p.x / a.x).powi(2) + (p.y / a.y).powi(2) + (p.z / a.z).powi(2)
    }
}

#[derive(Debug, Clone)]
pub struct Anatomy {
    pub ellipsoid: Ellipsoid,
    pub bone: LabeledCloud,
    /// `(α, β)` of every bone point.
    pub bone_params: Vec<(f64, f64)>,
    pub face: LabeledCloud,
    pub face_params: Vec<(f64, f64)>,
    pub mesh: TriMesh,
    /// Face grid dimensions `(columns in α, rows in β)`.
    pub grid: (usize, usize),
    pub landmarks: Vec<usize>,
}

impl Anatomy {
    pub fn segment_indices(&self, s: Segment) -> Vec<usize> {
        self.bone_params
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| s.contains(*a, *b))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Grid dimensions with roughly square cells whose product is near `n`.
pub fn face_grid(n: usize) -> (usize, usize) {
    let aspect = std::f64::consts::PI * 65.0 / (2.0 * BETA_MAX * 80.0);
    let na = ((n as f64 * aspect).sqrt().round() as usize).max(2);
    let nb = ((n as f64 / na as f64).round() as usize).max(2);
    (na, nb)
}

fn grid_alpha(i: usize, na: usize) -> f64 {
    let margin = 0.02;
    -FRAC_PI_2 + margin + (std::f64::consts::PI - 2.0 * margin) * i as f64 / (na - 1) as f64
}

fn grid_beta(j: usize, nb: usize) -> f64 {
    let s = BETA_MAX.sin();
    (-s + 2.0 * s * j as f64 / (nb - 1) as f64).asin()
}

pub fn generate_anatomy(seed: u64, n_bone: usize, n_face: usize) -> Result<Anatomy> {
    if n_bone < 100 || n_face < 100 {
        return Err(Error::invalid("anatomy needs at least 100 bone and 100 face points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |base: f64| base * (1.0 + rng.gen_range(-0.05..0.05));
    let ellipsoid = Ellipsoid { axes: Vec3::new(jitter(60.0), jitter(80.0), jitter(70.0)) };

    let s = BETA_MAX.sin();
    let mut bone_pts = Vec::with_capacity(n_bone);
    let mut bone_params = Vec::with_capacity(n_bone);
    for _ in 0..n_bone {
        let alpha = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let beta = rng.gen_range(-s..s).asin();
        bone_pts.push(ellipsoid.point(alpha, beta));
        bone_params.push((alpha, beta));
    }

    let (p1, p2, p3) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(1.5..2.5));
    let thickness = |alpha: f64, beta: f64| 10.0 + 4.0 * (p3 * alpha + p1).sin() * (3.0 * beta + p2).cos();

    let (na, nb) = face_grid(n_face);
    let mut face_pts = Vec::with_capacity(na * nb);
    let mut face_params = Vec::with_capacity(na * nb);
    for j in 0..nb {
        for i in 0..na {
            let (alpha, beta) = (grid_alpha(i, na), grid_beta(j, nb));
            let p = ellipsoid.point(alpha, beta);
            face_pts.push(p + ellipsoid.normal(&p) * thickness(alpha, beta));
            face_params.push((alpha, beta));
        }
    }
    let face_cloud = PointCloud::new(face_pts)?;
    let center = Point3::origin();
    let mut tris = Vec::with_capacity(2 * (na - 1) * (nb - 1));
    let v = |i: usize, j: usize| j * na + i;
    for j in 0..nb - 1 {
        for i in 0..na - 1 {
            for t in [[v(i, j), v(i + 1, j), v(i + 1, j + 1)], [v(i, j), v(i + 1, j + 1), v(i, j + 1)]] {
                let [a, b, c] = t.map(|k| *face_cloud.point(k));
                let n = (b - a).cross(&(c - a));
                let centroid = Point3::from((a.coords + b.coords + c.coords) / 3.0);
                tris.push(if n.dot(&(centroid - center)) >= 0.0 { t } else { [t[0], t[2], t[1]] });
            }
        }
    }
    let mesh = TriMesh::new(face_cloud.clone(), tris)?;

    let mut landmarks = Vec::with_capacity(LANDMARK_PARAMS.len());
    for &(alpha, beta) in &LANDMARK_PARAMS {
        let best = face_params
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| {
                let dx = (x.0 - alpha).powi(2) + (x.1 - beta).powi(2);
                let dy = (y.0 - alpha).powi(2) + (y.1 - beta).powi(2);
                dx.total_cmp(&dy)
            })
            .map(|(i, _)| i)
            .expect("non-empty grid");
        if landmarks.contains(&best) {
            return Err(Error::invalid("face grid too coarse for distinct landmarks"));
        }
        landmarks.push(best);
    }

    Ok(Anatomy {
        ellipsoid,
        bone: LabeledCloud::uniform(PointCloud::new(bone_pts)?, SourceLabel::PreOpBone),
        bone_params,
        face: LabeledCloud::uniform(face_cloud, SourceLabel::PreOpFace),
        face_params,
        mesh,
        grid: (na, nb),
        landmarks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMove {
    pub segment: String,
    pub indices: Vec<usize>,
    pub transform: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurgicalPlan {
    pub moves: Vec<SegmentMove>,
}

impl SurgicalPlan {
    pub fn describe(&self) -> String {
        if self.moves.is_empty() {
            return "none".into();
        }
        self.moves
            .iter()
            .map(|m| {
                let t = m.transform.translation;
                format!(
                    "{}(n={},angle_deg={:.4},shift=[{:.4};{:.4};{:.4}])",
                    m.segment,
                    m.indices.len(),
                    m.transform.angle().to_degrees(),
                    t.x,
                    t.y,
                    t.z
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn apply_surgical_plan(bone: &LabeledCloud, plan: &SurgicalPlan) -> Result<LabeledCloud> {
    let n = bone.len();
    let mut owner = vec![usize::MAX; n];
    for (mi, m) in plan.moves.iter().enumerate() {
        for &i in &m.indices {
            if i >= n {
                return Err(Error::invalid(format!("segment `{}` index {i} out of range", m.segment)));
            }
            if owner[i] != usize::MAX {
                return Err(Error::invalid(format!(
                    "segments `{}` and `{}` overlap at bone point {i}",
                    plan.moves[owner[i]].segment, m.segment
                )));
            }
            owner[i] = mi;
        }
    }
    let pts = bone
        .cloud()
        .points()
        .iter()
        .zip(&owner)
        .map(|(p, &o)| if o == usize::MAX { *p } else { plan.moves[o].transform.apply(p) })
        .collect();
    LabeledCloud::new(PointCloud::new(pts)?, vec![SourceLabel::PostOpBone; n])
}

/// Oracle field and the indices of face points whose kernel sum underflowed.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleField {
    pub field: DisplacementField,
    pub flagged: Vec<usize>,
}

/// `δ(f) = Σ K_i Δb_i / Σ K_i` with `K_i = exp(−‖f − b_i‖²/2τ²)`.
pub fn oracle_face_displacement(face: &PointCloud, bone_pre: &PointCloud, bone_disp: &DisplacementField, tau: f64) -> Result<OracleField> {
    if !(tau > 0.0) {
        return Err(Error::invalid("kernel width must be positive"));
    }
    if bone_disp.len() != bone_pre.len() {
        return Err(Error::invalid("bone displacement length differs from bone cloud"));
    }
    let inv = 1.0 / (2.0 * tau * tau);
    let mut out = Vec::with_capacity(face.len());
    let mut flagged = Vec::new();
    for (fi, f) in face.points().iter().enumerate() {
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for (b, d) in bone_pre.points().iter().zip(bone_disp.vectors()) {
            let k = (-dist2(f, b) * inv).exp();
            num += d * k;
            den += k;
        }
        if den > 0.0 {
            out.push(num / den);
        } else {
            out.push(Vec3::zeros());
            flagged.push(fi);
        }
    }
    Ok(OracleField { field: DisplacementField::new(out)?, flagged })
}

/// Reconstruction problem on a synthetic face of `n` points: a random
/// plan's oracle field, constrained on a seeded `fraction` of the points.
pub fn solver_benchmark_graph(n: usize, fraction: f64, k_rec: usize, seed: u64) -> Result<DeformationGraph> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("constrained fraction must lie in (0, 1]"));
    }
    let anat = generate_anatomy(seed, 640, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB, 0));
    let plan = random_plan(&anat, &mut rng)?;
    let moved = apply_surgical_plan(&anat.bone, &plan)?;
    let bone_disp = DisplacementField::between(anat.bone.cloud(), moved.cloud())?;
    let face = anat.face.cloud();
    let oracle = oracle_face_displacement(face, anat.bone.cloud(), &bone_disp, 15.0)?;
    let mut idx: Vec<usize> = (0..face.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(((face.len() as f64 * fraction).round() as usize).max(1));
    idx.sort_unstable();
    let fixed = oracle.field.select(&idx)?;
    build_deformation_graph(face, &idx, &fixed, k_rec, GraphOptions::default())
}

/// A random plan of 1–3 distinct segments, shrunk until no bone point moves
/// more than [`MAX_BONE_DISP`].
pub fn random_plan(anatomy: &Anatomy, rng: &mut ChaCha8Rng) -> Result<SurgicalPlan> {
    let count = rng.gen_range(1..=3);
    let mut segs = Segment::ALL.to_vec();
    segs.shuffle(rng);
    segs.truncate(count);
    segs.sort();
    let mut raw = Vec::new();
    for s in segs {
        let indices = anatomy.segment_indices(s);
        if indices.is_empty() {
            continue;
        }
        let axis = loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let angle = rng.gen_range(0.0..MAX_ROTATION_DEG).to_radians();
        let dir = loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let shift = dir * rng.gen_range(0.0..MAX_TRANSLATION);
        let sub = anatomy.bone.cloud().select(&indices)?;
        raw.push((s, indices, axis, angle, shift, sub.centroid()));
    }
    let mut scale = 1.0;
    loop {
        let plan = SurgicalPlan {
            moves: raw
                .iter()
                .map(|(s, idx, axis, angle, shift, c)| SegmentMove {
                    segment: s.name().into(),
                    indices: idx.clone(),
                    transform: RigidTransform::about_point(axis, angle * scale, c, &(shift * scale)),
                })
                .collect(),
        };
        let post = apply_surgical_plan(&anatomy.bone, &plan)?;
        let disp = DisplacementField::between(anatomy.bone.cloud(), post.cloud())?;
        if disp.max_norm() <= MAX_BONE_DISP {
            return Ok(plan);
        }
        scale *= 0.9;
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub case: SurgicalCase,
    pub plan: SurgicalPlan,
    pub seed: u64,
    pub flagged: Vec<usize>,
}

/// Whether case `i` of a dataset is generated with an empty plan.
pub fn is_zero_plan_case(i: usize) -> bool {
    i % 8 == 0
}

pub fn generate_case(id: &str, seed: u64, cfg: &RunConfig, zero_plan: bool) -> Result<SyntheticCase> {
    let anatomy = generate_anatomy(seed, cfg.n_bone, cfg.n_face)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let plan = if zero_plan { SurgicalPlan::default() } else { random_plan(&anatomy, &mut rng)? };
    let post = apply_surgical_plan(&anatomy.bone, &plan)?;
    let disp = DisplacementField::between(anatomy.bone.cloud(), post.cloud())?;
    let oracle = oracle_face_displacement(anatomy.face.cloud(), anatomy.bone.cloud(), &disp, cfg.tau_kernel)?;
    let face_post = anatomy.face.cloud().displaced(&oracle.field)?;
    let case = SurgicalCase::new(id, anatomy.bone.cloud().clone(), post.cloud().clone(), anatomy.face.cloud().clone(), Some(face_post))?
        .with_landmarks(anatomy.landmarks.clone())?
        .with_mesh(anatomy.mesh.clone())?;
    Ok(SyntheticCase { case, plan, seed, flagged: oracle.flagged })
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// `count` cases with per-case seeds derived from `seed`; written under
/// `out/<case_id>/` when `out` is given.
pub fn generate_dataset(count: usize, cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<Vec<SyntheticCase>> {
    if count == 0 {
        return Err(Error::invalid("case count must be positive"));
    }
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let c = generate_case(&case_id(i), derive_seed(seed, i as u64, 7), cfg, is_zero_plan_case(i))?;
        if let Some(root) = out {
            write_case(&c, &root.join(&c.case.id))?;
        }
        cases.push(c);
    }
    Ok(cases)
}

pub fn write_case(c: &SyntheticCase, dir: &Path) -> Result<CaseManifest> {
    let mut extra = BTreeMap::new();
    extra.insert("plan".to_string(), c.plan.describe());
    extra.insert("seed".to_string(), c.seed.to_string());
    if !c.flagged.is_empty() {
        extra.insert("oracle_flagged".to_string(), c.flagged.len().to_string());
    }
    c.case.save(dir, extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig { n_bone: 300, n_face: 400, ..RunConfig::default() }
    }

    #[test]
    fn anatomy_is_deterministic_and_well_formed() {
        let a = generate_anatomy(5, 300, 500).unwrap();
        let b = generate_anatomy(5, 300, 500).unwrap();
        assert_eq!(a.bone, b.bone);
        assert_eq!(a.face, b.face);
        assert_ne!(generate_anatomy(6, 300, 500).unwrap().bone, a.bone);
        assert!(a.face.cloud().points().iter().all(|p| a.ellipsoid.level(p) > 1.0));
        assert!(a.mesh.min_triangle_area() > 1e-6);
        let (na, nb) = a.grid;
        assert_eq!(a.face.len(), na * nb);
        assert!((a.face.len() as f64 - 500.0).abs() < 40.0);
        for t in 0..a.mesh.triangles().len() {
            let tri = a.mesh.triangles()[t];
            let c = a.mesh.vertices().point(tri[0]);
            assert!(a.mesh.triangle_normal(t).dot(&c.coords) > 0.0);
        }
        assert_eq!(a.landmarks.len(), 19);
        // thickness within [6, 14]: distance to the shell along the normal
        for (p, (al, be)) in a.face.cloud().points().iter().zip(&a.face_params) {
            let base = a.ellipsoid.point(*al, *be);
            let t = (p - base).norm();
            assert!((6.0 - 1e-9..=14.0 + 1e-9).contains(&t));
        }
        for s in Segment::ALL {
            assert!(!a.segment_indices(s).is_empty());
        }
        assert!(generate_anatomy(1, 50, 500).is_err());
    }

    #[test]
    fn plan_application() {
        let a = generate_anatomy(2, 300, 400).unwrap();
        let empty = apply_surgical_plan(&a.bone, &SurgicalPlan::default()).unwrap();
        assert_eq!(empty.cloud(), a.bone.cloud());
        let idx = a.segment_indices(Segment::Chin);
        let plan = SurgicalPlan {
            moves: vec![SegmentMove { segment: "chin".into(), indices: idx.clone(), transform: RigidTransform::translation_only(Vec3::new(0.0, 0.0, -5.0)) }],
        };
        let post = apply_surgical_plan(&a.bone, &plan).unwrap();
        for i in 0..a.bone.len() {
            let d = post.cloud().point(i) - a.bone.cloud().point(i);
            if idx.contains(&i) {
                assert_eq!(d, Vec3::new(0.0, 0.0, -5.0));
            } else {
                assert_eq!(d, Vec3::zeros());
            }
        }
        let c = a.bone.cloud().select(&idx).unwrap().centroid();
        let rot = SurgicalPlan {
            moves: vec![SegmentMove { segment: "chin".into(), indices: idx.clone(), transform: RigidTransform::about_point(&Vec3::new(0.3, 1.0, 0.2).normalize(), 0.1, &c, &Vec3::zeros()) }],
        };
        let post = apply_surgical_plan(&a.bone, &rot).unwrap();
        for &i in &idx {
            for &j in &idx {
                let before = (a.bone.cloud().point(i) - a.bone.cloud().point(j)).norm();
                let after = (post.cloud().point(i) - post.cloud().point(j)).norm();
                assert!((before - after).abs() < 1e-9);
            }
        }
        let overlap = SurgicalPlan {
            moves: vec![
                SegmentMove { segment: "a".into(), indices: vec![1, 2], transform: RigidTransform::identity() },
                SegmentMove { segment: "b".into(), indices: vec![2, 3], transform: RigidTransform::identity() },
            ],
        };
        assert!(apply_surgical_plan(&a.bone, &overlap).is_err());
    }

    #[test]
    fn oracle_examples() {
        let bone = PointCloud::from_coords(&[[0.0; 3], [500.0, 0.0, 0.0], [-500.0, 0.0, 0.0]]).unwrap();
        let disp = DisplacementField::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.0, 0.0), Vec3::new(0.0, 9.0, 0.0)]).unwrap();
        let face = PointCloud::from_coords(&[[0.0; 3]]).unwrap();
        let o = oracle_face_displacement(&face, &bone, &disp, 15.0).unwrap();
        assert!((o.field.get(0) - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);

        let two = PointCloud::from_coords(&[[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let (a, b) = (Vec3::new(2.0, 0.0, -1.0), Vec3::new(0.0, 4.0, 1.0));
        let d2 = DisplacementField::new(vec![a, b]).unwrap();
        let mid = PointCloud::from_coords(&[[0.0, 5.0, 0.0]]).unwrap();
        let o = oracle_face_displacement(&mid, &two, &d2, 15.0).unwrap();
        assert!((o.field.get(0) - (a + b) / 2.0).norm() < 1e-9);

        let far = PointCloud::from_coords(&[[1e5, 0.0, 0.0]]).unwrap();
        let o = oracle_face_displacement(&far, &two, &d2, 15.0).unwrap();
        assert_eq!(o.flagged, vec![0]);
        assert_eq!(*o.field.get(0), Vec3::zeros());

        let z = oracle_face_displacement(&mid, &two, &DisplacementField::zeros(2), 15.0).unwrap();
        assert_eq!(z.field.max_norm(), 0.0);
    }

    #[test]
    fn dataset_determinism_bounds_and_zero_plan() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let a = generate_dataset(9, &cfg, 11, Some(dir.path())).unwrap();
        let b = generate_dataset(9, &cfg, 11, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.case, y.case);
            let bd = DisplacementField::between(x.case.bone_pre.cloud(), x.case.bone_post.cloud()).unwrap();
            let fd = DisplacementField::between(x.case.face_pre.cloud(), x.case.face_post.as_ref().unwrap()).unwrap();
            assert!(bd.max_norm() <= MAX_BONE_DISP + 1e-9);
            assert!(fd.max_norm() <= bd.max_norm() + 1e-9);
            assert!(x.flagged.is_empty());
        }
        assert!(a[0].plan.moves.is_empty());
        assert_eq!(a[0].case.face_post.as_ref().unwrap(), a[0].case.face_pre.cloud());
        assert!(a[8].plan.moves.is_empty());
        assert!(a[1..8].iter().all(|c| !c.plan.moves.is_empty() && c.plan.moves.len() <= 3));
        for i in 0..9 {
            let p = dir.path().join(case_id(i));
            for f in ["bone_pre.ply", "bone_post.ply", "face_pre.ply", "face_post.ply", "face_mesh.obj", "manifest.txt"] {
                assert!(p.join(f).exists(), "{f}");
            }
        }
        let loaded = SurgicalCase::load(&dir.path().join(case_id(3))).unwrap();
        assert_eq!(loaded.landmarks, a[3].case.landmarks);
        assert_eq!(loaded.n_face(), a[3].case.n_face());
        let again = tempfile::tempdir().unwrap();
        generate_dataset(9, &cfg, 11, Some(again.path())).unwrap();
        for i in 0..9 {
            for f in ["bone_post.ply", "face_post.ply", "manifest.txt"] {
                let x = std::fs::read(dir.path().join(case_id(i)).join(f)).unwrap();
                let y = std::fs::read(again.path().join(case_id(i)).join(f)).unwrap();
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn oracle_is_smooth_between_close_points() {
        let c = generate_case("s", 4, &small_cfg(), false).unwrap();
        let fd = DisplacementField::between(c.case.face_pre.cloud(), c.case.face_post.as_ref().unwrap()).unwrap();
        let bd = DisplacementField::between(c.case.bone_pre.cloud(), c.case.bone_post.cloud()).unwrap();
        // |∇δ| ≤ 2·max|Δb|·max‖f − b‖/τ²; the probe step is under 1 mm
        let pts = c.case.face_pre.cloud();
        let tau = 15.0;
        let reach = 300.0;
        let step = Vec3::new(0.5, 0.5, 0.0);
        let lipschitz = 2.0 * bd.max_norm() * reach / (tau * tau);
        let probe = PointCloud::new(pts.points().iter().map(|p| p + step).collect()).unwrap();
        let o = oracle_face_displacement(&probe, c.case.bone_pre.cloud(), &bd, tau).unwrap();
        for i in 0..pts.len() {
            assert!((o.field.get(i) - fd.get(i)).norm() <= 10.0 * lipschitz * step.norm());
        }
    }
}
