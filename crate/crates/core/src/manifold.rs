//! Enhanced manifold representation of the joint bone/face point set and
//! the sub-cloud partition that splits a case into independent work units.
//!
//! Each point carries its position, a local graph feature aggregated over
//! its k nearest neighbours in the *union* of all three structures, a
//! one-hot source label and a sinusoidal code of its coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::case::SurgicalCase;
use crate::error::{Error, Result};
use crate::geometry::{knn_query, DisplacementField, LabeledCloud, NeighborIndex, Point3, PointCloud, SourceLabel, Vec3};

/// Base of the sinusoidal frequency ladder.
pub const POSITIONAL_BASE: f64 = 10_000.0;

/// Sinusoidal code of one scalar: channel `2k` is `sin(x / base^(2k/width))`,
/// channel `2k+1` the matching cosine.
pub fn positional_encode_scalar(x: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::invalid(format!("code width {width} must be even and positive")));
    }
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let freq = POSITIONAL_BASE.powf(-((2 * k) as f64) / width as f64);
        let a = x * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Per-axis width used by [`positional_encode`] for a total width `c`.
pub fn axis_code_width(c: usize) -> Result<usize> {
    if c % 2 != 0 {
        return Err(Error::invalid(format!("positional width {c} must be even")));
    }
    let w = (c / 3) / 2 * 2;
    if w == 0 {
        return Err(Error::invalid(format!("positional width {c} is too small (need ≥ 6)")));
    }
    Ok(w)
}

/// Concatenated x, y, z codes; `3 · axis_code_width(c)` channels.
pub fn positional_encode(p: &Point3, c: usize) -> Result<Vec<f64>> {
    let w = axis_code_width(c)?;
    let mut out = Vec::with_capacity(3 * w);
    for x in [p.x, p.y, p.z] {
        out.extend(positional_encode_scalar(x, w)?);
    }
    Ok(out)
}

/// A learnable or fixed map `φ(p_j, p_i − p_j)` over one directed edge.
pub trait EdgeFunction {
    fn width(&self) -> usize;
    fn eval(&self, neighbor: &Point3, relative: &Vec3) -> Vec<f64>;
}

/// `φ(p_j, r) = (p_j, r)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEdge;

impl EdgeFunction for IdentityEdge {
    fn width(&self) -> usize {
        6
    }
    fn eval(&self, pj: &Point3, r: &Vec3) -> Vec<f64> {
        vec![pj.x, pj.y, pj.z, r.x, r.y, r.z]
    }
}

/// `φ(p_j, r) = r`; translation invariant.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelativeEdge;

impl EdgeFunction for RelativeEdge {
    fn width(&self) -> usize {
        3
    }
    fn eval(&self, _pj: &Point3, r: &Vec3) -> Vec<f64> {
        vec![r.x, r.y, r.z]
    }
}

/// Two-layer perceptron `W₂·relu(W₁·(x/s) + b₁) + b₂` on the 6-vector
/// `(p_j, p_i − p_j)` scaled by `1/s`. Weights are row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEdge {
    pub hidden: usize,
    pub out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input_scale: f64,
}

impl EdgeFunction for MlpEdge {
    fn width(&self) -> usize {
        self.out
    }
    fn eval(&self, pj: &Point3, r: &Vec3) -> Vec<f64> {
        let x = [pj.x, pj.y, pj.z, r.x, r.y, r.z].map(|v| v / self.input_scale);
        let mut h = vec![0.0; self.hidden];
        for (o, hv) in h.iter_mut().enumerate() {
            let mut acc = self.b1[o];
            for (i, xv) in x.iter().enumerate() {
                acc += self.w1[o * 6 + i] * xv;
            }
            *hv = acc.max(0.0);
        }
        (0..self.out)
            .map(|o| {
                let mut acc = self.b2[o];
                for (i, hv) in h.iter().enumerate() {
                    acc += self.w2[o * self.hidden + i] * hv;
                }
                acc
            })
            .collect()
    }
}

/// How neighbour contributions are weighted in the graph feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborWeighting {
    /// `w_ij = 1/k`.
    #[default]
    Uniform,
    /// Normalized `exp(−‖p_i − p_j‖²/2σ_i²)` with `σ_i` the mean neighbour
    /// distance of `i`.
    Gaussian,
}

/// Aggregation weights for every directed edge of `nbrs`, row-major.
pub fn neighbor_weights(nbrs: &NeighborIndex, weighting: NeighborWeighting) -> Vec<f64> {
    let k = nbrs.k();
    let mut out = Vec::with_capacity(nbrs.len() * k);
    for i in 0..nbrs.len() {
        match weighting {
            NeighborWeighting::Uniform => out.extend(std::iter::repeat(1.0 / k as f64).take(k)),
            NeighborWeighting::Gaussian => {
                let d = nbrs.distances(i);
                let sigma = d.iter().sum::<f64>() / k as f64;
                if sigma == 0.0 {
                    out.extend(std::iter::repeat(1.0 / k as f64).take(k));
                    continue;
                }
                let raw: Vec<f64> = d.iter().map(|&x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
                let total: f64 = raw.iter().sum();
                out.extend(raw.iter().map(|r| r / total));
            }
        }
    }
    out
}

/// `g_i = Σ_{j∈N(i)} w_ij φ(p_j, p_i − p_j)` for every point.
pub fn compute_graph_feature(
    cloud: &PointCloud,
    nbrs: &NeighborIndex,
    edge: &dyn EdgeFunction,
    weighting: NeighborWeighting,
) -> Result<Vec<Vec<f64>>> {
    if nbrs.len() != cloud.len() {
        return Err(Error::invalid(format!(
            "neighbor index covers {} points, cloud has {}",
            nbrs.len(),
            cloud.len()
        )));
    }
    let w = neighbor_weights(nbrs, weighting);
    let k = nbrs.k();
    let pts = cloud.points();
    let mut out = Vec::with_capacity(pts.len());
    for (i, pi) in pts.iter().enumerate() {
        let mut g = vec![0.0; edge.width()];
        for (slot, &j) in nbrs.neighbors(i).iter().enumerate() {
            let phi = edge.eval(&pts[j], &(pi - pts[j]));
            let wij = w[i * k + slot];
            for (gv, pv) in g.iter_mut().zip(phi) {
                *gv += wij * pv;
            }
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPoint {
    pub position: Point3,
    pub graph_feature: Vec<f64>,
    pub label: SourceLabel,
    pub code: Vec<f64>,
}

/// The concatenated bone-pre, bone-post and face points with their
/// neighbourhood over the union.
#[derive(Debug, Clone)]
pub struct EnhancedManifold {
    pub points: Vec<EnhancedPoint>,
    pub neighbors: NeighborIndex,
    /// Point counts of (bone-pre, bone-post, face), in that order.
    pub counts: [usize; 3],
}

impl EnhancedManifold {
    pub fn label_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for p in &self.points {
            h[p.label.index()] += 1;
        }
        h
    }
}

/// Concatenates `bone_pre ∥ bone_post ∥ face` into one cloud.
pub fn union_cloud(bone_pre: &LabeledCloud, bone_post: &LabeledCloud, face: &LabeledCloud) -> Result<LabeledCloud> {
    for (name, c) in [("bone_pre", bone_pre), ("bone_post", bone_post), ("face", face)] {
        if c.is_empty() {
            return Err(Error::invalid(format!("{name} is empty")));
        }
    }
    let mut pts = Vec::with_capacity(bone_pre.len() + bone_post.len() + face.len());
    let mut labels = Vec::with_capacity(pts.capacity());
    for (c, l) in [
        (bone_pre, SourceLabel::PreOpBone),
        (bone_post, SourceLabel::PostOpBone),
        (face, SourceLabel::PreOpFace),
    ] {
        pts.extend_from_slice(c.cloud().points());
        labels.extend(std::iter::repeat(l).take(c.len()));
    }
    LabeledCloud::new(PointCloud::new(pts)?, labels)
}

pub fn build_enhanced_manifold(
    bone_pre: &LabeledCloud,
    bone_post: &LabeledCloud,
    face: &LabeledCloud,
    k: usize,
    c: usize,
    edge: &dyn EdgeFunction,
    weighting: NeighborWeighting,
) -> Result<EnhancedManifold> {
    let union = union_cloud(bone_pre, bone_post, face)?;
    let neighbors = knn_query(union.cloud(), k)?;
    let g = compute_graph_feature(union.cloud(), &neighbors, edge, weighting)?;
    let mut points = Vec::with_capacity(union.len());
    for ((p, l), g) in union.cloud().points().iter().zip(union.labels()).zip(g) {
        points.push(EnhancedPoint {
            position: *p,
            graph_feature: g,
            label: *l,
            code: positional_encode(p, c)?,
        });
    }
    Ok(EnhancedManifold {
        points,
        neighbors,
        counts: [bone_pre.len(), bone_post.len(), face.len()],
    })
}

/// Disjoint index lists per sub-cloud. Bone lists index both the pre- and
/// post-operative bone clouds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubCloudPartition {
    pub bone: Vec<Vec<usize>>,
    pub face: Vec<Vec<usize>>,
}

impl SubCloudPartition {
    pub fn len(&self) -> usize {
        self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty()
    }

    /// All sampled face indices, ascending.
    pub fn sampled_face(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.face.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// One [`SurgicalCase`]-shaped slice per sub-cloud: (bone_pre, bone_post, face).
    pub fn slice(&self, case: &SurgicalCase, s: usize) -> Result<(LabeledCloud, LabeledCloud, LabeledCloud)> {
        Ok((
            case.bone_pre.select(&self.bone[s])?,
            case.bone_post.select(&self.bone[s])?,
            case.face_pre.select(&self.face[s])?,
        ))
    }

    /// Restricts a face-indexed field to each sub-cloud.
    pub fn split(&self, field: &DisplacementField) -> Result<Vec<DisplacementField>> {
        self.face.iter().map(|l| field.select(l)).collect()
    }
}

fn deal(n: usize, s: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut lists = vec![Vec::with_capacity(m); s];
    for (slot, &i) in perm.iter().take(s * m).enumerate() {
        lists[slot % s].push(i);
    }
    lists
}

/// Shuffles bone and face indices with a seeded permutation and deals the
/// first `s·m` of each round-robin into `s` lists of `m`.
pub fn partition_subclouds(case: &SurgicalCase, s: usize, m: usize, seed: u64) -> Result<SubCloudPartition> {
    partition_counts(case.n_bone(), case.n_face(), s, m, seed)
}

pub fn partition_counts(n_bone: usize, n_face: usize, s: usize, m: usize, seed: u64) -> Result<SubCloudPartition> {
    if s == 0 || m == 0 {
        return Err(Error::invalid("sub-cloud count and size must be positive"));
    }
    let need = s * m;
    if need > n_bone || need > n_face {
        return Err(Error::invalid(format!(
            "{s} sub-clouds of {m} need {need} points per structure (bone {n_bone}, face {n_face})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bone = deal(n_bone, s, m, &mut rng);
    let face = deal(n_face, s, m, &mut rng);
    Ok(SubCloudPartition { bone, face })
}

/// A displacement field defined on a subset of a cloud's indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseField {
    /// Ascending, distinct.
    pub indices: Vec<usize>,
    pub field: DisplacementField,
}

/// Scatters per-sub-cloud fields back onto their face indices.
pub fn fuse_subclouds(partition: &SubCloudPartition, fields: &[DisplacementField]) -> Result<SparseField> {
    if fields.len() != partition.face.len() {
        return Err(Error::invalid(format!(
            "{} fields for {} sub-clouds",
            fields.len(),
            partition.face.len()
        )));
    }
    let mut pairs: Vec<(usize, Vec3)> = Vec::new();
    for (list, f) in partition.face.iter().zip(fields) {
        if list.len() != f.len() {
            return Err(Error::invalid(format!(
                "sub-cloud has {} face points but its field has {}",
                list.len(),
                f.len()
            )));
        }
        pairs.extend(list.iter().copied().zip(f.vectors().iter().copied()));
    }
    pairs.sort_by_key(|p| p.0);
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InternalConsistency("sub-cloud face lists overlap".into()));
    }
    Ok(SparseField {
        indices: pairs.iter().map(|p| p.0).collect(),
        field: DisplacementField::new(pairs.into_iter().map(|p| p.1).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn origin_code_is_sin_zero_cos_one() {
        let c = positional_encode(&Point3::origin(), 24).unwrap();
        assert_eq!(c.len(), 24);
        for (i, v) in c.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn scalar_first_pair() {
        let c = positional_encode_scalar(1.0, 8).unwrap();
        assert!((c[0] - 0.84147).abs() < 1e-5);
        assert!((c[1] - 0.54030).abs() < 1e-5);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(positional_encode(&Point3::origin(), 7).is_err());
        assert!(positional_encode_scalar(0.0, 3).is_err());
        assert!(positional_encode(&Point3::origin(), 4).is_err());
    }

    #[test]
    fn code_is_injective_on_a_fine_grid() {
        // 10³ grid, 1e-3 mm spacing: all codes pairwise distinct
        let mut codes = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let p = Point3::new(i as f64 * 1e-3, 20.0 + j as f64 * 1e-3, -5.0 + k as f64 * 1e-3);
                    codes.push(positional_encode(&p, 24).unwrap());
                }
            }
        }
        for a in 0..codes.len() {
            for b in a + 1..codes.len() {
                let d: f64 = codes[a].iter().zip(&codes[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(d > 1e-6, "codes {a} and {b} coincide");
            }
        }
    }

    proptest! {
        #[test]
        fn code_channels_bounded(x in -1e3f64..1e3, y in -1e3f64..1e3, z in -1e3f64..1e3) {
            for v in positional_encode(&Point3::new(x, y, z), 30).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn identity_edge_two_points() {
        let c = PointCloud::from_coords(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let nb = knn_query(&c, 1).unwrap();
        let g = compute_graph_feature(&c, &nb, &IdentityEdge, NeighborWeighting::Uniform).unwrap();
        assert_eq!(g[0], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(g[1], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn coincident_cluster_has_zero_relative_feature() {
        let c = PointCloud::from_coords(&vec![[3.0, -2.0, 1.0]; 6]).unwrap();
        let nb = knn_query(&c, 3).unwrap();
        for g in compute_graph_feature(&c, &nb, &RelativeEdge, NeighborWeighting::Uniform).unwrap() {
            assert_eq!(g, vec![0.0; 3]);
        }
    }

    fn random_mlp(rng: &mut ChaCha8Rng, hidden: usize, out: usize) -> MlpEdge {
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        MlpEdge {
            hidden,
            out,
            w1: r(hidden * 6),
            b1: r(hidden),
            w2: r(out * hidden),
            b2: r(out),
            input_scale: 10.0,
        }
    }

    /// Naive per-edge double loop over every (i, j) pair, using neighbour
    /// membership by search rather than the index layout.
    fn naive_feature(c: &PointCloud, nb: &NeighborIndex, phi: &MlpEdge) -> Vec<Vec<f64>> {
        let n = c.len();
        let mut out = vec![vec![0.0; phi.out]; n];
        for i in 0..n {
            for j in 0..n {
                if nb.neighbors(i).contains(&j) {
                    let rel = c.point(i) - c.point(j);
                    let v = phi.eval(c.point(j), &rel);
                    for d in 0..phi.out {
                        out[i][d] += v[d] / nb.k() as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sum_form_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(5..=100);
            let c = PointCloud::new((0..n).map(|_| Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0))).collect()).unwrap();
            let k = rng.gen_range(1..5);
            let nb = knn_query(&c, k).unwrap();
            let phi = random_mlp(&mut rng, 7, 5);
            let fast = compute_graph_feature(&c, &nb, &phi, NeighborWeighting::Uniform).unwrap();
            let slow = naive_feature(&c, &nb, &phi);
            for (a, b) in fast.iter().zip(&slow) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relative_feature_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = PointCloud::new((0..60).map(|_| Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0))).collect()).unwrap();
        let nb = knn_query(&c, 6).unwrap();
        let shifted = c.translated(&Vec3::new(7.3, 7.3, 7.3));
        let nb2 = knn_query(&shifted, 6).unwrap();
        for w in [NeighborWeighting::Uniform, NeighborWeighting::Gaussian] {
            let a = compute_graph_feature(&c, &nb, &RelativeEdge, w).unwrap();
            let b = compute_graph_feature(&shifted, &nb2, &RelativeEdge, w).unwrap();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaussian_weights_are_normalized() {
        let c = PointCloud::from_coords(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let nb = knn_query(&c, 3).unwrap();
        let w = neighbor_weights(&nb, NeighborWeighting::Gaussian);
        for row in w.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, l: SourceLabel) -> LabeledCloud {
        LabeledCloud::uniform(
            PointCloud::new((0..n).map(|_| Point3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))).collect()).unwrap(),
            l,
        )
    }

    #[test]
    fn enhanced_manifold_counts_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b0 = cloud(&mut rng, 20, SourceLabel::PreOpBone);
        let b1 = b0.with_label(SourceLabel::PostOpBone);
        let f = cloud(&mut rng, 30, SourceLabel::PreOpFace);
        let phi = random_mlp(&mut rng, 8, 4);
        let m = build_enhanced_manifold(&b0, &b1, &f, 5, 24, &phi, NeighborWeighting::Uniform).unwrap();
        assert_eq!(m.points.len(), 70);
        assert_eq!(m.label_histogram(), [20, 20, 30]);
        for p in &m.points {
            assert!(p.graph_feature.iter().chain(&p.code).all(|v| v.is_finite()));
        }
        // identical bone clouds: each pre/post pair is a coincident point
        // whose neighbourhoods are mirror images, so features agree
        for i in 0..20 {
            let a = &m.points[i].graph_feature;
            let b = &m.points[20 + i].graph_feature;
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let empty_err = union_cloud(&b0, &b1, &f);
        assert!(empty_err.is_ok());
    }

    fn toy_case(nb: usize, nf: usize) -> SurgicalCase {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = cloud(&mut rng, nb, SourceLabel::PreOpBone).cloud().clone();
        let f = cloud(&mut rng, nf, SourceLabel::PreOpFace).cloud().clone();
        SurgicalCase::new("toy", b.clone(), b, f, None).unwrap()
    }

    #[test]
    fn partition_contracts() {
        let case = toy_case(600, 500);
        let p = partition_subclouds(&case, 5, 100, 3).unwrap();
        assert_eq!(p.face.len(), 5);
        assert!(p.face.iter().all(|l| l.len() == 100));
        assert_eq!(p.sampled_face(), (0..500).collect::<Vec<_>>());
        let mut bones: Vec<usize> = p.bone.iter().flatten().copied().collect();
        bones.sort();
        bones.dedup();
        assert_eq!(bones.len(), 500);
        assert_eq!(p, partition_subclouds(&case, 5, 100, 3).unwrap());
        assert_ne!(p, partition_subclouds(&case, 5, 100, 4).unwrap());
        assert!(partition_subclouds(&case, 6, 100, 3).is_err());

        let one = partition_subclouds(&case, 1, 40, 8).unwrap();
        let mut perm: Vec<usize> = (0..600).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        perm.shuffle(&mut rng);
        assert_eq!(one.bone[0], perm[..40].to_vec());
    }

    #[test]
    fn fuse_scatter_and_round_trip() {
        let case = toy_case(300, 200);
        let p = partition_subclouds(&case, 2, 100, 5).unwrap();
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = Vec3::new(-1.0, 0.0, 0.5);
        let fused = fuse_subclouds(&p, &[DisplacementField::constant(100, a), DisplacementField::constant(100, b)]).unwrap();
        for (idx, v) in fused.indices.iter().zip(fused.field.vectors()) {
            if p.face[0].contains(idx) {
                assert_eq!(*v, a);
            } else {
                assert_eq!(*v, b);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = DisplacementField::new((0..200).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()).unwrap();
        let back = fuse_subclouds(&p, &p.split(&field).unwrap()).unwrap();
        assert_eq!(back.indices, (0..200).collect::<Vec<_>>());
        assert_eq!(back.field, field);
        assert!(fuse_subclouds(&p, &[DisplacementField::zeros(100)]).is_err());
        assert!(fuse_subclouds(&p, &[DisplacementField::zeros(100), DisplacementField::zeros(99)]).is_err());

        let single = partition_subclouds(&case, 1, 200, 5).unwrap();
        let sub = single.split(&field).unwrap();
        assert_eq!(fuse_subclouds(&single, &sub).unwrap().field, field);
    }
}
