//! The learnable forward model: edge-function graph features and a
//! two-level point encoder, face-to-bone multi-head attention with a
//! distance-bucket bias, and a stacked LSTM that emits displacement
//! increments.
//!
//! Every forward pass is recorded on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so that the same code serves inference and training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{dist2, knn_query, DisplacementField, LabeledCloud, PointCloud, SourceLabel, Vec3};
use crate::io::RunConfig;
use crate::manifold::{axis_code_width, neighbor_weights, positional_encode, positional_encode_scalar, MlpEdge, NeighborWeighting};

/// Number of face-bone distance buckets in the attention bias table.
pub const BUCKETS: usize = 16;
/// Upper edge (mm) of the last bounded bucket.
pub const BUCKET_RANGE: f64 = 200.0;
/// Width of the time-index code fed to the LSTM.
pub const TIME_CODE_WIDTH: usize = 8;

/// Bucket of a face-bone distance: `[0, 1)` mm is bucket 0, then 15
/// log-spaced buckets over `[1, 200)` mm with the last one open-ended.
pub fn distance_bucket(d: f64) -> u8 {
    if d < 1.0 {
        return 0;
    }
    let b = 1 + ((BUCKETS - 1) as f64 * d.ln() / BUCKET_RANGE.ln()).floor() as usize;
    b.min(BUCKETS - 1) as u8
}

/// Representative distance of a bucket (geometric midpoint).
pub fn bucket_center(b: usize) -> f64 {
    if b == 0 {
        0.5
    } else {
        BUCKET_RANGE.powf((b as f64 - 0.5) / (BUCKETS - 1) as f64)
    }
}

/// Shape-determining hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub k: usize,
    pub heads: usize,
    pub width: usize,
    pub edge_width: usize,
    pub pos_width: usize,
    pub lstm_depth: usize,
    pub steps: usize,
    pub coord_scale: f64,
    pub disp_scale: f64,
    pub gaussian_edge_weights: bool,
}

impl Architecture {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        c.validate()?;
        Ok(Self {
            k: c.k,
            heads: c.heads,
            width: c.width,
            edge_width: c.edge_width,
            pos_width: c.pos_width,
            lstm_depth: c.lstm_depth,
            steps: c.steps,
            coord_scale: c.coord_scale,
            disp_scale: c.disp_scale,
            gaussian_edge_weights: c.gaussian_edge_weights,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.k == 0 || self.width == 0 || self.edge_width == 0 || self.lstm_depth == 0 {
            return Err(Error::invalid("architecture sizes must be positive"));
        }
        if self.steps < 2 {
            return Err(Error::invalid("at least two LSTM steps are required"));
        }
        if !(self.coord_scale > 0.0 && self.disp_scale > 0.0) {
            return Err(Error::invalid("scales must be positive"));
        }
        axis_code_width(self.pos_width)?;
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Channels actually produced by the positional code.
    pub fn code_width(&self) -> usize {
        3 * axis_code_width(self.pos_width).unwrap_or(0)
    }

    fn lstm_input(&self, layer: usize) -> usize {
        if layer == 0 {
            TIME_CODE_WIDTH + self.width + 3
        } else {
            self.width
        }
    }

    /// `(name, rows, cols)` of every tensor, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (d, ew) = (self.width, self.edge_width);
        let mut l = vec![
            ("edge.w1".to_string(), 6, ew),
            ("edge.b1".into(), 1, ew),
            ("edge.w2".into(), ew, ew),
            ("edge.b2".into(), 1, ew),
            ("enc.w".into(), ew + 3 + self.code_width(), d),
            ("enc.b".into(), 1, d),
            ("conv.w".into(), 2 * d, d),
            ("conv.b".into(), 1, d),
            ("attn.wq".into(), 2 * d, d),
            ("attn.wk".into(), d, d),
            ("attn.wv".into(), 2 * d + 3, d),
            ("attn.wo".into(), d, d),
            ("attn.bo".into(), 1, d),
            ("attn.bias".into(), self.heads, BUCKETS),
        ];
        for layer in 0..self.lstm_depth {
            l.push((format!("lstm.{layer}.wx"), self.lstm_input(layer), 4 * d));
            l.push((format!("lstm.{layer}.wh"), d, 4 * d));
            l.push((format!("lstm.{layer}.b"), 1, 4 * d));
        }
        l.push(("out.w".into(), d, 3));
        l.push(("out.b".into(), 1, 3));
        l
    }

    fn to_line(&self) -> String {
        format!(
            "arch k={} heads={} width={} edge_width={} pos_width={} lstm_depth={} steps={} coord_scale={} disp_scale={} gaussian_edge_weights={}",
            self.k,
            self.heads,
            self.width,
            self.edge_width,
            self.pos_width,
            self.lstm_depth,
            self.steps,
            self.coord_scale,
            self.disp_scale,
            self.gaussian_edge_weights
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("checkpoint architecture line: {m}"));
        let mut kv = BTreeMap::new();
        let mut it = line.split_whitespace();
        if it.next() != Some("arch") {
            return Err(bad("missing `arch`"));
        }
        for tok in it {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let a = Self {
            k: num("k")?,
            heads: num("heads")?,
            width: num("width")?,
            edge_width: num("edge_width")?,
            pos_width: num("pos_width")?,
            lstm_depth: num("lstm_depth")?,
            steps: num("steps")?,
            coord_scale: real("coord_scale")?,
            disp_scale: real("disp_scale")?,
            gaussian_edge_weights: get("gaussian_edge_weights")?.parse().map_err(|_| bad("gaussian_edge_weights"))?,
        };
        a.validate()?;
        Ok(a)
    }
}

const CHECKPOINT_MAGIC: &str = "tissuefield-params 1";

/// Named parameter tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    tensors: BTreeMap<String, Mat>,
}

impl NetworkParams {
    /// Every tensor zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.layout().into_iter().map(|(n, r, c)| (n, Mat::zeros(r, c))).collect();
        Ok(Self { arch, tensors })
    }

    /// Seeded initialization: scaled-uniform weights, zero biases, unit
    /// forget-gate bias and a distance-decaying attention bias per head.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = p.arch.width;
        let names: Vec<String> = p.tensors.keys().cloned().collect();
        for name in names {
            let t = p.tensors.get_mut(&name).expect("known tensor");
            let (r, c) = t.shape();
            let bound = if name.starts_with("lstm.") {
                1.0 / (d as f64).sqrt()
            } else if name == "out.w" {
                0.1 / (d as f64).sqrt()
            } else if matches!(name.as_str(), "edge.w1" | "enc.w" | "conv.w") {
                (6.0 / r as f64).sqrt()
            } else {
                (6.0 / (r + c) as f64).sqrt()
            };
            let is_bias = r == 1 || name == "attn.bias";
            if !is_bias {
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        for layer in 0..p.arch.lstm_depth {
            let b = p.tensors.get_mut(&format!("lstm.{layer}.b")).expect("lstm bias");
            b.data[d..2 * d].fill(1.0);
        }
        let heads = p.arch.heads;
        let table = p.tensors.get_mut("attn.bias").expect("bias table");
        for h in 0..heads {
            let frac = if heads == 1 { 0.0 } else { h as f64 / (heads - 1) as f64 };
            let slope = 0.125 * 8f64.powf(-frac);
            for b in 0..BUCKETS {
                table.data[h * BUCKETS + b] = -slope * bucket_center(b);
            }
        }
        Ok(p)
    }

    /// Uniform random values in `[-scale, scale]` for every entry.
    pub fn random(arch: Architecture, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// The edge function as a standalone numeric map.
    pub fn edge_function(&self) -> MlpEdge {
        let t = |n: &str| self.tensors[n].clone();
        // stored as in×out; MlpEdge wants out×in
        let transpose = |m: Mat| {
            let mut o = Mat::zeros(m.cols, m.rows);
            for r in 0..m.rows {
                for c in 0..m.cols {
                    o.data[c * m.rows + r] = m.get(r, c);
                }
            }
            o.data
        };
        MlpEdge {
            hidden: self.arch.edge_width,
            out: self.arch.edge_width,
            w1: transpose(t("edge.w1")),
            b1: t("edge.b1").data,
            w2: transpose(t("edge.w2")),
            b2: t("edge.b2").data,
            input_scale: self.arch.coord_scale,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "{}", self.arch.to_line());
        for (name, t) in &self.tensors {
            let _ = writeln!(s, "tensor {name} {} {}", t.rows, t.cols);
            for r in 0..t.rows {
                let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: String| Error::invalid(format!("checkpoint line {line}: {m}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad(1, format!("expected `{CHECKPOINT_MAGIC}`"))),
        }
        let (_, arch_line) = lines.next().ok_or_else(|| bad(2, "missing architecture".into()))?;
        let mut p = Self::zeros(Architecture::from_line(arch_line)?)?;
        let mut seen = 0;
        loop {
            let (ln, l) = lines.next().ok_or_else(|| bad(0, "missing `end`".into()))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.as_slice() {
                ["end"] => break,
                ["tensor", name, r, c] => {
                    let (r, c): (usize, usize) = (
                        r.parse().map_err(|_| bad(ln, "bad row count".into()))?,
                        c.parse().map_err(|_| bad(ln, "bad column count".into()))?,
                    );
                    let t = p.tensors.get_mut(*name).ok_or_else(|| bad(ln, format!("unknown tensor `{name}`")))?;
                    if t.shape() != (r, c) {
                        return Err(bad(ln, format!("`{name}` is {r}x{c}, architecture expects {:?}", t.shape())));
                    }
                    for row in 0..r {
                        let (ln, l) = lines.next().ok_or_else(|| bad(ln, "truncated tensor".into()))?;
                        let vals: Vec<f64> = l
                            .split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|_| bad(ln, format!("bad value `{v}`"))))
                            .collect::<Result<_>>()?;
                        if vals.len() != c || vals.iter().any(|v| !v.is_finite()) {
                            return Err(bad(ln, format!("expected {c} finite values")));
                        }
                        t.row_mut(row).copy_from_slice(&vals);
                    }
                    seen += 1;
                }
                _ => return Err(bad(ln, format!("unexpected `{l}`"))),
            }
        }
        if seen != p.tensors.len() {
            return Err(Error::invalid(format!("checkpoint holds {seen} of {} tensors", p.tensors.len())));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Parameter leaves on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Constant, parameter-independent tensors derived from one sub-cloud.
#[derive(Debug, Clone)]
pub struct NetworkInput {
    /// Point counts of (bone-pre, bone-post, face).
    pub counts: [usize; 3],
    pub face: PointCloud,
    edge_input: Mat,
    edge_weights: Rc<Vec<f64>>,
    self_index: Rc<Vec<usize>>,
    neighbor_index: Rc<Vec<usize>>,
    point_input: Mat,
    bone_disp: Mat,
    buckets: Rc<Vec<u8>>,
    k: usize,
}

impl NetworkInput {
    pub fn new(bone_pre: &LabeledCloud, bone_post: &LabeledCloud, face: &LabeledCloud, arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        if bone_pre.len() != bone_post.len() {
            return Err(Error::invalid("bone sub-clouds differ in size"));
        }
        let union = crate::manifold::union_cloud(bone_pre, bone_post, face)?;
        let n = union.len();
        let k = arch.k;
        let nbrs = knn_query(union.cloud(), k)?;
        let pts = union.cloud().points();
        let s = arch.coord_scale;
        let mut edge_input = Mat::zeros(n * k, 6);
        let mut self_index = Vec::with_capacity(n * k);
        for i in 0..n {
            for (slot, &j) in nbrs.neighbors(i).iter().enumerate() {
                let r = pts[i] - pts[j];
                edge_input
                    .row_mut(i * k + slot)
                    .copy_from_slice(&[pts[j].x / s, pts[j].y / s, pts[j].z / s, r.x / s, r.y / s, r.z / s]);
                self_index.push(i);
            }
        }
        let weighting = if arch.gaussian_edge_weights { NeighborWeighting::Gaussian } else { NeighborWeighting::Uniform };
        let cw = arch.code_width();
        let mut point_input = Mat::zeros(n, 3 + cw);
        for (i, (p, l)) in pts.iter().zip(union.labels()).enumerate() {
            let row = point_input.row_mut(i);
            row[..3].copy_from_slice(&l.one_hot());
            row[3..].copy_from_slice(&positional_encode(p, arch.pos_width)?);
        }
        let nb = bone_pre.len();
        let mut bone_disp = Mat::zeros(nb, 3);
        for i in 0..nb {
            let d = bone_post.cloud().point(i) - bone_pre.cloud().point(i);
            bone_disp.row_mut(i).copy_from_slice(&[d.x / arch.disp_scale, d.y / arch.disp_scale, d.z / arch.disp_scale]);
        }
        let nf = face.len();
        let mut buckets = Vec::with_capacity(nf * nb);
        for f in face.cloud().points() {
            for b in bone_pre.cloud().points() {
                buckets.push(distance_bucket(dist2(f, b).sqrt()));
            }
        }
        Ok(Self {
            counts: [nb, nb, nf],
            face: face.cloud().clone(),
            edge_input,
            edge_weights: Rc::new(neighbor_weights(&nbrs, weighting)),
            self_index: Rc::new(self_index),
            neighbor_index: Rc::new(nbrs.flat().to_vec()),
            point_input,
            bone_disp,
            buckets: Rc::new(buckets),
            k,
        })
    }

    pub fn n_face(&self) -> usize {
        self.counts[2]
    }

    fn range(&self, label: SourceLabel) -> Rc<Vec<usize>> {
        let [a, b, c] = self.counts;
        let r = match label {
            SourceLabel::PreOpBone => 0..a,
            SourceLabel::PostOpBone => a..a + b,
            SourceLabel::PreOpFace => a + b..a + b + c,
        };
        Rc::new(r.collect())
    }
}

/// Encoder outputs split by source.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Per-point graph feature `g_i` of the union.
    pub graph_feature: Var,
    /// Union features after pooling concatenation, `n × 2d`.
    pub all: Var,
    pub face: Var,
    /// Local (unpooled) features of the pre-operative bone, `n_b × d`.
    pub correspondence: Var,
    pub bone_disp: Var,
}

pub fn encode_on(tape: &mut Tape, p: &Bound, input: &NetworkInput) -> Result<Encoded> {
    let e = tape.leaf(input.edge_input.clone());
    let h = tape.linear(e, p.var("edge.w1"), p.var("edge.b1"))?;
    let h = tape.relu(h);
    let phi = tape.linear(h, p.var("edge.w2"), p.var("edge.b2"))?;
    let phi = tape.row_scale(phi, input.edge_weights.clone())?;
    let g = tape.group_sum(phi, input.k)?;

    let pin = tape.leaf(input.point_input.clone());
    let x = tape.concat_cols(&[g, pin])?;
    let h1 = tape.linear(x, p.var("enc.w"), p.var("enc.b"))?;
    let h1 = tape.relu(h1);

    let hi = tape.gather_rows(h1, input.self_index.clone())?;
    let hj = tape.gather_rows(h1, input.neighbor_index.clone())?;
    let rel = tape.sub(hj, hi)?;
    let edge = tape.concat_cols(&[hi, rel])?;
    let c = tape.linear(edge, p.var("conv.w"), p.var("conv.b"))?;
    let c = tape.relu(c);
    let h2 = tape.group_max(c, input.k)?;

    let n = tape.shape(h2).0;
    let pooled = tape.col_max(h2);
    let pooled = tape.broadcast_rows(pooled, n)?;
    let all = tape.concat_cols(&[h2, pooled])?;

    let face = tape.gather_rows(all, input.range(SourceLabel::PreOpFace))?;
    let correspondence = tape.gather_rows(h2, input.range(SourceLabel::PreOpBone))?;
    let post = tape.gather_rows(all, input.range(SourceLabel::PostOpBone))?;
    let disp = tape.leaf(input.bone_disp.clone());
    let bone_disp = tape.concat_cols(&[post, disp])?;
    Ok(Encoded { graph_feature: g, all, face, correspondence, bone_disp })
}

/// Attention output `x⁰` and the per-head attention maps.
pub struct Attended {
    pub x0: Var,
    pub maps: Vec<Var>,
}

pub fn attention_on(tape: &mut Tape, p: &Bound, arch: &Architecture, enc: &Encoded, buckets: &Rc<Vec<u8>>) -> Result<Attended> {
    let q = tape.matmul(enc.face, p.var("attn.wq"))?;
    let k = tape.matmul(enc.correspondence, p.var("attn.wk"))?;
    let v = tape.matmul(enc.bone_disp, p.var("attn.wv"))?;
    let dh = arch.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(arch.heads);
    let mut maps = Vec::with_capacity(arch.heads);
    for h in 0..arch.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_t(qh, kh)?;
        let s = tape.scale(s, scale);
        let s = tape.bucket_bias(s, p.var("attn.bias"), h, buckets.clone())?;
        let a = tape.softmax_rows(s);
        maps.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let x0 = tape.linear(cat, p.var("attn.wo"), p.var("attn.bo"))?;
    Ok(Attended { x0, maps })
}

/// Per-layer hidden and cell states on a tape.
#[derive(Debug, Clone)]
pub struct LstmVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub t: usize,
}

impl LstmVars {
    pub fn zeros(tape: &mut Tape, depth: usize, n: usize, width: usize) -> Self {
        let h = (0..depth).map(|_| tape.leaf(Mat::zeros(n, width))).collect();
        let c = (0..depth).map(|_| tape.leaf(Mat::zeros(n, width))).collect();
        Self { h, c, t: 0 }
    }
}

fn time_code(t: usize, n: usize) -> Result<Mat> {
    Mat::from_vec(n, TIME_CODE_WIDTH, positional_encode_scalar(t as f64, TIME_CODE_WIDTH)?.repeat(n))
}

/// One decoder step. `x_prev` is `n×d`; `delta_prev` is `n×3` in units of
/// `disp_scale`. Returns the next state, `x^t`, and `δ^t/disp_scale`.
pub fn lstm_step_on(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    state: &LstmVars,
    x_prev: Var,
    delta_prev: Var,
) -> Result<(LstmVars, Var, Var)> {
    if state.t >= arch.steps {
        return Err(Error::invalid(format!("step {} outside 0..{}", state.t, arch.steps)));
    }
    let n = tape.shape(x_prev).0;
    let d = arch.width;
    let tc = tape.leaf(time_code(state.t, n)?);
    let mut input = tape.concat_cols(&[tc, x_prev, delta_prev])?;
    let mut next = LstmVars { h: Vec::new(), c: Vec::new(), t: state.t + 1 };
    for layer in 0..arch.lstm_depth {
        let zx = tape.matmul(input, p.var(&format!("lstm.{layer}.wx")))?;
        let zh = tape.matmul(state.h[layer], p.var(&format!("lstm.{layer}.wh")))?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, p.var(&format!("lstm.{layer}.b")))?;
        let gi = tape.slice_cols(z, 0, d)?;
        let gf = tape.slice_cols(z, d, d)?;
        let gg = tape.slice_cols(z, 2 * d, d)?;
        let go = tape.slice_cols(z, 3 * d, d)?;
        let (i, f, g, o) = (tape.sigmoid(gi), tape.sigmoid(gf), tape.tanh(gg), tape.sigmoid(go));
        let fc = tape.mul(f, state.c[layer])?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        next.h.push(h);
        next.c.push(c);
        input = h;
    }
    let x = input;
    let delta = tape.linear(x, p.var("out.w"), p.var("out.b"))?;
    Ok((next, x, delta))
}

/// Decoder outputs, in mm.
pub struct Decoded {
    pub steps: Vec<Var>,
    pub total: Var,
}

pub fn decode_on(tape: &mut Tape, p: &Bound, arch: &Architecture, x0: Var) -> Result<Decoded> {
    let n = tape.shape(x0).0;
    let mut state = LstmVars::zeros(tape, arch.lstm_depth, n, arch.width);
    let mut x = x0;
    let mut delta = tape.leaf(Mat::zeros(n, 3));
    let mut steps = Vec::with_capacity(arch.steps);
    for _ in 0..arch.steps {
        let (s, nx, nd) = lstm_step_on(tape, p, arch, &state, x, delta)?;
        state = s;
        x = nx;
        delta = nd;
        steps.push(tape.scale(nd, arch.disp_scale));
    }
    let mut total = steps[0];
    for &s in &steps[1..] {
        total = tape.add(total, s)?;
    }
    Ok(Decoded { steps, total })
}

/// Handles to every intermediate of one forward pass.
pub struct Forward {
    pub encoded: Encoded,
    pub attended: Attended,
    pub decoded: Decoded,
}

pub fn forward_on(tape: &mut Tape, p: &Bound, arch: &Architecture, input: &NetworkInput) -> Result<Forward> {
    let encoded = encode_on(tape, p, input)?;
    let attended = attention_on(tape, p, arch, &encoded, &input.buckets)?;
    let decoded = decode_on(tape, p, arch, attended.x0)?;
    Ok(Forward { encoded, attended, decoded })
}

fn mat_to_field(m: &Mat) -> Result<DisplacementField> {
    DisplacementField::new((0..m.rows).map(|r| Vec3::new(m.get(r, 0), m.get(r, 1), m.get(r, 2))).collect())
}

/// Encoder features as plain matrices.
pub struct EncodedFeatures {
    pub face: Mat,
    pub correspondence: Mat,
    pub bone_disp: Mat,
}

pub fn encode(input: &NetworkInput, params: &NetworkParams) -> Result<EncodedFeatures> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let e = encode_on(&mut tape, &p, input)?;
    Ok(EncodedFeatures {
        face: tape.value(e.face).clone(),
        correspondence: tape.value(e.correspondence).clone(),
        bone_disp: tape.value(e.bone_disp).clone(),
    })
}

/// Attention output and maps for given feature matrices and a precomputed
/// bucket table (row-major, face × bone).
pub fn multihead_attention(
    face: &Mat,
    correspondence: &Mat,
    bone_disp: &Mat,
    buckets: &[u8],
    params: &NetworkParams,
) -> Result<(Mat, Vec<Mat>)> {
    let arch = &params.arch;
    if arch.width % arch.heads != 0 {
        return Err(Error::invalid("head count must divide width"));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let enc = Encoded {
        graph_feature: tape.leaf(Mat::zeros(1, 1)),
        all: tape.leaf(Mat::zeros(1, 1)),
        face: tape.leaf(face.clone()),
        correspondence: tape.leaf(correspondence.clone()),
        bone_disp: tape.leaf(bone_disp.clone()),
    };
    let a = attention_on(&mut tape, &p, arch, &enc, &Rc::new(buckets.to_vec()))?;
    Ok((tape.value(a.x0).clone(), a.maps.iter().map(|m| tape.value(*m).clone()).collect()))
}

/// Numeric LSTM state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Mat>,
    pub c: Vec<Mat>,
    pub t: usize,
}

impl LstmState {
    pub fn zeros(arch: &Architecture, n: usize) -> Self {
        Self {
            h: vec![Mat::zeros(n, arch.width); arch.lstm_depth],
            c: vec![Mat::zeros(n, arch.width); arch.lstm_depth],
            t: 0,
        }
    }
}

/// One decoder step on plain matrices; returns the next state, `x^t` and
/// `δ^t` in mm. `delta_prev` is in mm.
pub fn lstm_step(state: &LstmState, x_prev: &Mat, delta_prev: &Mat, params: &NetworkParams) -> Result<(LstmState, Mat, Mat)> {
    let arch = &params.arch;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let vars = LstmVars {
        h: state.h.iter().map(|m| tape.leaf(m.clone())).collect(),
        c: state.c.iter().map(|m| tape.leaf(m.clone())).collect(),
        t: state.t,
    };
    let x = tape.leaf(x_prev.clone());
    let dp = tape.leaf(delta_prev.clone());
    let dp = tape.scale(dp, 1.0 / arch.disp_scale);
    let (next, x, delta) = lstm_step_on(&mut tape, &p, arch, &vars, x, dp)?;
    let delta = tape.scale(delta, arch.disp_scale);
    Ok((
        LstmState {
            h: next.h.iter().map(|v| tape.value(*v).clone()).collect(),
            c: next.c.iter().map(|v| tape.value(*v).clone()).collect(),
            t: next.t,
        },
        tape.value(x).clone(),
        tape.value(delta).clone(),
    ))
}

/// `Δf` and the per-step increments from an attention output `x⁰`.
pub fn decode_displacement(x0: &Mat, params: &NetworkParams) -> Result<(DisplacementField, Vec<DisplacementField>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(x0.clone());
    let d = decode_on(&mut tape, &p, &params.arch, x)?;
    let steps = d.steps.iter().map(|v| mat_to_field(tape.value(*v))).collect::<Result<_>>()?;
    Ok((mat_to_field(tape.value(d.total))?, steps))
}

/// Full forward pass on one sub-cloud.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub displacement: DisplacementField,
    pub steps: Vec<DisplacementField>,
    pub attention: Vec<Mat>,
    pub face_post: PointCloud,
}

pub fn predict_input(input: &NetworkInput, params: &NetworkParams) -> Result<Prediction> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let f = forward_on(&mut tape, &p, &params.arch, input)?;
    let displacement = mat_to_field(tape.value(f.decoded.total))?;
    Ok(Prediction {
        face_post: input.face.displaced(&displacement)?,
        steps: f.decoded.steps.iter().map(|v| mat_to_field(tape.value(*v))).collect::<Result<_>>()?,
        attention: f.attended.maps.iter().map(|v| tape.value(*v).clone()).collect(),
        displacement,
    })
}

/// `F + Δf(B, B′, F)` for one sub-cloud.
pub fn forward_predict(bone_pre: &LabeledCloud, bone_post: &LabeledCloud, face: &LabeledCloud, params: &NetworkParams) -> Result<Prediction> {
    predict_input(&NetworkInput::new(bone_pre, bone_post, face, &params.arch)?, params)
}
