//! Losses, the Adam optimizer, finite-difference gradient verification and
//! the cross-validated training loop.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::case::SurgicalCase;
use crate::error::{Error, Result};
use crate::geometry::{knn_query, DisplacementField, KdTree, NeighborIndex, PointCloud};
use crate::io::RunConfig;
use crate::manifold::{partition_subclouds, SubCloudPartition};
use crate::network::{forward_on, Architecture, Bound, NetworkInput, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cd: f64,
    pub smooth: f64,
    pub prog: f64,
}

impl LossWeights {
    pub fn new(cd: f64, smooth: f64, prog: f64) -> Result<Self> {
        let w = Self { cd, smooth, prog };
        w.validate()?;
        Ok(w)
    }

    pub fn from_config(c: &RunConfig) -> Result<Self> {
        Self::new(c.lambda_cd, c.lambda_s, c.lambda_p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.cd, self.smooth, self.prog];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cd: 1.0, smooth: 0.1, prog: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub chamfer: f64,
    pub smooth: f64,
    pub prog: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.cd * c.chamfer + w.smooth * c.smooth + w.prog * c.prog
}

/// `(1/N_F)(Σ_i min_j ‖f_i+Δf_i − f′_j‖² + Σ_j min_i ‖f_i+Δf_i − f′_j‖²)`.
pub fn chamfer_loss(face: &PointCloud, disp: &DisplacementField, target: &PointCloud) -> Result<f64> {
    let pred = face.displaced(disp)?;
    let (tp, tt) = (KdTree::build(&pred), KdTree::build(target));
    let fwd: f64 = pred.points().iter().map(|p| tt.nearest(p).1).sum();
    let bwd: f64 = target.points().iter().map(|q| tp.nearest(q).1).sum();
    Ok((fwd + bwd) / face.len() as f64)
}

/// `(1/N) Σ_i Σ_{j∈N(i)} ‖Δf_i − Δf_j‖`, or with squared norms.
pub fn smoothness_loss(disp: &DisplacementField, nbrs: &NeighborIndex, squared: bool) -> Result<f64> {
    if nbrs.len() != disp.len() {
        return Err(Error::invalid("neighbor index and field differ in size"));
    }
    let mut total = 0.0;
    for i in 0..disp.len() {
        for &j in nbrs.neighbors(i) {
            let n2 = (disp.get(i) - disp.get(j)).norm_squared();
            total += if squared { n2 } else { n2.sqrt() };
        }
    }
    Ok(total / disp.len() as f64)
}

/// `(1/T) Σ_t mean_i ‖Σ_{k≤t} δ^k_i − (t/(T−1)) Δf_i‖²`.
pub fn progressive_loss(steps: &[DisplacementField], total: &DisplacementField) -> Result<f64> {
    let t_count = steps.len();
    if t_count < 2 {
        return Err(Error::invalid("progressive loss needs at least two steps"));
    }
    if steps.iter().any(|s| s.len() != total.len()) {
        return Err(Error::invalid("step fields differ in size"));
    }
    let n = total.len();
    let mut cum = vec![crate::geometry::Vec3::zeros(); n];
    let mut loss = 0.0;
    for (t, s) in steps.iter().enumerate() {
        let frac = t as f64 / (t_count - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            cum[i] += s.get(i);
            acc += (cum[i] - total.get(i) * frac).norm_squared();
        }
        loss += acc / n as f64;
    }
    Ok(loss / t_count as f64)
}

/// One training item: a sub-cloud with its supervision target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: NetworkInput,
    target: Rc<Mat>,
    face_edges: Rc<Vec<(usize, usize)>>,
}

impl TrainSample {
    pub fn new(case: &SurgicalCase, partition: &SubCloudPartition, s: usize, arch: &Architecture) -> Result<Self> {
        let post = case
            .face_post
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("case {} has no post-operative face", case.id)))?;
        let (b, bp, f) = partition.slice(case, s)?;
        let target = post.select(&partition.face[s])?;
        Self::from_parts(NetworkInput::new(&b, &bp, &f, arch)?, &target, arch.k)
    }

    pub fn from_parts(input: NetworkInput, target: &PointCloud, k: usize) -> Result<Self> {
        let k_face = k.min(input.face.len().saturating_sub(1));
        let mut edges = Vec::new();
        if k_face > 0 {
            let nb = knn_query(&input.face, k_face)?;
            for i in 0..nb.len() {
                edges.extend(nb.neighbors(i).iter().map(|&j| (i, j)));
            }
        }
        let rows: Vec<f64> = target.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Ok(Self {
            target: Rc::new(Mat::from_vec(target.len(), 3, rows)?),
            face_edges: Rc::new(edges),
            input,
        })
    }
}

/// Scalar loss nodes of one sample.
pub struct LossVars {
    pub total: Var,
    pub chamfer: Var,
    pub smooth: Var,
    pub prog: Var,
}

pub fn sample_loss_on(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    sample: &TrainSample,
    w: &LossWeights,
    smooth_squared: bool,
) -> Result<LossVars> {
    let fwd = forward_on(tape, p, arch, &sample.input)?;
    let n = sample.input.n_face();
    let face = sample.input.face.points().iter().flat_map(|q| [q.x, q.y, q.z]).collect();
    let face = tape.leaf(Mat::from_vec(n, 3, face)?);
    let total = fwd.decoded.total;
    let pred = tape.add(face, total)?;
    let chamfer = tape.chamfer(pred, sample.target.clone(), 1.0 / n as f64)?;
    let smooth = tape.edge_norm(total, sample.face_edges.clone(), smooth_squared, 1.0 / n as f64)?;

    let t_count = fwd.decoded.steps.len();
    let mut cum = fwd.decoded.steps[0];
    let mut terms = Vec::with_capacity(t_count);
    for t in 0..t_count {
        if t > 0 {
            cum = tape.add(cum, fwd.decoded.steps[t])?;
        }
        let pseudo = tape.scale(total, t as f64 / (t_count - 1) as f64);
        let diff = tape.sub(cum, pseudo)?;
        terms.push(tape.sum_squares(diff));
    }
    let mut prog = terms[0];
    for &t in &terms[1..] {
        prog = tape.add(prog, t)?;
    }
    let prog = tape.scale(prog, 1.0 / (n * t_count) as f64);

    let a = tape.scale(chamfer, w.cd);
    let b = tape.scale(smooth, w.smooth);
    let c = tape.scale(prog, w.prog);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars { total, chamfer, smooth, prog })
}

pub type GradMap = BTreeMap<String, Mat>;

/// Loss components and parameter gradients of one sample.
pub fn sample_loss_and_grad(
    params: &NetworkParams,
    sample: &TrainSample,
    w: &LossWeights,
    smooth_squared: bool,
) -> Result<(LossComponents, GradMap)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = sample_loss_on(&mut tape, &p, &params.arch, sample, w, smooth_squared)?;
    let g = tape.backward(l.total);
    let grads = p
        .iter()
        .map(|(name, v)| (name.to_string(), g.get_or_zeros(v, tape.shape(v))))
        .collect();
    Ok((
        LossComponents { chamfer: tape.scalar(l.chamfer), smooth: tape.scalar(l.smooth), prog: tape.scalar(l.prog) },
        grads,
    ))
}

pub fn sample_loss(params: &NetworkParams, sample: &TrainSample, w: &LossWeights, smooth_squared: bool) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let l = sample_loss_on(&mut tape, &p, &params.arch, sample, w, smooth_squared)?;
    Ok(LossComponents { chamfer: tape.scalar(l.chamfer), smooth: tape.scalar(l.smooth), prog: tape.scalar(l.prog) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: GradMap,
    pub v: GradMap,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: GradMap::new(), v: GradMap::new() }
    }
}

/// Bias-corrected Adam step. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_update(params: &mut NetworkParams, grads: &GradMap, state: &mut OptimizerState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::invalid(format!("gradient for unknown tensor `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
        let v = state.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            p.data[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, f64, f64),
    pub checked: usize,
}

/// Central differences on `samples` randomly chosen coordinates of `theta`
/// against `grad`; relative error uses `max(|a|, |n|, 1e-8)`.
pub fn finite_difference_gradcheck(
    theta: &[f64],
    grad: &[f64],
    loss: impl Fn(&[f64]) -> Result<f64>,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    if theta.len() != grad.len() || theta.is_empty() {
        return Err(Error::invalid("parameter and gradient vectors differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..theta.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(samples.min(theta.len()));
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (0, 0.0, 0.0), checked: idx.len() };
    let mut work = theta.to_vec();
    for &i in &idx {
        work[i] = theta[i] + h;
        let up = loss(&work)?;
        work[i] = theta[i] - h;
        let down = loss(&work)?;
        work[i] = theta[i];
        let num = (up - down) / (2.0 * h);
        let a = grad[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, a, num);
        }
    }
    Ok(report)
}

pub fn flatten(params: &NetworkParams) -> Vec<f64> {
    params.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

pub fn flatten_grads(params: &NetworkParams, grads: &GradMap) -> Vec<f64> {
    params.names().flat_map(|n| grads[n].data.iter().copied()).collect()
}

pub fn unflatten(template: &NetworkParams, theta: &[f64]) -> NetworkParams {
    let mut p = template.clone();
    let mut off = 0;
    for (_, t) in p.iter_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&theta[off..off + n]);
        off += n;
    }
    p
}

/// Gradient check of the composite loss of one sample.
pub fn network_gradcheck(
    params: &NetworkParams,
    sample: &TrainSample,
    w: &LossWeights,
    smooth_squared: bool,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let (_, grads) = sample_loss_and_grad(params, sample, w, smooth_squared)?;
    let theta = flatten(params);
    let g = flatten_grads(params, &grads);
    finite_difference_gradcheck(
        &theta,
        &g,
        |t| Ok(sample_loss(&unflatten(params, t), sample, w, smooth_squared)?.total(w)),
        samples,
        h,
        seed,
    )
}

/// Gradient check on a bundled 30-point case (10 points per source) with a
/// small architecture: three parameter draws in `[-0.5, 0.5]`, 20
/// coordinates each, `h = 1e-5`.
pub fn bundled_gradcheck(seed: u64) -> Result<GradcheckReport> {
    use crate::geometry::{LabeledCloud, Point3, SourceLabel, Vec3};
    let arch = Architecture {
        k: 4,
        heads: 2,
        width: 8,
        edge_width: 6,
        pos_width: 12,
        lstm_depth: 2,
        steps: 3,
        coord_scale: 50.0,
        disp_scale: 10.0,
        gaussian_edge_weights: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = |rng: &mut ChaCha8Rng| {
        PointCloud::new((0..10).map(|_| Point3::new(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0))).collect())
    };
    let b = cloud(&mut rng)?;
    let bp = b.translated(&Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 3.0));
    let f = cloud(&mut rng)?;
    let input = NetworkInput::new(
        &LabeledCloud::uniform(b, SourceLabel::PreOpBone),
        &LabeledCloud::uniform(bp, SourceLabel::PostOpBone),
        &LabeledCloud::uniform(f, SourceLabel::PreOpFace),
        &arch,
    )?;
    let w = LossWeights::default();
    let mut total = GradcheckReport { max_rel_error: 0.0, worst: (0, 0.0, 0.0), checked: 0 };
    for s in 0..3 {
        let params = NetworkParams::random(arch.clone(), derive_seed(seed, s, 1), 0.5)?;
        let pred = crate::network::predict_input(&input, &params)?;
        let offset = DisplacementField::new((0..10).map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect())?;
        let sample = TrainSample::from_parts(input.clone(), &pred.face_post.displaced(&offset)?, arch.k)?;
        let r = network_gradcheck(&params, &sample, &w, false, 20, 1e-5, derive_seed(seed, s, 2))?;
        if r.max_rel_error >= total.max_rel_error {
            total.max_rel_error = r.max_rel_error;
            total.worst = r.worst;
        }
        total.checked += r.checked;
    }
    Ok(total)
}

/// Shuffles `0..n` and deals it round-robin into `k` folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot split {n} cases into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (slot, i) in idx.into_iter().enumerate() {
        folds[slot % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Deterministic seed mixer.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One sub-cloud per case, drawn from a fresh partition for `epoch`.
pub fn epoch_samples(cases: &[SurgicalCase], cfg: &RunConfig, arch: &Architecture, epoch: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, u64::MAX));
    cases
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let p = partition_subclouds(case, cfg.subclouds, cfg.m, derive_seed(cfg.seed, epoch, ci as u64))?;
            let s = rng.gen_range(0..p.len());
            TrainSample::new(case, &p, s, arch)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub components: LossComponents,
}

pub const LOSS_LOG_HEADER: &str = "epoch,L_total,L_CD,L_smooth,L_prog";

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.total, e.components.chamfer, e.components.smooth, e.components.prog
        ));
    }
    s
}

/// Mean loss over `samples`.
pub fn evaluate_loss(params: &NetworkParams, samples: &[TrainSample], w: &LossWeights, smooth_squared: bool) -> Result<(f64, LossComponents)> {
    let mut acc = LossComponents::default();
    for s in samples {
        let c = sample_loss(params, s, w, smooth_squared)?;
        acc.chamfer += c.chamfer;
        acc.smooth += c.smooth;
        acc.prog += c.prog;
    }
    let n = samples.len().max(1) as f64;
    let mean = LossComponents { chamfer: acc.chamfer / n, smooth: acc.smooth / n, prog: acc.prog / n };
    Ok((mean.total(w), mean))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub loss_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Initial parameters; seeded initialization otherwise.
    pub init: Option<NetworkParams>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<EpochLog>,
}

/// Runs one epoch of shuffled mini-batches; returns the mean loss seen.
pub fn train_epoch(
    params: &mut NetworkParams,
    opt: &mut OptimizerState,
    samples: &[TrainSample],
    cfg: &RunConfig,
    w: &LossWeights,
    epoch: u64,
) -> Result<(f64, LossComponents)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x5EED, epoch, 0)));
    let mut acc = LossComponents::default();
    for batch in order.chunks(cfg.batch) {
        let mut sum: Option<GradMap> = None;
        for &i in batch {
            let (c, g) = sample_loss_and_grad(params, &samples[i], w, cfg.smooth_squared)?;
            acc.chamfer += c.chamfer;
            acc.smooth += c.smooth;
            acc.prog += c.prog;
            match &mut sum {
                None => sum = Some(g),
                Some(s) => {
                    for (name, gm) in g {
                        let t = s.get_mut(&name).expect("same layout");
                        t.data.iter_mut().zip(&gm.data).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let mut g = sum.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        for t in g.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= inv);
        }
        adam_update(params, &g, opt)?;
    }
    let n = samples.len().max(1) as f64;
    let mean = LossComponents { chamfer: acc.chamfer / n, smooth: acc.smooth / n, prog: acc.prog / n };
    Ok((mean.total(w), mean))
}

pub fn train(cases: &[SurgicalCase], cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    let arch = Architecture::from_config(cfg)?;
    let w = LossWeights::from_config(cfg)?;
    let mut params = match &opts.init {
        Some(p) => p.clone(),
        None => NetworkParams::init(arch.clone(), cfg.seed)?,
    };
    let mut opt = OptimizerState::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let samples = epoch_samples(cases, cfg, &arch, epoch as u64)?;
        let (total, components) = train_epoch(&mut params, &mut opt, &samples, cfg, &w, epoch as u64)?;
        log.push(EpochLog { epoch, total, components });
        if let Some(path) = &opts.loss_log {
            std::fs::write(path, loss_log_csv(&log)).map_err(|e| Error::io(path, e))?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && (epoch % opts.checkpoint_every == 0 || epoch == cfg.epochs) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                params.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}
