//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p tissuefield-core --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tissuefield_core::case::SurgicalCase;
use tissuefield_core::geometry::{
    chamfer_distance, hausdorff_distance, knn_query, DisplacementField, LabeledCloud, Point3, PointCloud, SourceLabel, Vec3,
};
use tissuefield_core::io::{write_metrics_csv, RunConfig};
use tissuefield_core::manifold::partition_subclouds;
use tissuefield_core::network::{forward_predict, predict_input, Architecture, NetworkInput, NetworkParams};
use tissuefield_core::pipeline::{evaluate_prediction, predict_case};
use tissuefield_core::reconstruction::{
    build_deformation_graph, direct_solve_oracle, jacobi_initialize, jacobi_iterate, jacobi_sweep, laplacian_apply, reconstruct_dense,
    DeformationGraph, GraphOptions,
};
use tissuefield_core::synthetic::{generate_dataset, solver_benchmark_graph};
use tissuefield_core::training::{
    chamfer_loss, kfold_split, network_gradcheck, progressive_loss, smoothness_loss, train, LossWeights, TrainOptions,
    TrainSample,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Point3::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))
            .collect(),
    )
    .unwrap()
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, mag: f64) -> DisplacementField {
    DisplacementField::new(
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-mag..mag), rng.gen_range(-mag..mag), rng.gen_range(-mag..mag)))
            .collect(),
    )
    .unwrap()
}

fn max_diff(a: &DisplacementField, b: &DisplacementField) -> f64 {
    a.vectors().iter().zip(b.vectors()).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(60..=500);
        let pts = random_cloud(&mut rng, n, 30.0);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let s_count = (n as f64 * rng.gen_range(0.05..0.2)).ceil() as usize;
        let s = idx[..s_count].to_vec();
        let fixed = random_field(&mut rng, s.len(), 8.0);
        let g = build_deformation_graph(&pts, &s, &fixed, 10, GraphOptions::default()).map_err(err)?;
        let (d, rep) = reconstruct_dense(&g, 1e-12, 1_000_000).map_err(err)?;
        if !rep.converged {
            return Err(format!("jacobi did not converge at n={n}"));
        }
        let o = direct_solve_oracle(&g).map_err(err)?;
        worst = worst.max(max_diff(&d, &o));
    }
    let t = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && t < 10.0, format!("max |jacobi - direct| = {worst:.2e} mm, {t:.2} s"))
}

fn five_iterations() -> Outcome {
    let start = Instant::now();
    let g = solver_benchmark_graph(20_000, 0.05, 10, 202).map_err(err)?;
    let magnitude = (0..g.len()).filter_map(|i| g.fixed_value(i)).map(|v| v.norm()).fold(0.0, f64::max);
    if magnitude > 10.0 {
        return Err(format!("field magnitude {magnitude:.2} mm exceeds 10 mm"));
    }
    let mut d = jacobi_initialize(&g);
    for _ in 0..5 {
        d = jacobi_iterate(&g, &d).map_err(err)?;
    }
    let (converged, rep) = reconstruct_dense(&g, 1e-9, 200_000).map_err(err)?;
    if !rep.converged {
        return Err("reference solve did not converge".into());
    }
    let gap = d.vectors().iter().zip(converged.vectors()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let t = start.elapsed().as_secs_f64();
    check(gap < 1.0 && t < 30.0, format!("max |iterate5 - converged| = {gap:.3} mm ({} reference iterations), {t:.2} s", rep.iterations))
}

struct SweepBench {
    graph: DeformationGraph,
    cur: Vec<Vec3>,
    next: Vec<Vec3>,
}

impl SweepBench {
    fn new(n: usize) -> Result<Self, String> {
        let graph = solver_benchmark_graph(n, 0.05, 10, 303).map_err(err)?;
        let cur = jacobi_initialize(&graph).into_vectors();
        let mut next = cur.clone();
        jacobi_sweep(&graph, &cur, &mut next).map_err(err)?;
        Ok(Self { graph, cur, next })
    }

    /// Mean wall time of one sweep over a batch of `sweeps`.
    fn time(&mut self, sweeps: usize) -> Result<f64, String> {
        let t = Instant::now();
        for _ in 0..sweeps {
            jacobi_sweep(&self.graph, &self.next, &mut self.cur).map_err(err)?;
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        Ok(t.elapsed().as_secs_f64() / sweeps as f64)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn linear_scaling() -> Outcome {
    let mut small = SweepBench::new(100_000)?;
    let mut large = SweepBench::new(200_000)?;
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        ta.push(small.time(10)?);
        tb.push(large.time(10)?);
    }
    let (a, b) = (median(ta), median(tb));
    let r = b / a;
    check(r <= 2.5, format!("per-iteration {:.2} ms at 1e5, {:.2} ms at 2e5, ratio {r:.2}", a * 1e3, b * 1e3))
}

fn brute_hausdorff(a: &PointCloud, b: &PointCloud) -> f64 {
    let dir = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| y.points().iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    dir(a, b).max(dir(b, a))
}

fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let dir = |x: &PointCloud, y: &PointCloud| -> f64 {
        x.points()
            .iter()
            .map(|p| y.points().iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum()
    };
    (dir(a, b) + dir(b, a)) / a.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let na = rng.gen_range(1..=200);
        let nb = rng.gen_range(1..=200);
        let a = random_cloud(&mut rng, na, 50.0);
        let b = random_cloud(&mut rng, nb, 50.0);
        worst = worst.max((hausdorff_distance(&a, &b) - brute_hausdorff(&a, &b)).abs());
        worst = worst.max((chamfer_distance(&a, &b) - brute_chamfer(&a, &b)).abs());
    }
    let c = |v: &[[f64; 3]]| PointCloud::from_coords(v).unwrap();
    let hand = [
        hausdorff_distance(&c(&[[0.0; 3]]), &c(&[[3.0, 4.0, 0.0]])) == 5.0,
        hausdorff_distance(&c(&[[0.0; 3], [2.0, 0.0, 0.0]]), &c(&[[0.0; 3]])) == 2.0,
        chamfer_distance(&c(&[[0.0; 3]]), &c(&[[1.0, 0.0, 0.0]])) == 2.0,
        hausdorff_distance(&c(&[[1.0, 2.0, 3.0]]), &c(&[[1.0, 2.0, 3.0]])) == 0.0,
    ];
    check(worst < 1e-9 && hand.iter().all(|h| *h), format!("max oracle gap {worst:.2e}, hand examples {hand:?}"))
}

fn loss_examples() -> Outcome {
    let field = |v: &[[f64; 3]]| DisplacementField::new(v.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect()).unwrap();
    let origin = PointCloud::from_coords(&[[0.0; 3]]).unwrap();
    let cd = chamfer_loss(&origin, &field(&[[1.0, 0.0, 0.0]]), &origin).map_err(err)?;
    let pair = PointCloud::from_coords(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    let sm = smoothness_loss(&field(&[[0.0; 3], [3.0, 4.0, 0.0]]), &knn_query(&pair, 1).map_err(err)?, false).map_err(err)?;
    let unit = field(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    let pg = progressive_loss(&[unit.clone(), DisplacementField::zeros(2)], &unit).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let total = random_field(&mut rng, 30, 5.0);
    let t = 4;
    let inc = DisplacementField::new(total.vectors().iter().map(|v| v / (t - 1) as f64).collect()).unwrap();
    let mut traj = vec![DisplacementField::zeros(30)];
    traj.extend(std::iter::repeat(inc).take(t - 1));
    let exact = progressive_loss(&traj, &total).map_err(err)?;
    let ok = (cd - 2.0).abs() < 1e-12 && (sm - 5.0).abs() < 1e-12 && (pg - 0.5).abs() < 1e-12 && exact.abs() < 1e-12;
    check(ok, format!("L_CD {cd}, L_smooth {sm}, L_prog {pg}, exact trajectory {exact:.1e}"))
}

/// Small network on a 30-point case (10 per source). Parameters are drawn
/// uniformly in [-0.5, 0.5]; the target sits 3 mm (per axis, at most) off
/// the network's own prediction.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default()
        .with_overrides(["k=4", "heads=2", "width=8", "edge_width=6", "pos_width=12", "lstm_depth=2"])
        .unwrap();
    let arch = Architecture::from_config(&cfg).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let b = random_cloud(&mut rng, 10, 60.0);
    let bp = b.translated(&Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 3.0));
    let f = random_cloud(&mut rng, 10, 60.0);
    let input = NetworkInput::new(
        &LabeledCloud::uniform(b, SourceLabel::PreOpBone),
        &LabeledCloud::uniform(bp, SourceLabel::PostOpBone),
        &LabeledCloud::uniform(f, SourceLabel::PreOpFace),
        &arch,
    )
    .map_err(err)?;
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for s in 0..3u64 {
        let params = NetworkParams::random(arch.clone(), 6060 + s, 0.5).map_err(err)?;
        let pred = predict_input(&input, &params).map_err(err)?;
        let target = pred.face_post.displaced(&random_field(&mut rng, 10, 3.0)).map_err(err)?;
        let sample = TrainSample::from_parts(input.clone(), &target, arch.k).map_err(err)?;
        let r = network_gradcheck(&params, &sample, &w, cfg.smooth_squared, 20, 1e-5, s).map_err(err)?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let t = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && t < 60.0, format!("max relative error {worst:.2e} over {checked} coordinates, {t:.2} s"))
}

fn structural_invariants() -> Outcome {
    let cfg = RunConfig::default();
    let arch = Architecture::from_config(&cfg).map_err(err)?;
    let params = NetworkParams::init(arch.clone(), 707).map_err(err)?;
    let data = generate_dataset(1, &cfg, 707, None).map_err(err)?;
    let case = &data[0].case;
    let part = partition_subclouds(case, cfg.subclouds, cfg.m, 7).map_err(err)?;
    let (b, bp, f) = part.slice(case, 0).map_err(err)?;
    let pred = forward_predict(&b, &bp, &f, &params).map_err(err)?;

    let mut row_gap = 0.0f64;
    for m in &pred.attention {
        for r in 0..m.rows {
            row_gap = row_gap.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut sum_gap = 0.0f64;
    for i in 0..pred.displacement.len() {
        let s: Vec3 = pred.steps.iter().map(|d| *d.get(i)).sum();
        sum_gap = sum_gap.max((s - pred.displacement.get(i)).amax());
    }
    let mut perm: Vec<usize> = (0..f.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let moved = forward_predict(&b, &bp, &f.select(&perm).map_err(err)?, &params).map_err(err)?;
    let equivariant = perm.iter().enumerate().all(|(new, &old)| moved.displacement.get(new) == pred.displacement.get(old));

    let mut rng = ChaCha8Rng::seed_from_u64(708);
    let mut excess = 0.0f64;
    for _ in 0..5 {
        let n = rng.gen_range(80..300);
        let pts = random_cloud(&mut rng, n, 25.0);
        let s: Vec<usize> = (0..n).step_by(8).collect();
        let fixed = random_field(&mut rng, s.len(), 6.0);
        let g = build_deformation_graph(&pts, &s, &fixed, 8, GraphOptions::default()).map_err(err)?;
        let (d, _) = reconstruct_dense(&g, 1e-12, 1_000_000).map_err(err)?;
        for c in 0..3 {
            let lo = fixed.vectors().iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
            let hi = fixed.vectors().iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
            for v in d.vectors() {
                excess = excess.max(lo - v[c]).max(v[c] - hi);
            }
        }
    }

    let m = 7;
    let pts: Vec<Point3> = (0..m * m * m).map(|i| Point3::new((i / (m * m)) as f64, ((i / m) % m) as f64, (i % m) as f64)).collect();
    let grid = PointCloud::new(pts.clone()).unwrap();
    let g = build_deformation_graph(&grid, &[0], &DisplacementField::zeros(1), 6, GraphOptions::default()).map_err(err)?;
    let a = nalgebra::Matrix3::new(0.7, -1.1, 0.2, 1.5, 0.3, -0.4, -0.6, 0.8, 1.9);
    let lin = DisplacementField::new(pts.iter().map(|p| a * p.coords + Vec3::new(2.0, -1.0, 0.5)).collect()).unwrap();
    let l = laplacian_apply(&g, &lin).map_err(err)?;
    let interior = |p: &Point3| [p.x, p.y, p.z].iter().all(|c| *c > 0.0 && *c < (m - 1) as f64);
    let harm = pts.iter().enumerate().filter(|(_, p)| interior(p)).map(|(i, _)| l.get(i).amax()).fold(0.0, f64::max);

    let ok = row_gap < 1e-9 && sum_gap < 1e-9 && equivariant && excess <= 1e-9 && harm < 1e-9;
    check(
        ok,
        format!("rows {row_gap:.1e}, step sum {sum_gap:.1e}, equivariant {equivariant}, max-principle excess {excess:.1e}, harmonic {harm:.1e}"),
    )
}

/// Settings of the synthetic benchmark model.
fn benchmark_config() -> RunConfig {
    RunConfig::default().with_overrides(["width=32", "lr=0.003", "epochs=100"]).unwrap()
}

fn synthetic_end_to_end() -> Outcome {
    let cfg = benchmark_config();
    let data = generate_dataset(40, &cfg, cfg.seed, None).map_err(err)?;
    let folds = kfold_split(40, 5, cfg.seed).map_err(err)?;
    let test = &folds[0];
    let train_cases: Vec<SurgicalCase> = (0..40).filter(|i| !test.contains(i)).map(|i| data[i].case.clone()).collect();
    let start = Instant::now();
    let out = train(&train_cases, &cfg, &TrainOptions::default()).map_err(err)?;
    let t = start.elapsed().as_secs_f64();
    let (mut cd, mut base, mut lm) = (0.0, 0.0, 0.0);
    for &i in test {
        let c = &data[i].case;
        let truth = c.face_post.as_ref().ok_or("missing post-operative face")?;
        let p = predict_case(c, &out.params, &cfg).map_err(err)?;
        cd += chamfer_distance(&p.face_post, truth);
        base += chamfer_distance(c.face_pre.cloud(), truth);
        lm += evaluate_prediction(c, &p.face_post).map_err(err)?.landmark_mean;
    }
    let ratio = cd / base;
    let lm = lm / test.len() as f64;
    check(
        ratio <= 0.5 && lm <= 2.0 && t <= 1800.0,
        format!("{} train / {} test, chamfer {:.1}% of identity, landmark mean {lm:.3} mm, trained in {t:.0} s", train_cases.len(), test.len(), 100.0 * ratio),
    )
}

fn pipeline_csv(dir: &Path) -> Result<Vec<u8>, String> {
    let cfg = RunConfig::default()
        .with_overrides(["width=16", "edge_width=8", "epochs=2", "n_face=1200", "n_bone=320", "m=64"])
        .unwrap();
    let cases_dir = dir.join("cases");
    let data = generate_dataset(5, &cfg, 909, Some(&cases_dir)).map_err(err)?;
    let cases: Vec<SurgicalCase> = data
        .iter()
        .map(|c| SurgicalCase::load(&cases_dir.join(&c.case.id).join("manifest.txt")))
        .collect::<tissuefield_core::Result<_>>()
        .map_err(err)?;
    let folds = kfold_split(cases.len(), 5, cfg.seed).map_err(err)?;
    let train_cases: Vec<SurgicalCase> = (0..cases.len()).filter(|i| !folds[0].contains(i)).map(|i| cases[i].clone()).collect();
    let out = train(&train_cases, &cfg, &TrainOptions::default()).map_err(err)?;
    let rows = cases
        .iter()
        .map(|c| Ok(evaluate_prediction(c, &predict_case(c, &out.params, &cfg)?.face_post)?.to_row()))
        .collect::<tissuefield_core::Result<Vec<_>>>()
        .map_err(err)?;
    let path = dir.join("metrics.csv");
    write_metrics_csv(&rows, &path).map_err(err)?;
    std::fs::read(&path).map_err(err)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let x = pipeline_csv(a.path())?;
    let y = pipeline_csv(b.path())?;
    check(x == y && !x.is_empty(), format!("{} bytes, identical {}", x.len(), x == y))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("solver matches direct oracle on 20 random graphs", solver_oracle),
        ("five Jacobi iterations within 1 mm at N = 20000", five_iterations),
        ("per-iteration time scales linearly in N", linear_scaling),
        ("Hausdorff and Chamfer match exhaustive oracles", metric_oracles),
        ("hand-evaluated loss examples", loss_examples),
        ("composite loss gradient check", gradient_check),
        ("structural invariants", structural_invariants),
        ("synthetic end-to-end benchmark", synthetic_end_to_end),
        ("pipeline determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let t = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{id}] {name}: {d} ({t:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({t:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
