use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};

use tissuefield_core::case::SurgicalCase;
use tissuefield_core::geometry::{
    farthest_point_sample, DisplacementField, LabeledCloud, SourceLabel, Vec3,
};
use tissuefield_core::io::{read_ply, read_ply_full, write_heatmap_ply, write_metrics_csv, write_ply, write_ply_full, CaseManifest, RunConfig};
use tissuefield_core::manifold::SparseField;
use tissuefield_core::network::NetworkParams;
use tissuefield_core::pipeline::{evaluate_prediction, predict_sparse, reconstruct};
use tissuefield_core::reconstruction::{jacobi_initialize, jacobi_sweep};
use tissuefield_core::registration::{icp_refine, landmark_rigid_init, IcpOptions};
use tissuefield_core::synthetic::{generate_dataset, solver_benchmark_graph};
use tissuefield_core::training::{bundled_gradcheck, kfold_split, train, TrainOptions};

use crate::{Command, ConfigArgs, Driver};

pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    base.with_overrides(args.overrides.iter().map(String::as_str))
        .map_err(|e| Failure::Usage(e.to_string()))
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth { cases, seed, out, cfg } => synth(cases, seed, &out, &load_config(&cfg)?),
        Command::Register { manifest, driver, max_iters, tol } => register(&manifest, driver, IcpOptions { max_iters, tol }),
        Command::Train { data, out, fold, folds, checkpoint_every, cfg } => {
            train_folds(&data, &out, fold, folds, checkpoint_every, &load_config(&cfg)?)
        }
        Command::Predict { manifest, checkpoint, out, cfg } => predict(&manifest, &checkpoint, &out, &load_config(&cfg)?),
        Command::Reconstruct { face, sparse, out, report, cfg } => reconstruct_cmd(&face, &sparse, &out, &report, &load_config(&cfg)?),
        Command::Eval { manifest, predicted, csv, heatmap_dir } => eval(&manifest, &predicted, &csv, heatmap_dir.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::BenchSolver { sizes, k_rec, trials, seed } => bench_solver(&sizes, k_rec, trials, seed),
    }
}

fn synth(cases: usize, seed: u64, out: &Path, cfg: &RunConfig) -> Outcome {
    if cases == 0 {
        return Err(Failure::Usage("--cases must be positive".into()));
    }
    let data = generate_dataset(cases, cfg, seed, Some(out))?;
    let flagged: usize = data.iter().map(|c| c.flagged.len()).sum();
    println!("wrote {} cases to {}", data.len(), out.display());
    if flagged > 0 {
        println!("{flagged} face points beyond the bone-displacement bound were flagged");
    }
    Ok(())
}

fn register(manifest: &Path, driver: Driver, opts: IcpOptions) -> Outcome {
    let mut m = CaseManifest::load(manifest)?;
    let case = SurgicalCase::from_manifest(&m)?;
    let face_post = case.face_post.as_ref();
    let (source, target) = match driver {
        Driver::Bone => (case.bone_post.cloud().clone(), case.bone_pre.cloud().clone()),
        Driver::Face => {
            let fp = face_post.ok_or_else(|| anyhow!("case {} has no post-operative face", case.id))?;
            (fp.clone(), case.face_pre.cloud().clone())
        }
    };
    // landmark init: face landmarks for the face driver, a spread subset of
    // the pointwise-corresponding bone otherwise
    let (ls, lt) = match driver {
        Driver::Face => (source.select(&case.landmarks)?, target.select(&case.landmarks)?),
        Driver::Bone => {
            let idx = farthest_point_sample(&source, 16.min(source.len()), 0)?;
            (source.select(&idx)?, target.select(&idx)?)
        }
    };
    let init = landmark_rigid_init(&ls, &lt)?;
    let icp = icp_refine(&source, &target, &init, &opts);
    let t = icp.transform;

    let dir = m.dir.clone();
    write_ply(
        &LabeledCloud::uniform(t.apply_cloud(case.bone_post.cloud()), SourceLabel::PostOpBone),
        &dir.join("bone_post_aligned.ply"),
    )?;
    m.bone_post = "bone_post_aligned.ply".into();
    if let Some(fp) = face_post {
        write_ply(&LabeledCloud::uniform(t.apply_cloud(fp), SourceLabel::PreOpFace), &dir.join("face_post_aligned.ply"))?;
        m.face_post = Some("face_post_aligned.ply".into());
    }
    let name = match driver {
        Driver::Bone => "bone",
        Driver::Face => "face",
    };
    let rms = *icp.rms_history.last().unwrap_or(&0.0);
    m.extra.insert("icp_driver".into(), name.into());
    m.extra.insert("icp_iterations".into(), icp.iterations.to_string());
    m.extra.insert("icp_rms_mm".into(), format!("{rms:e}"));
    let row: Vec<String> = t.to_row().iter().map(|v| format!("{v:e}")).collect();
    m.extra.insert("icp_transform".into(), row.join(","));
    let path = m.save()?;
    println!(
        "{}: {name}-driven ICP, {} iterations, rms {rms:.4} mm, rotation {:.4} deg; manifest {}",
        case.id,
        icp.iterations,
        t.angle().to_degrees(),
        path.display()
    );
    Ok(())
}

fn case_dirs(data: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(anyhow!("no case directories under {}", data.display()));
    }
    Ok(dirs)
}

fn train_folds(data: &Path, out: &Path, fold: Option<usize>, folds: usize, checkpoint_every: usize, cfg: &RunConfig) -> Outcome {
    if folds < 2 {
        return Err(Failure::Usage("--folds must be at least 2".into()));
    }
    if let Some(f) = fold.filter(|f| *f >= folds) {
        return Err(Failure::Usage(format!("--fold {f} out of range for {folds} folds")));
    }
    let dirs = case_dirs(data)?;
    let cases = dirs.iter().map(|d| SurgicalCase::load(d)).collect::<tissuefield_core::Result<Vec<_>>>()?;
    let split = kfold_split(cases.len(), folds, cfg.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let selected: Vec<usize> = match fold {
        Some(f) => vec![f],
        None => (0..folds).collect(),
    };
    for f in selected {
        let test = &split[f];
        let train_cases: Vec<SurgicalCase> = (0..cases.len()).filter(|i| !test.contains(i)).map(|i| cases[i].clone()).collect();
        let fold_dir = out.join(format!("fold_{f}"));
        std::fs::create_dir_all(&fold_dir)?;
        let ids: Vec<&str> = test.iter().map(|&i| cases[i].id.as_str()).collect();
        std::fs::write(fold_dir.join("test_cases.txt"), ids.join("\n") + "\n")?;
        let start = Instant::now();
        let outcome = train(
            &train_cases,
            cfg,
            &TrainOptions {
                loss_log: Some(fold_dir.join("loss.csv")),
                checkpoint_dir: Some(fold_dir.join("checkpoints")),
                checkpoint_every,
                init: None,
            },
        )?;
        outcome.params.save(&fold_dir.join("final.ckpt"))?;
        let last = outcome.log.last().map(|e| e.total).unwrap_or(f64::NAN);
        println!(
            "fold {f}: {} train / {} test cases, final loss {last:.5}, {:.1} s",
            train_cases.len(),
            test.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn predict(manifest: &Path, checkpoint: &Path, out: &Path, cfg: &RunConfig) -> Outcome {
    let case = SurgicalCase::load(manifest)?;
    let params = NetworkParams::load(checkpoint)?;
    let sparse = predict_sparse(&case, &params, cfg)?;
    let face = case.face_pre.cloud().select(&sparse.indices)?;
    let moved = face.displaced(&sparse.field)?;
    let index: Vec<f64> = sparse.indices.iter().map(|&i| i as f64).collect();
    let comp = |c: usize| -> Vec<f64> { sparse.field.vectors().iter().map(|v| v[c]).collect() };
    let (dx, dy, dz) = (comp(0), comp(1), comp(2));
    write_ply_full(
        &LabeledCloud::uniform(moved, SourceLabel::PreOpFace),
        None,
        &[("index", &index), ("dx", &dx), ("dy", &dy), ("dz", &dz)],
        &[],
        out,
    )?;
    println!("{}: {} sparse points, max displacement {:.3} mm", case.id, sparse.indices.len(), sparse.field.max_norm());
    Ok(())
}

fn read_sparse(path: &Path) -> anyhow::Result<SparseField> {
    let ply = read_ply_full(path, SourceLabel::PreOpFace)?;
    let col = |name: &str| {
        ply.extras
            .get(name)
            .ok_or_else(|| anyhow!("{}: missing vertex property `{name}`", path.display()))
    };
    let index = col("index")?;
    let (dx, dy, dz) = (col("dx")?, col("dy")?, col("dz")?);
    let mut rows: Vec<(usize, Vec3)> = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        let v = index[i];
        if v < 0.0 || v.fract() != 0.0 {
            return Err(anyhow!("{}: invalid index {v}", path.display()));
        }
        rows.push((v as usize, Vec3::new(dx[i], dy[i], dz[i])));
    }
    rows.sort_by_key(|r| r.0);
    Ok(SparseField {
        indices: rows.iter().map(|r| r.0).collect(),
        field: DisplacementField::new(rows.into_iter().map(|r| r.1).collect())?,
    })
}

fn reconstruct_cmd(face: &Path, sparse: &Path, out: &Path, report: &Path, cfg: &RunConfig) -> Outcome {
    let face = read_ply(face, SourceLabel::PreOpFace)?;
    let sparse = read_sparse(sparse)?;
    let (dense, rep) = reconstruct(face.cloud(), &sparse, cfg)?;
    write_ply(&LabeledCloud::uniform(face.cloud().displaced(&dense)?, SourceLabel::PreOpFace), out)?;
    std::fs::write(report, serde_json::to_string_pretty(&rep)? + "\n").with_context(|| format!("writing {}", report.display()))?;
    println!(
        "{} points, {} constrained: {} iterations, residual {:.2e} mm, converged {}, {:.3} s",
        face.len(),
        sparse.indices.len(),
        rep.iterations,
        rep.residual,
        rep.converged,
        rep.wall_time_s
    );
    Ok(())
}

fn eval(manifests: &[PathBuf], predicted: &[PathBuf], csv: &Path, heatmap_dir: Option<&Path>) -> Outcome {
    if manifests.len() != predicted.len() {
        return Err(Failure::Usage(format!(
            "{} --manifest but {} --predicted arguments",
            manifests.len(),
            predicted.len()
        )));
    }
    let mut reports = Vec::with_capacity(manifests.len());
    for (m, p) in manifests.iter().zip(predicted) {
        let case = SurgicalCase::load(m)?;
        let pred = read_ply(p, SourceLabel::PreOpFace)?.into_parts().0;
        let report = evaluate_prediction(&case, &pred)?;
        if let Some(dir) = heatmap_dir {
            std::fs::create_dir_all(dir)?;
            let mesh = case
                .face_mesh
                .as_ref()
                .ok_or_else(|| anyhow!("case {} has no face mesh", case.id))?
                .with_vertices(pred.clone())?;
            write_heatmap_ply(&mesh, &report.signed_deviations, &dir.join(format!("{}_heatmap.ply", case.id)))?;
        }
        reports.push(report);
    }
    reports.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let rows: Vec<_> = reports.iter().map(|r| r.to_row()).collect();
    write_metrics_csv(&rows, csv)?;
    for r in &reports {
        println!(
            "{}: hausdorff {:.3} mm, surface {:.3} mm, landmarks {:.3} +- {:.3} mm",
            r.case_id, r.hausdorff, r.surface_deviation, r.landmark_mean, r.landmark_sd
        );
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Outcome {
    let start = Instant::now();
    let r = bundled_gradcheck(seed)?;
    let verdict = if r.max_rel_error < 1e-4 { "ok" } else { "FAILED" };
    println!(
        "max relative error {:.3e} over {} coordinates ({verdict}, {:.2} s)",
        r.max_rel_error,
        r.checked,
        start.elapsed().as_secs_f64()
    );
    if r.max_rel_error < 1e-4 {
        Ok(())
    } else {
        Err(Failure::Data(anyhow!("gradient check exceeded 1e-4")))
    }
}

fn bench_solver(sizes: &[usize], k_rec: usize, trials: usize, seed: u64) -> Outcome {
    if trials == 0 || sizes.iter().any(|&n| n <= k_rec) {
        return Err(Failure::Usage("--trials must be positive and every size above --k-rec".into()));
    }
    println!("{:>9} {:>6} {:>10} {:>12} {:>14} {:>8}", "N", "k_rec", "setup_s", "iter_ms", "ns/(node*k)", "ratio");
    let mut prev: Option<(usize, f64)> = None;
    for &n in sizes {
        let t0 = Instant::now();
        let g = solver_benchmark_graph(n, 0.05, k_rec, seed)?;
        let build = t0.elapsed().as_secs_f64();
        let mut cur = jacobi_initialize(&g).into_vectors();
        let mut next = cur.clone();
        jacobi_sweep(&g, &cur, &mut next)?;
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            jacobi_sweep(&g, &next, &mut cur)?;
            times.push(t.elapsed().as_secs_f64());
            std::mem::swap(&mut cur, &mut next);
        }
        times.sort_by(f64::total_cmp);
        let median = times[trials / 2];
        let ratio = prev.map(|(pn, pt)| format!("{:.2}", (median / pt) / (n as f64 / pn as f64))).unwrap_or_else(|| "-".into());
        println!(
            "{n:>9} {k_rec:>6} {build:>10.3} {:>12.3} {:>14.2} {ratio:>8}",
            median * 1e3,
            median * 1e9 / (n * k_rec) as f64
        );
        prev = Some((n, median));
    }
    println!("ratio: per-iteration time growth divided by size growth (1.0 = linear)");
    Ok(())
}
