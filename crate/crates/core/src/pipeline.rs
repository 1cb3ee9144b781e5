//! End-to-end glue: sparse prediction over all sub-clouds, dense
//! reconstruction, and evaluation against a known post-operative face.

use crate::case::SurgicalCase;
use crate::error::{Error, Result};
use crate::eval::{evaluate_case, EvalReport};
use crate::geometry::{DisplacementField, PointCloud};
use crate::io::RunConfig;
use crate::manifold::{fuse_subclouds, partition_subclouds, SparseField};
use crate::network::{forward_predict, NetworkParams};
use crate::reconstruction::{build_deformation_graph, reconstruct_dense_with, GraphOptions, LaplacianSolveReport};
use crate::training::derive_seed;

/// Seed of the inference partition of a case.
pub fn inference_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 0xF00D, 0)
}

/// Network displacements at every sampled face point of `case`.
pub fn predict_sparse(case: &SurgicalCase, params: &NetworkParams, cfg: &RunConfig) -> Result<SparseField> {
    let part = partition_subclouds(case, cfg.subclouds, cfg.m, inference_seed(cfg))?;
    let fields = (0..part.len())
        .map(|s| {
            let (b, bp, f) = part.slice(case, s)?;
            Ok(forward_predict(&b, &bp, &f, params)?.displacement)
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_subclouds(&part, &fields)
}

/// Dense field over `face` from sparse constraints.
pub fn reconstruct(face: &PointCloud, sparse: &SparseField, cfg: &RunConfig) -> Result<(DisplacementField, LaplacianSolveReport)> {
    let graph = build_deformation_graph(
        face,
        &sparse.indices,
        &sparse.field,
        cfg.k_rec_for(face.len()),
        GraphOptions { symmetric_weights: cfg.symmetric_weights },
    )?;
    reconstruct_dense_with(&graph, cfg.jacobi_tol, cfg.jacobi_max_iters, cfg.displacement_kernel)
}

#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub sparse: SparseField,
    pub dense: DisplacementField,
    pub face_post: PointCloud,
    pub report: LaplacianSolveReport,
}

pub fn predict_case(case: &SurgicalCase, params: &NetworkParams, cfg: &RunConfig) -> Result<CasePrediction> {
    let sparse = predict_sparse(case, params, cfg)?;
    let (dense, report) = reconstruct(case.face_pre.cloud(), &sparse, cfg)?;
    Ok(CasePrediction { face_post: case.face_pre.cloud().displaced(&dense)?, sparse, dense, report })
}

/// Scores a predicted face against the case's post-operative face, using
/// the pre-operative mesh connectivity on the true post-operative vertices.
pub fn evaluate_prediction(case: &SurgicalCase, predicted: &PointCloud) -> Result<EvalReport> {
    let truth = case
        .face_post
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("case {} has no post-operative face", case.id)))?;
    let mesh = case
        .face_mesh
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("case {} has no face mesh", case.id)))?;
    evaluate_case(&case.id, predicted, &mesh.with_vertices(truth.clone())?, &case.landmarks)
}
