//! Case-level accuracy metrics of a predicted post-operative face.

use crate::error::{Error, Result};
use crate::geometry::{hausdorff_distance, point_to_mesh_deviation, PointCloud, TriMesh};
use crate::io::MetricsRow;

/// Landmark error buckets: `[0, 2)`, `[2, 4]` and `(4, ∞)` mm.
pub fn bucket_of(err: f64) -> usize {
    if err < 2.0 {
        0
    } else if err <= 4.0 {
        1
    } else {
        2
    }
}

/// Fractions of `errors` per bucket; `(1, 0, 0)` for an empty list.
pub fn bucket_fractions(errors: &[f64]) -> [f64; 3] {
    if errors.is_empty() {
        return [1.0, 0.0, 0.0];
    }
    let mut c = [0usize; 3];
    for e in errors {
        c[bucket_of(*e)] += 1;
    }
    let n = errors.len() as f64;
    let (a, b) = (c[0] as f64 / n, c[1] as f64 / n);
    // third bucket takes the remainder so the fractions sum to one exactly
    [a, b, if c[2] == 0 { 0.0 } else { 1.0 - a - b }]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub case_id: String,
    pub hausdorff: f64,
    /// Mean unsigned point-to-surface deviation, mm.
    pub surface_deviation: f64,
    /// Signed per-vertex deviations, for heatmaps.
    pub signed_deviations: Vec<f64>,
    pub landmark_errors: Vec<f64>,
    pub landmark_mean: f64,
    pub landmark_sd: f64,
    pub buckets: [f64; 3],
}

impl EvalReport {
    pub fn to_row(&self) -> MetricsRow {
        MetricsRow {
            case_id: self.case_id.clone(),
            hausdorff_mm: self.hausdorff,
            surface_dev_mm: self.surface_deviation,
            landmark_mean_mm: self.landmark_mean,
            pct_lt2: 100.0 * self.buckets[0],
            pct_2to4: 100.0 * self.buckets[1],
            pct_gt4: 100.0 * self.buckets[2],
        }
    }
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Compares a predicted face (pointwise corresponding to the truth) with
/// the truth surface.
pub fn evaluate_case(case_id: &str, predicted: &PointCloud, truth: &TriMesh, landmarks: &[usize]) -> Result<EvalReport> {
    let tv = truth.vertices();
    if let Some(&bad) = landmarks.iter().find(|&&i| i >= predicted.len() || i >= tv.len()) {
        return Err(Error::invalid(format!("landmark index {bad} out of range")));
    }
    let signed: Vec<f64> = predicted.points().iter().map(|p| point_to_mesh_deviation(p, truth)).collect();
    let surface_deviation = signed.iter().map(|d| d.abs()).sum::<f64>() / signed.len() as f64;
    let landmark_errors: Vec<f64> = landmarks.iter().map(|&i| (predicted.point(i) - tv.point(i)).norm()).collect();
    let (landmark_mean, landmark_sd) = mean_sd(&landmark_errors);
    Ok(EvalReport {
        case_id: case_id.to_string(),
        hausdorff: hausdorff_distance(predicted, tv),
        surface_deviation,
        signed_deviations: signed,
        buckets: bucket_fractions(&landmark_errors),
        landmark_errors,
        landmark_mean,
        landmark_sd,
    })
}
