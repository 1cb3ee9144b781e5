use std::path::Path;

use serde::Serialize;

use super::ply::write_ply_full;
use crate::error::{Error, Result};
use crate::geometry::{LabeledCloud, SourceLabel, TriMesh};

pub const METRICS_HEADER: [&str; 7] = [
    "case_id",
    "hausdorff_mm",
    "surface_dev_mm",
    "landmark_mean_mm",
    "pct_lt2",
    "pct_2to4",
    "pct_gt4",
];

/// One row of the evaluation CSV. Bucket columns are percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub case_id: String,
    pub hausdorff_mm: f64,
    pub surface_dev_mm: f64,
    pub landmark_mean_mm: f64,
    pub pct_lt2: f64,
    pub pct_2to4: f64,
    pub pct_gt4: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Color-map stops at -4, -2, 0, +2, +4 mm, linearly interpolated per
/// channel and clamped outside ±4 mm.
const STOPS: [(f64, [f64; 3]); 5] = [
    (-4.0, [0.0, 0.0, 255.0]),
    (-2.0, [0.0, 127.5, 255.0]),
    (0.0, [0.0, 255.0, 0.0]),
    (2.0, [255.0, 127.5, 0.0]),
    (4.0, [255.0, 0.0, 0.0]),
];

/// RGB for a signed deviation in millimeters: blue below, green at zero,
/// red above.
pub fn deviation_color(dev_mm: f64) -> [u8; 3] {
    let d = if dev_mm.is_nan() { 0.0 } else { dev_mm.clamp(-4.0, 4.0) };
    let seg = STOPS
        .windows(2)
        .find(|w| d <= w[1].0)
        .unwrap_or(&STOPS[3..5]);
    let (x0, c0) = seg[0];
    let (x1, c1) = seg[1];
    let t = (d - x0) / (x1 - x0);
    let mut out = [0u8; 3];
    for ch in 0..3 {
        out[ch] = (c0[ch] + t * (c1[ch] - c0[ch])).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Mesh PLY with per-vertex colors from [`deviation_color`]; the signed
/// deviation is kept as a `deviation` property.
pub fn write_heatmap_ply(mesh: &TriMesh, deviations: &[f64], path: &Path) -> Result<()> {
    if deviations.len() != mesh.vertices().len() {
        return Err(Error::invalid(format!(
            "{} deviations for {} vertices",
            deviations.len(),
            mesh.vertices().len()
        )));
    }
    let colors: Vec<[u8; 3]> = deviations.iter().map(|&d| deviation_color(d)).collect();
    let cloud = LabeledCloud::uniform(mesh.vertices().clone(), SourceLabel::PreOpFace);
    write_ply_full(
        &cloud,
        Some(&colors),
        &[("deviation", deviations)],
        mesh.triangles(),
        path,
    )
}
