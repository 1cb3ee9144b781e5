//! ASCII file formats: PLY clouds and heatmaps, OBJ meshes, metric CSVs,
//! flat `key = value` configuration files and case manifests.

mod config;
mod manifest;
mod obj;
mod ply;
mod report;

pub use config::{parse_key_values, RunConfig};
pub use manifest::CaseManifest;
pub use obj::{read_obj, write_obj};
pub use ply::{read_ply, read_ply_full, write_ply, write_ply_full, PlyData};
pub use report::{deviation_color, write_heatmap_ply, write_metrics_csv, MetricsRow, METRICS_HEADER};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Formats `x` with 9 significant digits, printed as the shortest decimal
/// that reads back to the rounded value.
pub fn fmt_sig9(x: f64) -> String {
    let rounded: f64 = format!("{:.8e}", x).parse().expect("formatted float parses");
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::fmt_sig9;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig9(80.000000123), "80.0000001");
        assert_eq!(fmt_sig9(-0.0), "0");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(12345678912.0), "12345678900");
    }
}
