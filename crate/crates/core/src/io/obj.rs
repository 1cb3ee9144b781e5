use std::io::Write;
use std::path::Path;

use super::{create, finish, fmt_sig9, read_to_string};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, TriMesh};

/// Reads `v` and triangular `f` records; face indices are 1-based and may
/// carry `/vt/vn` suffixes, which are ignored.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut verts = Vec::new();
    let mut faces: Vec<([i64; 3], usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .map(|t| t.parse::<f64>().map_err(|_| perr(ln, format!("non-numeric token `{t}`"))))
                    .collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(perr(ln, "vertex needs three coordinates".into()));
                }
                verts.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<i64>().map_err(|_| perr(ln, format!("bad face index `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::UnsupportedFace {
                        path: path.to_path_buf(),
                        line: ln,
                        vertices: idx.len(),
                    });
                }
                faces.push(([idx[0], idx[1], idx[2]], ln));
            }
            Some("vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib") => {}
            Some(other) => return Err(perr(ln, format!("unsupported record `{other}`"))),
            None => {}
        }
    }
    let n = verts.len() as i64;
    let mut tris = Vec::with_capacity(faces.len());
    for (f, ln) in faces {
        let mut t = [0usize; 3];
        for (slot, &v) in t.iter_mut().zip(&f) {
            if v < 1 || v > n {
                return Err(perr(ln, format!("face index {v} out of range 1..={n}")));
            }
            *slot = (v - 1) as usize;
        }
        tris.push(t);
    }
    let cloud = PointCloud::new(verts).map_err(|e| perr(0, e.to_string()))?;
    TriMesh::new(cloud, tris)
}

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for p in mesh.vertices().points() {
        writeln!(w, "v {} {} {}", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.z)).map_err(io)?;
    }
    for t in mesh.triangles() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io)?;
    }
    finish(w, path)
}
