use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{create, finish, fmt_sig9, read_to_string};
use crate::error::{Error, Result};
use crate::geometry::{LabeledCloud, Point3, PointCloud, SourceLabel};

/// Everything the ASCII PLY reader understands about a vertex cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub cloud: LabeledCloud,
    /// `true` when the file carried a `label` property.
    pub has_labels: bool,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Additional scalar vertex properties, by name.
    pub extras: BTreeMap<String, Vec<f64>>,
    /// Triangles from a `face` element, if any.
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

#[derive(Debug)]
enum Prop {
    Scalar { name: String, integer: bool },
    List,
}

fn is_integer_type(t: &str) -> Option<bool> {
    match t {
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16"
        | "uint16" | "int32" | "uint32" => Some(true),
        "float" | "double" | "float32" | "float64" => Some(false),
        _ => None,
    }
}

/// Reads an ASCII PLY vertex cloud. Points without a `label` property get
/// `default_label`.
pub fn read_ply(path: &Path, default_label: SourceLabel) -> Result<LabeledCloud> {
    read_ply_full(path, default_label).map(|d| d.cloud)
}

pub fn read_ply_full(path: &Path, default_label: SourceLabel) -> Result<PlyData> {
    let text = read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing `ply` magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut last_line = 1;
    let mut saw_format = false;
    loop {
        let Some((ln, line)) = lines.next() else {
            return Err(perr(last_line + 1, "unexpected end of header".into()));
        };
        last_line = ln;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(perr(ln, format!("unsupported format `{other}` (ascii only)")))
            }
            ["element", name, count] => {
                let count = count
                    .parse::<usize>()
                    .map_err(|_| perr(ln, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", _, _, _] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(ln, "property before element".into()))?;
                el.props.push(Prop::List);
            }
            ["property", ty, name] => {
                let integer = is_integer_type(ty)
                    .ok_or_else(|| perr(ln, format!("unknown property type `{ty}`")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(ln, "property before element".into()))?;
                el.props.push(Prop::Scalar {
                    name: name.to_string(),
                    integer,
                });
            }
            ["end_header"] => break,
            _ => return Err(perr(ln, format!("malformed header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(perr(last_line, "header has no format line".into()));
    }
    let vidx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(last_line, "no vertex element".into()))?;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let mut extras: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut faces = Vec::new();
    let mut has_labels = false;
    let mut has_colors = false;

    for (ei, el) in elements.iter().enumerate() {
        let names: Vec<&str> = el
            .props
            .iter()
            .map(|p| match p {
                Prop::Scalar { name, .. } => name.as_str(),
                Prop::List => "",
            })
            .collect();
        let col = |n: &str| names.iter().position(|&x| x == n);
        if ei == vidx {
            let (Some(xi), Some(yi), Some(zi)) = (col("x"), col("y"), col("z")) else {
                return Err(perr(last_line, "vertex element lacks x/y/z".into()));
            };
            if el.props.iter().any(|p| matches!(p, Prop::List)) {
                return Err(perr(last_line, "list property on vertex element".into()));
            }
            let li = col("label");
            has_labels = li.is_some();
            let rgb = (col("red"), col("green"), col("blue"));
            has_colors = rgb.0.is_some() && rgb.1.is_some() && rgb.2.is_some();
            let skip: Vec<usize> = [Some(xi), Some(yi), Some(zi), li, rgb.0, rgb.1, rgb.2]
                .into_iter()
                .flatten()
                .collect();
            for (pi, p) in el.props.iter().enumerate() {
                if let Prop::Scalar { name, .. } = p {
                    if !skip.contains(&pi) {
                        extras.insert(name.clone(), Vec::with_capacity(el.count));
                    }
                }
            }
            for _ in 0..el.count {
                let Some((ln, line)) = lines.next() else {
                    return Err(perr(last_line + 1, format!(
                        "unexpected end of file: expected {} vertices, found {}",
                        el.count,
                        points.len()
                    )));
                };
                last_line = ln;
                let tok: Vec<&str> = line.split_whitespace().collect();
                if tok.len() != el.props.len() {
                    return Err(perr(ln, format!(
                        "expected {} values, found {}",
                        el.props.len(),
                        tok.len()
                    )));
                }
                let mut vals = Vec::with_capacity(tok.len());
                for (t, p) in tok.iter().zip(&el.props) {
                    let integer = matches!(p, Prop::Scalar { integer: true, .. });
                    let v = if integer {
                        t.parse::<i64>().map(|v| v as f64).ok()
                    } else {
                        t.parse::<f64>().ok()
                    };
                    vals.push(v.ok_or_else(|| perr(ln, format!("non-numeric token `{t}`")))?);
                }
                let p = Point3::new(vals[xi], vals[yi], vals[zi]);
                if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                    return Err(perr(ln, "non-finite coordinate".into()));
                }
                points.push(p);
                if let Some(li) = li {
                    let l = SourceLabel::from_index(vals[li] as i64)
                        .ok_or_else(|| perr(ln, "label out of range".into()))?;
                    labels.push(l);
                } else {
                    labels.push(default_label);
                }
                if has_colors {
                    let c = |i: usize| -> Result<u8> {
                        let v = vals[i];
                        if (0.0..=255.0).contains(&v) {
                            Ok(v as u8)
                        } else {
                            Err(perr(ln, "color out of range".into()))
                        }
                    };
                    colors.push([c(rgb.0.unwrap())?, c(rgb.1.unwrap())?, c(rgb.2.unwrap())?]);
                }
                for (pi, p) in el.props.iter().enumerate() {
                    if let Prop::Scalar { name, .. } = p {
                        if let Some(v) = extras.get_mut(name) {
                            v.push(vals[pi]);
                        }
                    }
                }
            }
        } else {
            let is_face = el.name == "face" && el.props.len() == 1 && matches!(el.props[0], Prop::List);
            for _ in 0..el.count {
                let Some((ln, line)) = lines.next() else {
                    return Err(perr(last_line + 1, format!("unexpected end of file in element `{}`", el.name)));
                };
                last_line = ln;
                if is_face {
                    let tok: Vec<usize> = line
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|_| perr(ln, format!("non-numeric token `{t}`"))))
                        .collect::<Result<_>>()?;
                    if tok.len() != 4 || tok[0] != 3 {
                        return Err(perr(ln, "only triangle faces are supported".into()));
                    }
                    faces.push([tok[1], tok[2], tok[3]]);
                }
            }
        }
    }
    if let Some((ln, line)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(perr(ln, format!("trailing data `{line}`")));
    }
    let cloud = PointCloud::new(points).map_err(|e| perr(last_line, e.to_string()))?;
    if faces.iter().flatten().any(|&i| i >= cloud.len()) {
        return Err(perr(last_line, "face index out of range".into()));
    }
    let cloud = LabeledCloud::new(cloud, labels)?;
    Ok(PlyData {
        cloud,
        has_labels,
        colors: has_colors.then_some(colors),
        extras,
        faces,
    })
}

/// Writes `x y z label` rows.
pub fn write_ply(cloud: &LabeledCloud, path: &Path) -> Result<()> {
    write_ply_full(cloud, None, &[], &[], path)
}

/// Writes a vertex cloud with optional colors, extra scalar properties
/// (written as `double`, or `int` when the name is `index`) and triangles.
pub fn write_ply_full(
    cloud: &LabeledCloud,
    colors: Option<&[[u8; 3]]>,
    extras: &[(&str, &[f64])],
    faces: &[[usize; 3]],
    path: &Path,
) -> Result<()> {
    let n = cloud.len();
    if colors.is_some_and(|c| c.len() != n) || extras.iter().any(|(_, v)| v.len() != n) {
        return Err(Error::invalid("per-vertex attribute length mismatch"));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = String::new();
    header.push_str("ply\nformat ascii 1.0\n");
    header.push_str(&format!("element vertex {n}\n"));
    header.push_str("property double x\nproperty double y\nproperty double z\nproperty uchar label\n");
    if colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    for (name, _) in extras {
        let ty = if *name == "index" { "int" } else { "double" };
        header.push_str(&format!("property {ty} {name}\n"));
    }
    if !faces.is_empty() {
        header.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\n", faces.len()));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for (i, (p, l)) in cloud.cloud().points().iter().zip(cloud.labels()).enumerate() {
        let mut row = format!("{} {} {} {}", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.z), l.index());
        if let Some(c) = colors {
            row.push_str(&format!(" {} {} {}", c[i][0], c[i][1], c[i][2]));
        }
        for (name, v) in extras {
            if *name == "index" {
                row.push_str(&format!(" {}", v[i] as i64));
            } else {
                row.push(' ');
                row.push_str(&fmt_sig9(v[i]));
            }
        }
        row.push('\n');
        w.write_all(row.as_bytes()).map_err(io)?;
    }
    for f in faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io)?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_text(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const HEAD: &str = "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nproperty uchar label\nend_header\n";

    #[test]
    fn short_body_is_a_parse_error_at_eof() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..9).map(|i| format!("{i} 0 0 2\n")).collect();
        let p = write_text(&dir, "short.ply", &format!("{HEAD}{body}"));
        match read_ply(&p, SourceLabel::PreOpFace) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 18);
                assert!(msg.contains("end of file"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_three_is_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut body: String = (0..9).map(|i| format!("{i} 0 0 1\n")).collect();
        body.push_str("9 0 0 3\n");
        let p = write_text(&dir, "lab.ply", &format!("{HEAD}{body}"));
        match read_ply(&p, SourceLabel::PreOpFace) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 18);
                assert_eq!(msg, "label out of range");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(&dir, "nn.ply", &format!("{HEAD}0 0 zero 1\n"));
        assert!(matches!(read_ply(&p, SourceLabel::PreOpFace), Err(Error::Parse { line: 9, .. })));
        let p = write_text(&dir, "hdr.ply", "ply\nformat ascii 1.0\nelement vertex\nend_header\n");
        assert!(matches!(read_ply(&p, SourceLabel::PreOpFace), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_label_uses_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            &dir,
            "nolabel.ply",
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n4 5 6\n",
        );
        let d = read_ply_full(&p, SourceLabel::PostOpBone).unwrap();
        assert!(!d.has_labels);
        assert_eq!(d.cloud.labels(), &[SourceLabel::PostOpBone; 2]);
    }

    #[test]
    fn extras_colors_and_faces_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::from_coords(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let lc = LabeledCloud::uniform(c, SourceLabel::PreOpFace);
        let p = dir.path().join("x.ply");
        let idx = [4.0, 7.0, 9.0];
        let dev = [0.5, -1.25, 3.0];
        write_ply_full(&lc, Some(&[[1, 2, 3], [4, 5, 6], [7, 8, 9]]), &[("index", &idx), ("dev", &dev)], &[[0, 1, 2]], &p).unwrap();
        let d = read_ply_full(&p, SourceLabel::PreOpBone).unwrap();
        assert_eq!(d.cloud, lc);
        assert_eq!(d.colors.unwrap()[1], [4, 5, 6]);
        assert_eq!(d.extras["index"], idx.to_vec());
        assert_eq!(d.extras["dev"], dev.to_vec());
        assert_eq!(d.faces, vec![[0, 1, 2]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_read_round_trip(
            pts in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0, 0usize..3), 1..40)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let cloud = PointCloud::new(pts.iter().map(|&(x, y, z, _)| Point3::new(x, y, z)).collect()).unwrap();
            let labels = pts.iter().map(|&(_, _, _, l)| SourceLabel::ALL[l]).collect();
            let lc = LabeledCloud::new(cloud, labels).unwrap();
            let p = dir.path().join("rt.ply");
            write_ply(&lc, &p).unwrap();
            let back = read_ply(&p, SourceLabel::PreOpFace).unwrap();
            prop_assert_eq!(back.labels(), lc.labels());
            for (a, b) in back.cloud().points().iter().zip(lc.cloud().points()) {
                prop_assert!((a - b).amax() <= 1e-6);
            }
        }
    }
}
