use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{config::parse_key_values, read_ply, read_to_string};
use crate::error::{Error, Result};
use crate::geometry::SourceLabel;

/// Paths and landmark indices of one case. Paths are stored relative to
/// the manifest's directory and resolved on access.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseManifest {
    pub case_id: String,
    pub dir: PathBuf,
    pub bone_pre: PathBuf,
    pub bone_post: PathBuf,
    pub face_pre: PathBuf,
    pub face_post: Option<PathBuf>,
    pub face_mesh: Option<PathBuf>,
    pub landmarks: Vec<usize>,
    /// Free-form extra keys (plan description, registration record, ...).
    pub extra: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl CaseManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Loads `path` (a manifest file or a case directory containing one),
    /// checks that referenced files exist and that landmarks index the face.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = read_to_string(&file)?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: file.clone(),
            line,
            msg,
        };
        let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (line, k, v) in parse_key_values(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => perr(line, msg),
            other => other,
        })? {
            fields.insert(k, (line, v));
        }
        let mut take = |key: &str| fields.remove(key);
        let required = |v: Option<(usize, String)>, key: &str| {
            v.map(|(_, s)| s)
                .ok_or_else(|| perr(0, format!("missing required key `{key}`")))
        };
        let case_id = required(take("case_id"), "case_id")?;
        let bone_pre = PathBuf::from(required(take("bone_pre"), "bone_pre")?);
        let bone_post = PathBuf::from(required(take("bone_post"), "bone_post")?);
        let face_pre = PathBuf::from(required(take("face_pre"), "face_pre")?);
        let face_post = take("face_post").map(|(_, s)| PathBuf::from(s));
        let face_mesh = take("face_mesh").map(|(_, s)| PathBuf::from(s));
        let landmarks = match take("landmarks") {
            Some((line, s)) if !s.is_empty() => s
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| perr(line, format!("bad landmark index `{t}`"))))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let extra = fields.into_iter().map(|(k, (_, v))| (k, v)).collect();
        let m = Self {
            case_id,
            dir,
            bone_pre,
            bone_post,
            face_pre,
            face_post,
            face_mesh,
            landmarks,
            extra,
        };
        for p in [Some(&m.bone_pre), Some(&m.bone_post), Some(&m.face_pre), m.face_post.as_ref(), m.face_mesh.as_ref()]
            .into_iter()
            .flatten()
        {
            let full = m.resolve(p);
            if !full.exists() {
                return Err(Error::io(full, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        let face = read_ply(&m.resolve(&m.face_pre), SourceLabel::PreOpFace)?;
        if let Some(&bad) = m.landmarks.iter().find(|&&i| i >= face.len()) {
            return Err(Error::invalid(format!(
                "landmark index {bad} out of range for {} face points",
                face.len()
            )));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("case_id = {}\n", self.case_id));
        s.push_str(&format!("bone_pre = {}\n", self.bone_pre.display()));
        s.push_str(&format!("bone_post = {}\n", self.bone_post.display()));
        s.push_str(&format!("face_pre = {}\n", self.face_pre.display()));
        if let Some(p) = &self.face_post {
            s.push_str(&format!("face_post = {}\n", p.display()));
        }
        if let Some(p) = &self.face_mesh {
            s.push_str(&format!("face_mesh = {}\n", p.display()));
        }
        let lm: Vec<String> = self.landmarks.iter().map(|i| i.to_string()).collect();
        s.push_str(&format!("landmarks = {}\n", lm.join(",")));
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Writes `manifest.txt` into `self.dir`.
    pub fn save(&self) -> Result<PathBuf> {
        let p = self.dir.join(MANIFEST_FILE);
        std::fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
