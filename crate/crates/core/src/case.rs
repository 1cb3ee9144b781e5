//! The paired pre/post-operative record consumed by training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{LabeledCloud, PointCloud, SourceLabel, TriMesh};
use crate::io::{read_obj, read_ply, write_obj, write_ply, CaseManifest};

/// Pre-op bone `B`, planned/post-op bone `B′`, pre-op face `F` and, when
/// known, the post-op face `F′`. Bone and face clouds correspond pointwise
/// with their post-operative counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgicalCase {
    pub id: String,
    pub bone_pre: LabeledCloud,
    pub bone_post: LabeledCloud,
    pub face_pre: LabeledCloud,
    pub face_post: Option<PointCloud>,
    pub face_mesh: Option<TriMesh>,
    pub landmarks: Vec<usize>,
}

impl SurgicalCase {
    pub fn new(
        id: impl Into<String>,
        bone_pre: PointCloud,
        bone_post: PointCloud,
        face_pre: PointCloud,
        face_post: Option<PointCloud>,
    ) -> Result<Self> {
        if bone_pre.len() != bone_post.len() {
            return Err(Error::invalid(format!(
                "bone clouds differ in size ({} vs {})",
                bone_pre.len(),
                bone_post.len()
            )));
        }
        if let Some(fp) = &face_post {
            if fp.len() != face_pre.len() {
                return Err(Error::invalid("face clouds differ in size"));
            }
        }
        Ok(Self {
            id: id.into(),
            bone_pre: LabeledCloud::uniform(bone_pre, SourceLabel::PreOpBone),
            bone_post: LabeledCloud::uniform(bone_post, SourceLabel::PostOpBone),
            face_pre: LabeledCloud::uniform(face_pre, SourceLabel::PreOpFace),
            face_post,
            face_mesh: None,
            landmarks: Vec::new(),
        })
    }

    pub fn with_landmarks(mut self, landmarks: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = landmarks.iter().find(|&&i| i >= self.face_pre.len()) {
            return Err(Error::invalid(format!("landmark {bad} out of range")));
        }
        self.landmarks = landmarks;
        Ok(self)
    }

    pub fn with_mesh(mut self, mesh: TriMesh) -> Result<Self> {
        if mesh.vertices().len() != self.face_pre.len() {
            return Err(Error::invalid("face mesh vertex count differs from face cloud"));
        }
        self.face_mesh = Some(mesh);
        Ok(self)
    }

    pub fn n_bone(&self) -> usize {
        self.bone_pre.len()
    }

    pub fn n_face(&self) -> usize {
        self.face_pre.len()
    }
}

impl SurgicalCase {
    /// Reads a case from a manifest file or case directory.
    pub fn load(path: &Path) -> Result<Self> {
        let m = CaseManifest::load(path)?;
        Self::from_manifest(&m)
    }

    pub fn from_manifest(m: &CaseManifest) -> Result<Self> {
        let bone_pre = read_ply(&m.resolve(&m.bone_pre), SourceLabel::PreOpBone)?;
        let bone_post = read_ply(&m.resolve(&m.bone_post), SourceLabel::PostOpBone)?;
        let face_pre = read_ply(&m.resolve(&m.face_pre), SourceLabel::PreOpFace)?;
        let face_post = match &m.face_post {
            Some(p) => Some(read_ply(&m.resolve(p), SourceLabel::PreOpFace)?.into_parts().0),
            None => None,
        };
        let mut case = Self::new(
            m.case_id.clone(),
            bone_pre.into_parts().0,
            bone_post.into_parts().0,
            face_pre.into_parts().0,
            face_post,
        )?
        .with_landmarks(m.landmarks.clone())?;
        if let Some(p) = &m.face_mesh {
            case = case.with_mesh(read_obj(&m.resolve(p))?)?;
        }
        Ok(case)
    }

    /// Writes the standard case layout into `dir` and returns its manifest.
    pub fn save(&self, dir: &Path, extra: BTreeMap<String, String>) -> Result<CaseManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ply(&self.bone_pre, &dir.join("bone_pre.ply"))?;
        write_ply(&self.bone_post, &dir.join("bone_post.ply"))?;
        write_ply(&self.face_pre, &dir.join("face_pre.ply"))?;
        let face_post = match &self.face_post {
            Some(fp) => {
                write_ply(&LabeledCloud::uniform(fp.clone(), SourceLabel::PreOpFace), &dir.join("face_post.ply"))?;
                Some(PathBuf::from("face_post.ply"))
            }
            None => None,
        };
        let face_mesh = match &self.face_mesh {
            Some(mesh) => {
                write_obj(mesh, &dir.join("face_mesh.obj"))?;
                Some(PathBuf::from("face_mesh.obj"))
            }
            None => None,
        };
        let m = CaseManifest {
            case_id: self.id.clone(),
            dir: dir.to_path_buf(),
            bone_pre: "bone_pre.ply".into(),
            bone_post: "bone_post.ply".into(),
            face_pre: "face_pre.ply".into(),
            face_post,
            face_mesh,
            landmarks: self.landmarks.clone(),
            extra,
        };
        m.save()?;
        Ok(m)
    }
}
