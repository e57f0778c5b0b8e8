//! Scene directories.
//!
//! ```text
//! scene.json      index: size, intrinsics, objects (label + mask file)
//! pointmap.blob   f32 [H, W, 3]
//! validity.blob   u8  [H, W]
//! mask_NNN.blob   u8  [H, W], one per object
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vqa::Scene;
use super::{Intrinsics, Mask, PointMap, SceneError, SceneObject};
use crate::blob::{BlobError, Tensor, TensorData};

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const SCENE_INDEX: &str = "scene.json";
pub const POINTMAP_FILE: &str = "pointmap.blob";
pub const VALIDITY_FILE: &str = "validity.blob";

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Blob { path: PathBuf, source: BlobError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unsupported scene format version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {source}")]
    Scene { path: PathBuf, source: SceneError },
}

impl SceneIoError {
    /// True when the failure is in the scene content rather than the files.
    pub fn is_domain(&self) -> bool {
        matches!(self, SceneIoError::Scene { source: SceneError::NoObjects, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub label: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIndex {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub objects: Vec<ObjectEntry>,
}

fn read_blob(path: &Path) -> Result<Tensor, SceneIoError> {
    Tensor::read_file(path).map_err(|source| SceneIoError::Blob {
        path: path.to_path_buf(),
        source,
    })
}

fn blob_err(path: &Path, source: BlobError) -> SceneIoError {
    SceneIoError::Blob {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_scene(dir: &Path) -> Result<Scene, SceneIoError> {
    let index_path = dir.join(SCENE_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|source| SceneIoError::Io {
        path: index_path.clone(),
        source,
    })?;
    let index: SceneIndex = serde_json::from_str(&text).map_err(|source| SceneIoError::Json {
        path: index_path.clone(),
        source,
    })?;
    if index.format_version != SCENE_FORMAT_VERSION {
        return Err(SceneIoError::Version {
            path: index_path,
            version: index.format_version,
        });
    }
    let (w, h) = (index.width, index.height);

    let pm_path = dir.join(POINTMAP_FILE);
    let pm = read_blob(&pm_path)?;
    pm.expect_dims(&[h, w, 3]).map_err(|e| blob_err(&pm_path, e))?;
    let points = pm
        .as_f32()
        .map_err(|e| blob_err(&pm_path, e))?
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();

    let val_path = dir.join(VALIDITY_FILE);
    let val = read_blob(&val_path)?;
    val.expect_dims(&[h, w]).map_err(|e| blob_err(&val_path, e))?;
    let valid = val.as_u8().map_err(|e| blob_err(&val_path, e))?.iter().map(|b| *b != 0).collect();

    let point_map = PointMap::new(w, h, points, valid).map_err(|source| SceneIoError::Scene {
        path: pm_path.clone(),
        source,
    })?;

    let mut objects = Vec::with_capacity(index.objects.len());
    for entry in &index.objects {
        let path = dir.join(&entry.mask);
        let t = read_blob(&path)?;
        t.expect_dims(&[h, w]).map_err(|e| blob_err(&path, e))?;
        let bits = t.as_u8().map_err(|e| blob_err(&path, e))?.iter().map(|b| *b != 0).collect();
        let mask = Mask::new(w, h, bits).map_err(|source| SceneIoError::Scene {
            path: path.clone(),
            source,
        })?;
        // Objects whose mask covers no valid point cannot be asked about.
        match SceneObject::from_mask(entry.label.clone(), mask, &point_map) {
            Ok(o) => objects.push(o),
            Err(SceneError::EmptyMask) => {}
            Err(source) => return Err(SceneIoError::Scene { path, source }),
        }
    }
    Ok(Scene {
        point_map,
        intrinsics: index.intrinsics,
        objects,
    })
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<(), SceneIoError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SceneIoError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let pm = &scene.point_map;
    let (w, h) = (pm.width, pm.height);
    let write = |name: &str, t: Tensor| -> Result<(), SceneIoError> {
        let p = dir.join(name);
        fs::write(&p, t.to_bytes()).map_err(io(&p))
    };
    let pts: Vec<f32> = pm.points.iter().flat_map(|p| p.map(|c| c as f32)).collect();
    write(POINTMAP_FILE, Tensor::new(vec![h, w, 3], TensorData::F32(pts)).expect("sizes agree"))?;
    let valid = pm.valid.iter().map(|b| *b as u8).collect();
    write(VALIDITY_FILE, Tensor::new(vec![h, w], TensorData::U8(valid)).expect("sizes agree"))?;
    let mut entries = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let name = format!("mask_{i:03}.blob");
        let bits = o.mask.bits.iter().map(|b| *b as u8).collect();
        write(&name, Tensor::new(vec![h, w], TensorData::U8(bits)).expect("sizes agree"))?;
        entries.push(ObjectEntry {
            label: o.label.clone(),
            mask: name,
        });
    }
    let index = SceneIndex {
        format_version: SCENE_FORMAT_VERSION,
        width: w,
        height: h,
        intrinsics: scene.intrinsics,
        objects: entries,
    };
    let p = dir.join(SCENE_INDEX);
    fs::write(&p, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io(&p))
}
