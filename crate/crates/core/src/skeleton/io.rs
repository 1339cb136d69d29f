//! Array-container dataset format.
//!
//! A dataset directory holds `manifest.json` plus one `.skt` tensor file per
//! sample. A tensor file is the 4-byte magic `SKT1`, then `T`, `V`, `C` as
//! little-endian `u32`, then `T * V * C` little-endian `f32` values in
//! row-major `(T, V, C)` order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{generate_synthetic_dataset, SyntheticSpec};
use super::{SkeletonSequence, Tensor3};
use crate::error::{Error, Result};
use crate::par;

const MAGIC: &[u8; 4] = b"SKT1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: usize,
    pub subject_id: u32,
    pub camera_id: u32,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub joint_count: usize,
    pub samples: Vec<ManifestEntry>,
}

/// A labelled collection of sequences sharing one class count and joint count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub class_count: usize,
    pub joint_count: usize,
    pub samples: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `manifest.json` + per-sample tensor files.
    ArrayContainer,
    /// A JSON file `{ "spec": SyntheticSpec, "seed": u64 }`.
    SyntheticManifest,
}

#[derive(Deserialize)]
struct SyntheticManifestFile {
    spec: SyntheticSpec,
    seed: u64,
}

fn write_tensor(path: &Path, tensor: &Tensor3) -> Result<()> {
    let (t, v, c) = tensor.shape();
    let mut buf = Vec::with_capacity(16 + 4 * tensor.as_slice().len());
    buf.extend_from_slice(MAGIC);
    for d in [t, v, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in tensor.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::malformed(path, "missing SKT1 header"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (t, v, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * t * v * c {
        return Err(Error::malformed(
            path,
            format!("header declares ({t}, {v}, {c}) but body has {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor3::new(t, v, c, data)
}

/// Write `dataset` as an array container under `dir` (created if needed).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let entries = par::try_map_slice(&dataset.samples, |s| {
        let file = format!("samples/{}.skt", s.sample_id);
        write_tensor(&dir.join(&file), &s.frames)?;
        Ok::<_, Error>(ManifestEntry {
            sample_id: s.sample_id.clone(),
            label: s.label,
            subject_id: s.subject_id,
            camera_id: s.camera_id,
            file,
        })
    })?;
    let manifest = DatasetManifest {
        class_count: dataset.class_count,
        joint_count: dataset.joint_count,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Load a dataset; samples come back sorted by `sample_id`.
///
/// For [`DatasetFormat::ArrayContainer`] `path` may be the dataset directory or
/// its manifest file.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::ArrayContainer => load_array_container(path),
        DatasetFormat::SyntheticManifest => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: SyntheticManifestFile =
                serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
            generate_synthetic_dataset(&file.spec, file.seed)
        }
    }
}

fn load_array_container(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;

    let mut samples = par::try_map_slice(&manifest.samples, |entry| {
        let file = root.join(&entry.file);
        let frames = read_tensor(&file)?;
        if frames.joints() != manifest.joint_count {
            return Err(Error::Dimension(format!(
                "{}: manifest declares V={}, file has V={}",
                entry.sample_id,
                manifest.joint_count,
                frames.joints()
            )));
        }
        let seq = SkeletonSequence {
            sample_id: entry.sample_id.clone(),
            frames,
            label: entry.label,
            subject_id: entry.subject_id,
            camera_id: entry.camera_id,
        };
        seq.validate(manifest.class_count)?;
        Ok(seq)
    })?;
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(Dataset {
        class_count: manifest.class_count,
        joint_count: manifest.joint_count,
        samples,
    })
}
