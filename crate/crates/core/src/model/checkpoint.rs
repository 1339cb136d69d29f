//! Checkpoints: `<stem>.json` header plus `<stem>.bin` holding the flat
//! parameter vector as little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Classifier, InputNorm, Mode, ReferenceStGcn, StGcnConfig};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: StGcnConfig,
    pub topology: SkeletonTopology,
    pub input_norm: InputNorm,
    pub seed: u64,
    pub epoch: usize,
    pub mode: Mode,
    pub param_count: usize,
    pub param_sha256: String,
    /// Free-form role tag, e.g. `expert:joint` or `gate`.
    pub role: String,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn encode(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn save_checkpoint(
    stem: &Path,
    model: &ReferenceStGcn,
    role: &str,
    seed: u64,
    epoch: usize,
) -> Result<CheckpointHeader> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let blob = encode(model.params());
    let header = CheckpointHeader {
        architecture: model.config().clone(),
        topology: model.topology().clone(),
        input_norm: model.input_norm().clone(),
        seed,
        epoch,
        mode: model.mode(),
        param_count: model.param_count(),
        param_sha256: sha256_hex(&blob),
        role: role.to_string(),
    };
    let bin = with_ext(stem, "bin");
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let json = with_ext(stem, "json");
    fs::write(&json, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(header)
}

pub fn load_checkpoint(stem: &Path) -> Result<(ReferenceStGcn, CheckpointHeader)> {
    let json = with_ext(stem, "json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&json, e.to_string()))?;
    let bin = with_ext(stem, "bin");
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() != 8 * header.param_count {
        return Err(Error::malformed(&bin, format!("expected {} parameters", header.param_count)));
    }
    if sha256_hex(&blob) != header.param_sha256 {
        return Err(Error::malformed(&bin, "parameter hash mismatch"));
    }
    let params = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut model = ReferenceStGcn::zeroed(header.architecture.clone(), header.topology.clone())?;
    model.set_params(params)?;
    model.set_input_norm(header.input_norm.clone())?;
    model.set_mode(header.mode);
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = StGcnConfig {
            frames: 4,
            joints: 3,
            in_channels: 3,
            widths: vec![4],
            temporal_kernel: 3,
            outputs: 2,
        };
        let mut m = ReferenceStGcn::new(cfg, SkeletonTopology::tree(3), 3).unwrap();
        m.set_mode(Mode::Eval);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck/net");
        let h = save_checkpoint(&stem, &m, "expert:joint", 3, 7).unwrap();
        let (back, h2) = load_checkpoint(&stem).unwrap();
        assert_eq!(h, h2);
        assert_eq!(back.params(), m.params());
        assert_eq!(back.mode(), Mode::Eval);

        let bin = with_ext(&stem, "bin");
        let mut blob = fs::read(&bin).unwrap();
        blob[0] ^= 1;
        fs::write(&bin, blob).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::Malformed { .. })));
    }
}
