use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::archive::TensorArchive;
use crate::backbone::{tensor_manifest, BackboneSpec, ParamState, TensorRole};
use crate::error::{FcddError, Result};

/// Version of the checkpoint metadata layout inside the archive.
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "fcdd-checkpoint";

/// A trained (or freshly initialised) detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: BackboneSpec,
    pub params: ParamState,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    checkpoint_version: u32,
    spec: BackboneSpec,
    config: TrainConfig,
    epoch: usize,
    loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let meta = Meta {
            kind: KIND.into(),
            checkpoint_version: self.version,
            spec: self.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            loss_trace: self.loss_trace.clone(),
        };
        let metadata = serde_json::to_value(meta).map_err(|e| FcddError::CheckpointFormat(e.to_string()))?;
        let mut archive = TensorArchive::new(metadata);
        for (k, v) in self.params.learnable.iter().chain(&self.params.buffers) {
            archive.tensors.insert(k.clone(), v.clone());
        }
        Ok(archive)
    }

    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        let found = archive.metadata.get("checkpoint_version").and_then(|v| v.as_u64());
        if archive.metadata.get("kind").and_then(|v| v.as_str()) != Some(KIND) {
            return Err(FcddError::CheckpointFormat(
                "archive is not a detector checkpoint".into(),
            ));
        }
        match found {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(FcddError::VersionMismatch {
                    found: v as u32,
                    expected: CHECKPOINT_VERSION,
                })
            }
            None => return Err(FcddError::CheckpointFormat("missing checkpoint_version".into())),
        }
        let meta: Meta =
            serde_json::from_value(archive.metadata).map_err(|e| FcddError::CheckpointFormat(e.to_string()))?;
        meta.spec
            .validate()
            .map_err(|e| FcddError::CheckpointFormat(e.to_string()))?;
        let mut tensors = archive.tensors;
        let mut learnable = IndexMap::new();
        let mut buffers = IndexMap::new();
        for (name, _, role) in tensor_manifest(&meta.spec)? {
            let t = tensors
                .shift_remove(&name)
                .ok_or_else(|| FcddError::CheckpointFormat(format!("missing tensor `{name}`")))?;
            match role {
                TensorRole::Learnable => learnable.insert(name, t),
                TensorRole::Buffer => buffers.insert(name, t),
            };
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(FcddError::CheckpointFormat(format!("unexpected tensor `{extra}`")));
        }
        let params = ParamState { learnable, buffers };
        params
            .check(&meta.spec)
            .map_err(|e| FcddError::CheckpointFormat(e.to_string()))?;
        Ok(Self {
            version: meta.checkpoint_version,
            spec: meta.spec,
            params,
            config: meta.config,
            epoch: meta.epoch,
            loss_trace: meta.loss_trace,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    c.to_archive()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_archive(TensorArchive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;

    fn sample() -> Checkpoint {
        let (spec, params) = build_backbone("cnn27", 4).unwrap();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec,
            params,
            config: TrainConfig::default(),
            epoch: 2,
            loss_trace: vec![0.1 + 0.2, 1.0 / 3.0],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn truncated_and_old_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        let bytes = c.to_archive().unwrap().to_bytes().unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FcddError::CheckpointFormat(_))));

        let mut old = c.to_archive().unwrap();
        old.metadata["checkpoint_version"] = 0.into();
        assert!(matches!(
            Checkpoint::from_archive(old),
            Err(FcddError::VersionMismatch { found: 0, .. })
        ));
    }
}
