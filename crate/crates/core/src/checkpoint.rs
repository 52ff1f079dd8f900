//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header
//! (config snapshot, stage/epoch markers, RNG state, named group shapes),
//! then all group payloads as little-endian f64. Groups carry the current
//! parameters (`param.*`), optimizer momentum (`momentum.*`) and, when
//! validation has run, the best-by-validation parameters (`best.*`).
//! Serialization is deterministic, so save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::RngState;
use crate::train::TrainConfig;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RPFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    /// 1 = region stage, 2 = joint stage; counts stages that have *started*.
    pub stage: u32,
    pub epoch_in_stage: usize,
    pub step_in_epoch: usize,
    pub global_step: usize,
    pub best_val_map: Option<f64>,
    pub rng: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    groups: Vec<GroupMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// All groups under `prefix.`, with the prefix stripped.
    pub fn groups_with_prefix(&self, prefix: &str) -> Vec<(&str, &ArrayD<f64>)> {
        let full = format!("{prefix}.");
        self.groups
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(&full).map(|rest| (rest, a)))
            .collect()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let full = format!("{prefix}.");
        self.groups.iter().any(|(n, _)| n.starts_with(&full))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            groups: self
                .groups
                .iter()
                .map(|(name, a)| GroupMeta {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io_err = |e| Error::io(path, e);
        file.write_all(MAGIC).map_err(io_err)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(&header_json).map_err(io_err)?;
        let mut payload = Vec::new();
        for (_, array) in &self.groups {
            for v in array.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let io_err = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {version}"
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header_json).map_err(|e| Error::Data(format!(
            "corrupt checkpoint header: {e}"
        )))?;
        let mut groups = Vec::with_capacity(header.groups.len());
        for gm in header.groups {
            let len: usize = gm.shape.iter().product();
            let mut bytes = vec![0u8; len * 8];
            file.read_exact(&mut bytes).map_err(io_err)?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&gm.shape), values)
                .map_err(|e| Error::Data(format!("group {}: {e}", gm.name)))?;
            groups.push((gm.name, array));
        }
        Ok(Checkpoint {
            meta: header.meta,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::ArrayD;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = rng_from_seed(5);
        let a: ndarray::Array2<f64> = crate::nn::init::normal(&mut rng, (3, 4), 1.0);
        let b: ndarray::Array1<f64> = crate::nn::init::normal(&mut rng, 7, 1.0);
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                train_config: TrainConfig::default(),
                model_config: ModelConfig::tiny(4),
                stage: 2,
                epoch_in_stage: 1,
                step_in_epoch: 42,
                global_step: 640,
                best_val_map: Some(0.91),
                rng: RngState::capture(&rng),
            },
            groups: vec![
                ("param.attr_table".into(), a.into_dyn()),
                ("momentum.attr_table".into(), b.into_dyn()),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rpf");
        let p2 = dir.path().join("b.rpf");
        let ckpt = sample_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn roundtrip_preserves_values_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rpf");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta.stage, 2);
        assert_eq!(loaded.meta.best_val_map, Some(0.91));
        for ((n1, a1), (n2, a2)) in ckpt.groups.iter().zip(&loaded.groups) {
            assert_eq!(n1, n2);
            assert_eq!(a1.shape(), a2.shape());
            for (x, y) in a1.iter().zip(a2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rpf");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn prefix_access() {
        let ckpt = sample_checkpoint();
        assert!(ckpt.has_prefix("param"));
        assert!(!ckpt.has_prefix("best"));
        let groups = ckpt.groups_with_prefix("param");
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].0, "attr_table");
        let arr: &ArrayD<f64> = ckpt.group("param.attr_table").unwrap();
        assert_eq!(arr.shape(), &[3, 4]);
    }
}
