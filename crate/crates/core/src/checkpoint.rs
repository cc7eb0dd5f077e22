//! Versioned binary checkpoint.
//!
//! Layout: `RDCFACKP` magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order. Byte
//! output depends only on the contents, so equal models hash equal.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::descriptor::PatchDescriptor;
use crate::discriminator::{ClassMeans, Discriminator};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::model::RdCfaModel;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RDCFACKP";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_NAMES: [&str; 8] = [
    "descriptor.weight",
    "descriptor.bias",
    "discriminator.mu_weight",
    "discriminator.mu_bias",
    "discriminator.log_var_weight",
    "discriminator.log_var_bias",
    "class_means",
    "bank.entries",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneInfo {
    pub name: String,
    pub weights_digest: String,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: RdCfaModel,
    pub bank: MemoryBank,
    pub class_names: Vec<String>,
    pub train_config: TrainConfig,
    pub backbone: BackboneInfo,
    /// Resolved flat configuration the run used.
    pub config: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    class_names: Vec<String>,
    train_config: TrainConfig,
    backbone: BackboneInfo,
    config: BTreeMap<String, String>,
    bank_augmented: bool,
    bank_epoch_stamp: u64,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.descriptor.config() != &self.train_config.descriptor {
            return Err(Error::shape("descriptor parameters disagree with the stored config"));
        }
        if self.class_names.len() != self.model.num_classes() {
            return Err(Error::shape(format!(
                "{} class names for {} class means",
                self.class_names.len(),
                self.model.num_classes()
            )));
        }
        if self.bank.augmented() != self.train_config.flags.augment_bank {
            return Err(Error::shape("bank augmentation flag disagrees with the stored config"));
        }
        let expected = self.model.query_width(self.bank.augmented());
        if self.bank.width() != expected {
            return Err(Error::shape(format!(
                "bank entry width {} but the model produces width {expected}",
                self.bank.width()
            )));
        }
        Ok(())
    }

    fn tensors(&self) -> [(Vec<usize>, &[f64]); 8] {
        fn m2(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
            (vec![a.nrows(), a.ncols()], a.as_slice().expect("contiguous"))
        }
        fn m1(a: &Array1<f64>) -> (Vec<usize>, &[f64]) {
            (vec![a.len()], a.as_slice().expect("contiguous"))
        }
        let d = &self.model.discriminator;
        let entries = self.bank.entries();
        [
            m2(&self.model.descriptor.weight),
            m1(&self.model.descriptor.bias),
            m2(&d.mu_weight),
            m1(&d.mu_bias),
            m2(&d.log_var_weight),
            m1(&d.log_var_bias),
            m2(&self.model.class_means.means),
            (
                vec![entries.nrows(), entries.ncols()],
                entries.to_slice().expect("standard layout"),
            ),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tensors = self.tensors();
        let header = Header {
            class_names: self.class_names.clone(),
            train_config: self.train_config.clone(),
            backbone: self.backbone.clone(),
            config: self.config.clone(),
            bank_augmented: self.bank.augmented(),
            bank_epoch_stamp: self.bank.epoch_stamp(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(&tensors)
                .map(|(name, (shape, _))| TensorEntry {
                    name: name.to_string(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + tensors.iter().map(|t| 8 * t.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &tensors {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])?;

        let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(bad(format!("unexpected tensor list {names:?}")));
        }
        let mut offset = body_start;
        let mut data = Vec::with_capacity(TENSOR_NAMES.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let end = offset
                .checked_add(n * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("truncated tensor `{}`", t.name)))?;
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data.push((t.shape.clone(), values));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }

        let mut it = data.into_iter();
        let mut take = || it.next().expect("eight tensors");
        let dw = matrix(take())?;
        let db = vector(take())?;
        let mw = matrix(take())?;
        let mb = vector(take())?;
        let lw = matrix(take())?;
        let lb = vector(take())?;
        let means = matrix(take())?;
        let entries = matrix(take())?;

        let descriptor = PatchDescriptor::from_parts(header.train_config.descriptor, dw, db)?;
        if mw.dim() != lw.dim() || mb.len() != mw.nrows() || lb.len() != lw.nrows() {
            return Err(Error::shape("discriminator head shapes disagree"));
        }
        let model = RdCfaModel {
            descriptor,
            discriminator: Discriminator {
                mu_weight: mw,
                mu_bias: mb,
                log_var_weight: lw,
                log_var_bias: lb,
            },
            class_means: ClassMeans::new(means)?,
        };
        let ckpt = Self {
            model,
            bank: MemoryBank::from_entries(entries, header.bank_augmented, header.bank_epoch_stamp)?,
            class_names: header.class_names,
            train_config: header.train_config,
            backbone: header.backbone,
            config: header.config,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// SHA-256 of the serialized bytes.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn matrix((shape, v): (Vec<usize>, Vec<f64>)) -> Result<Array2<f64>> {
    match shape.as_slice() {
        &[r, c] => Array2::from_shape_vec((r, c), v).map_err(|e| bad(e.to_string())),
        _ => Err(bad(format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn vector((shape, v): (Vec<usize>, Vec<f64>)) -> Result<Array1<f64>> {
    match shape.as_slice() {
        &[_] => Ok(Array1::from(v)),
        _ => Err(bad(format!("expected a vector, got shape {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorConfig;
    use crate::losses::CfaConfig;
    use crate::objective::AblationFlags;

    fn sample_checkpoint() -> Checkpoint {
        let descriptor = DescriptorConfig {
            input_dim: 3,
            output_dim: 4,
            use_coordinate_channels: true,
        };
        let model = RdCfaModel::new(descriptor, 2, 2, 10.0, 1).unwrap();
        let bank = MemoryBank::from_entries(Array2::from_elem((6, 8), 0.25), true, 2).unwrap();
        Checkpoint {
            model,
            bank,
            class_names: vec!["a".into(), "b".into()],
            train_config: TrainConfig {
                epochs: 2,
                batch_size: 2,
                learning_rate: 1e-3,
                weight_decay: 5e-4,
                seed: 0,
                flags: AblationFlags::ALL,
                cfa: CfaConfig::with_defaults(4),
                descriptor,
                latent_dim: 2,
                val_fraction: 0.0,
            },
            backbone: BackboneInfo {
                name: "tiny".into(),
                weights_digest: "abc".into(),
                feature_dim: 3,
            },
            config: BTreeMap::from([("cfa.rho".to_string(), "10".to_string())]),
        }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn bank_width_mismatch_is_a_shape_error() {
        let mut ck = sample_checkpoint();
        ck.bank = MemoryBank::from_entries(Array2::zeros((6, 5)), true, 0).unwrap();
        assert!(matches!(ck.to_bytes(), Err(Error::Shape(_))));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"hello world, not a file"), Err(Error::Checkpoint(_))));
    }
}
