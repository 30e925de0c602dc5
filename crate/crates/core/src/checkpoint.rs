//! On-disk checkpoints: a JSON manifest next to a blob of named tensor
//! records.
//!
//! Each blob record is a little-endian `u32` name length, the UTF-8 name,
//! then one tensor in the crate's binary tensor layout. The manifest lists
//! every record's name, offset and byte length, and the SHA-256 of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{Pooling, RnnClassifier};
use crate::embed::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::forest::RandomForest;
use crate::ingest::{ChannelConfig, FrameConfig, NormStats};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::seq2seq::{ModelDims, Seq2SeqModel};
use crate::tensor::Tensor;

type SlotVisitor<'a, S> = dyn FnMut(&str, &mut Tensor<S>) + 'a;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub scalar: String,
    pub channels: ChannelConfig,
    pub frame: FrameConfig,
    pub norm: Option<NormStats>,
    pub embedding: Option<EmbeddingConfig>,
    pub generator: Option<ModelDims>,
    pub classifier: Option<ClassifierSpec>,
    pub forest: Option<RandomForest>,
    pub config_hash: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to evaluate a trained pipeline on new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub channels: ChannelConfig,
    pub frame: FrameConfig,
    /// Fitted on the training split, indexed like `channels.full`.
    pub norm: Option<NormStats>,
    pub embedding: Option<EmbeddingConfig>,
    pub generator: Option<Seq2SeqModel<S>>,
    pub classifier: Option<RnnClassifier<S>>,
    pub forest: Option<RandomForest>,
    pub config_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON encoding of `cfg`.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(cfg)?)))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(channels: ChannelConfig, frame: FrameConfig) -> Self {
        Self {
            channels,
            frame,
            norm: None,
            embedding: None,
            generator: None,
            classifier: None,
            forest: None,
            config_hash: String::new(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(g) = &self.generator {
            out.extend(g.named().into_iter().map(|(n, t)| (format!("generator.{n}"), t)));
        }
        if let Some(c) = &self.classifier {
            out.extend(c.named().into_iter().map(|(n, t)| (format!("classifier.{n}"), t)));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            let offset = blob.len() as u64;
            blob.extend_from_slice(&(name.len() as u32).to_le_bytes());
            blob.extend_from_slice(name.as_bytes());
            blob.extend_from_slice(&t.to_bytes());
            tensors.push(TensorEntry { name, offset, bytes: blob.len() as u64 - offset });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            scalar: std::any::type_name::<S>().to_string(),
            channels: self.channels.clone(),
            frame: self.frame,
            norm: self.norm.clone(),
            embedding: self.embedding,
            generator: self.generator.as_ref().map(|g| g.dims()),
            classifier: self.classifier.as_ref().map(|c| ClassifierSpec {
                input_size: c.stack.input_size(),
                hidden: c.stack.hidden_size(),
                layers: c.stack.num_layers(),
                pooling: c.pooling,
            }),
            forest: self.forest.clone(),
            config_hash: self.config_hash.clone(),
            blob_sha256: hex(&Sha256::digest(&blob)),
            tensors,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let man_path = dir.join(MANIFEST_FILE);
        fs::write(&man_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))?;
        Ok(())
    }

    /// Loads and fully validates a checkpoint. Nothing is returned unless
    /// every tensor is present, intact and correctly shaped.
    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| integrity(format!("{}: {e}", man_path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(integrity(format!(
                "checkpoint format version {} but this build reads {FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        if manifest.scalar != std::any::type_name::<S>() {
            return Err(integrity(format!(
                "checkpoint holds {} tensors, requested {}",
                manifest.scalar,
                std::any::type_name::<S>()
            )));
        }
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut tensors = read_blob::<S>(&blob, &manifest)?;

        let mut take = |prefix: &str, model: &mut dyn FnMut(&mut SlotVisitor<S>)| -> Result<()> {
            let mut err = None;
            model(&mut |name, slot| {
                if err.is_some() {
                    return;
                }
                let key = format!("{prefix}.{name}");
                match tensors.remove(&key) {
                    Some(t) if t.shape() == slot.shape() => *slot = t,
                    Some(t) => {
                        err = Some(integrity(format!("{key} has shape {:?}, expected {:?}", t.shape(), slot.shape())))
                    }
                    None => err = Some(integrity(format!("tensor {key} missing from blob"))),
                }
            });
            err.map_or(Ok(()), Err)
        };
        let generator = match manifest.generator {
            Some(d) => {
                let mut g = Seq2SeqModel::zeros(d)?;
                take("generator", &mut |f| g.visit_mut(f))?;
                g.validate()?;
                Some(g)
            }
            None => None,
        };
        let classifier = match manifest.classifier {
            Some(c) => {
                let mut m = RnnClassifier::zeros(c.input_size, c.hidden, c.layers, c.pooling);
                take("classifier", &mut |f| m.visit_mut(f))?;
                m.stack.validate()?;
                Some(m)
            }
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(integrity(format!("unexpected tensor {extra} in blob")));
        }
        Ok(Self {
            channels: manifest.channels,
            frame: manifest.frame,
            norm: manifest.norm,
            embedding: manifest.embedding,
            generator,
            classifier,
            forest: manifest.forest,
            config_hash: manifest.config_hash,
        })
    }

    /// Fails unless the checkpoint was trained for exactly `requested`.
    pub fn ensure_channels(&self, requested: &ChannelConfig) -> Result<()> {
        if &self.channels != requested {
            return Err(Error::Config(format!(
                "checkpoint was trained on {:?} of {:?}, evaluation requested {:?} of {:?}",
                self.channels.selected, self.channels.full, requested.selected, requested.full
            )));
        }
        Ok(())
    }
}

fn read_blob<S: Scalar>(blob: &[u8], manifest: &Manifest) -> Result<BTreeMap<String, Tensor<S>>> {
    let expected: u64 = manifest.tensors.iter().map(|e| e.bytes).sum();
    if blob.len() as u64 != expected {
        return Err(integrity(format!(
            "tensor blob is {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    if hex(&Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(integrity("tensor blob checksum mismatch"));
    }
    let mut out = BTreeMap::new();
    let mut pos = 0u64;
    for e in &manifest.tensors {
        if e.offset != pos {
            return Err(integrity(format!("{} at offset {}, expected {pos}", e.name, e.offset)));
        }
        let rec = &blob[pos as usize..(pos + e.bytes) as usize];
        if rec.len() < 4 {
            return Err(integrity(format!("record {} truncated", e.name)));
        }
        let name_len = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")) as usize;
        let name = rec
            .get(4..4 + name_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| integrity(format!("record {} has a corrupt name", e.name)))?;
        if name != e.name {
            return Err(integrity(format!("name index says {}, blob says {name}", e.name)));
        }
        let (t, used) = Tensor::<S>::from_bytes(&rec[4 + name_len..])?;
        if 4 + name_len + used != rec.len() {
            return Err(integrity(format!("record {} has trailing bytes", e.name)));
        }
        if out.insert(e.name.clone(), t).is_some() {
            return Err(integrity(format!("duplicate tensor {}", e.name)));
        }
        pos += e.bytes;
    }
    Ok(out)
}
