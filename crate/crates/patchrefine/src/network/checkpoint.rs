//! Checkpoint archive: one file holding the network config, a tensor
//! directory, and raw little-endian f32 weight payloads.
//!
//! Layout: 8-byte magic `PRNCKPT1`, a u64 little-endian JSON header length,
//! the JSON header (format version, config, tensor names + shapes, training
//! metadata), then each tensor's data in directory order. Loading rejects
//! any config or shape mismatch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{NetworkConfig, PatchRefineNet};
use crate::error::{Error, Result};
use crate::nn::ParamId;

const MAGIC: &[u8; 8] = b"PRNCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    training_epoch: usize,
    best_val_loss: f64,
}

/// Architecture config plus learned weights and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub weights: Vec<(String, ArrayD<f32>)>,
    pub training_epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    pub fn from_network(
        net: &PatchRefineNet<f32>,
        training_epoch: usize,
        best_val_loss: f64,
    ) -> Self {
        Self {
            config: net.config().clone(),
            weights: net
                .params()
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
            training_epoch,
            best_val_loss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: self
                .weights
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
            training_epoch: self.training_epoch,
            best_val_loss: self.best_val_loss,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, tensor) in &self.weights {
            for &v in tensor.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path).map_err(|e| {
            Error::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        input.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        input.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        header.config.validate()?;
        let mut weights = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            input.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))?;
            weights.push((entry.name.clone(), tensor));
        }
        Ok(Self {
            config: header.config,
            weights,
            training_epoch: header.training_epoch,
            best_val_loss: header.best_val_loss,
        })
    }
}

impl PatchRefineNet<f32> {
    /// Reconstructs a network from a checkpoint, rejecting any name or
    /// shape mismatch against the config-derived layout.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = PatchRefineNet::<f32>::new(ckpt.config.clone())?;
        if ckpt.weights.len() != net.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config expects {}",
                ckpt.weights.len(),
                net.params().len()
            )));
        }
        for (idx, (name, tensor)) in ckpt.weights.iter().enumerate() {
            let id = ParamId(idx);
            if net.params().name(id) != name {
                return Err(Error::Format(format!(
                    "checkpoint tensor {idx} is {name:?}, config expects {:?}",
                    net.params().name(id)
                )));
            }
            if net.params().value(id).shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?} vs config shape {:?}",
                    tensor.shape(),
                    net.params().value(id).shape()
                )));
            }
            *net.params_mut().value_mut(id) = tensor.clone();
        }
        Ok(net)
    }

    pub fn to_checkpoint(&self, training_epoch: usize, best_val_loss: f64) -> Checkpoint {
        Checkpoint::from_network(self, training_epoch, best_val_loss)
    }
}
