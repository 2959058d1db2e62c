//! Binary checkpoints: magic, little-endian `u32` header length, a JSON
//! header, then every network's parameters as little-endian `f64` in header
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseNet, NnError};

const MAGIC: &[u8; 8] = b"QSFTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetHeader {
    pub name: String,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub nets: Vec<NetHeader>,
    pub seed: u64,
    pub step: u64,
    /// Free-form run description (algorithm, config, features, env).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub nets: Vec<DenseNet>,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Option<&DenseNet> {
        self.header.nets.iter().position(|h| h.name == name).map(|i| &self.nets[i])
    }
}

pub fn save_checkpoint(
    path: &Path,
    nets: &[(&str, &DenseNet)],
    seed: u64,
    step: u64,
    meta: serde_json::Value,
) -> Result<(), NnError> {
    let header = CheckpointHeader {
        version: VERSION,
        nets: nets.iter().map(|(name, n)| NetHeader { name: name.to_string(), sizes: n.sizes().to_vec() }).collect(),
        seed,
        step,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| NnError::Checkpoint("header too large".into()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for (_, net) in nets {
        for p in net.params() {
            out.write_all(&p.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| NnError::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| NnError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != VERSION {
        return Err(NnError::Checkpoint(format!("version {}", header.version)));
    }
    let mut nets = Vec::with_capacity(header.nets.len());
    let mut buf = [0u8; 8];
    for h in &header.nets {
        let count = DenseNet::zeros(&h.sizes)?.num_params();
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf).map_err(|_| NnError::Checkpoint(format!("truncated parameters of {}", h.name)))?;
            params.push(f64::from_le_bytes(buf));
        }
        nets.push(DenseNet::from_params(&h.sizes, params)?);
    }
    if input.read(&mut buf)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { header, nets })
}
