//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `ATTNCKPT`, a little-endian `u64` header
//! length, a JSON header, then every tensor's entries as little-endian
//! `f64` in header order. Optimizer moments are stored as ordinary tensors
//! named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use attnalign_core::corpus::Vocab;
use attnalign_core::model::{ModelConfig, ModelParams};
use attnalign_core::train::{AdamState, TrainConfig};
use attnalign_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, PathContext, Result};

pub const MAGIC: &[u8; 8] = b"ATTNCKPT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where training stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub epochs: usize,
    pub sentences_seen: u64,
    pub optimizer_step: u64,
    pub dev_token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub tool_version: String,
    pub model: ModelConfig,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub training: Option<TrainingState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let mut tensors: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
        if let Some(opt) = &self.optimizer {
            for ((n, _), m) in named.iter().zip(&opt.m) {
                tensors.push((format!("{ADAM_M}{n}"), m));
            }
            for ((n, _), v) in named.iter().zip(&opt.v) {
                tensors.push((format!("{ADAM_V}{n}"), v));
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            tool_version: crate::VERSION.to_string(),
            model: self.params.config.clone(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            training: self.training.clone(),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let header = read_header(bytes)?;
        let mut offset = 16 + header_len(bytes)?;
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| CliError::data(format!("checkpoint truncated inside tensor {}", entry.name)))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(CliError::data(format!("checkpoint has {} trailing bytes", bytes.len() - offset)));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                v.insert(p.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let params = ModelParams::from_named(header.model.clone(), params)?;
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            let take = |map: &mut BTreeMap<String, Tensor>, kind: &str| -> Result<Vec<Tensor>> {
                order
                    .iter()
                    .map(|n| map.remove(n).ok_or_else(|| CliError::data(format!("checkpoint lacks {kind}{n}"))))
                    .collect()
            };
            let step = header.training.as_ref().map_or(0, |t| t.optimizer_step);
            Some(AdamState { step, m: take(&mut m, ADAM_M)?, v: take(&mut v, ADAM_V)? })
        };
        Ok(Checkpoint {
            params,
            optimizer,
            source_vocab: header.source_vocab,
            target_vocab: header.target_vocab,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)?;
        f.sync_all().at(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path).at(path)?).map_err(|e| CliError { message: format!("{}: {}", path.display(), e.message), ..e })
    }
}

fn header_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CliError::data("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + len {
        return Err(CliError::data("checkpoint truncated inside header"));
    }
    Ok(len)
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    let len = header_len(bytes)?;
    let header: Header =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| CliError::data(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::data(format!("unsupported checkpoint format {}", header.format_version)));
    }
    Ok(header)
}

/// Reads only the header, for validating flags before any compute.
pub fn peek_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut f = fs::File::open(path).at(path)?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix).map_err(|_| CliError::data(format!("{}: not a checkpoint", path.display())))?;
    if &prefix[..8] != MAGIC {
        return Err(CliError::data(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let len = u64::from_le_bytes(prefix[8..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|_| CliError::data(format!("{}: checkpoint truncated inside header", path.display())))?;
    read_header(&[&prefix[..], &json[..]].concat())
}
