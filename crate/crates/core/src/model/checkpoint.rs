//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DLRA"
//! version u32
//! hlen    u64            length of the JSON header in bytes
//! header  [u8; hlen]     UTF-8 JSON, see `Header`
//! payload [f64; n]       raw IEEE-754 bits, tensors in header order
//! ```
//!
//! Values travel as raw bits, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraAdapter, ModelConfig, ModelError, TranscriberModel};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DLRA";

/// One step of the RNG seed history that produced a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterEntry {
    target: String,
    rank: usize,
    alpha: f64,
    dropout: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    lineage: Vec<LineageEntry>,
    base: Vec<TensorEntry>,
    adapters: Vec<AdapterEntry>,
}

/// Model plus metadata read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TranscriberModel,
}

fn encode(model: &TranscriberModel) -> Result<Vec<u8>, ModelError> {
    let header = Header {
        config: model.config.clone(),
        lineage: model.lineage.clone(),
        base: model
            .base_parameters()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        adapters: model
            .adapters
            .iter()
            .map(|(n, a)| AdapterEntry {
                target: n.clone(),
                rank: a.rank,
                alpha: a.alpha,
                dropout: a.dropout,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |t: &Tensor| {
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    };
    for (_, t) in model.base_parameters() {
        push(t);
    }
    for (_, a) in &model.adapters {
        push(&a.a);
        push(&a.b);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor, ModelError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

fn decode(bytes: &[u8]) -> Result<TranscriberModel, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;

    // Weights are overwritten below; the seed only fixes the layout.
    let mut model = TranscriberModel::new(header.config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    if model.base.names.len() != header.base.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} base tensors, found {}",
            model.base.names.len(),
            header.base.len()
        )));
    }
    for (i, entry) in header.base.into_iter().enumerate() {
        if model.base.names[i] != entry.name || model.base.tensors[i].shape() != entry.shape.as_slice() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} ({:?}) does not match layout entry {} ({:?})",
                entry.name,
                entry.shape,
                model.base.names[i],
                model.base.tensors[i].shape()
            )));
        }
        model.base.tensors[i] = cur.tensor(entry.shape)?;
    }
    let mut adapters = Vec::with_capacity(header.adapters.len());
    for entry in header.adapters {
        let idx = model
            .base_index(&entry.target)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown adapter target {}", entry.target)))?;
        let shape = model.base.tensors[idx].shape().to_vec();
        let (d_out, d_in) = (shape[0], shape[1]);
        let a = cur.tensor(vec![entry.rank, d_in])?;
        let b = cur.tensor(vec![d_out, entry.rank])?;
        adapters.push((
            entry.target,
            LoraAdapter {
                a: a.with_grad(),
                b: b.with_grad(),
                rank: entry.rank,
                alpha: entry.alpha,
                dropout: entry.dropout,
            },
        ));
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes after payload".into()));
    }
    model.set_adapters(adapters)?;
    model.lineage = header.lineage;
    Ok(model)
}

pub fn save_checkpoint(model: &TranscriberModel, path: &Path) -> Result<(), ModelError> {
    let bytes = encode(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ModelError::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    Ok(Checkpoint {
        model: decode(&bytes)?,
    })
}

impl TranscriberModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        decode(bytes)
    }
}
