//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header
//! (config, entry names, shapes, offsets, optimizer and loop state), then
//! the raw little-endian f64 values of every entry in header order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LDHNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Parameter,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset in f64 values from the start of the data section.
    pub offset: usize,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    epoch: usize,
    best_val_auc: Option<f64>,
    rng: Option<RngState>,
    optimizer: Option<OptimizerHeader>,
    entries: Vec<Entry>,
}

/// Model plus optional training-loop state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_auc: Option<f64>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, kind, shape: Vec<usize>, values: &[f64]| {
            entries.push(Entry {
                name: name.to_string(),
                kind,
                shape,
                offset: data.len(),
            });
            data.extend_from_slice(values);
        };
        for (name, t) in self.model.parameters() {
            push(name, EntryKind::Parameter, t.shape().to_vec(), t.values());
        }
        for (name, b) in self.model.buffers() {
            push(name, EntryKind::Buffer, vec![b.len()], b);
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in &opt.moments {
                push(name, EntryKind::AdamM, vec![m.m.len()], &m.m);
                push(name, EntryKind::AdamV, vec![m.v.len()], &m.v);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.model.config().clone(),
            epoch: self.epoch,
            best_val_auc: self.best_val_auc,
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                t: o.t,
            }),
            entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
        let version: serde_json::Value = serde_json::from_slice(json)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            other => return Err(bad(format!("unsupported format version {other:?}, expected {FORMAT_VERSION}"))),
        }
        let header: Header = serde_json::from_slice(json)?;
        let raw = &bytes[16 + len..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values".into()));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = build_model(&header.model_config, 0)?;
        let mut params: IndexMap<String, Tensor> = IndexMap::new();
        let mut buffers: IndexMap<String, Vec<f64>> = IndexMap::new();
        let mut m_state: IndexMap<String, Vec<f64>> = IndexMap::new();
        let mut v_state: IndexMap<String, Vec<f64>> = IndexMap::new();
        let mut expected_offset = 0;
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > data.len() {
                return Err(bad(format!("entry {} has inconsistent offset", e.name)));
            }
            expected_offset += n;
            let values = data[e.offset..e.offset + n].to_vec();
            let dup = match e.kind {
                EntryKind::Parameter => params
                    .insert(e.name.clone(), Tensor::parameter(e.shape.clone(), values)?)
                    .is_some(),
                EntryKind::Buffer => buffers.insert(e.name.clone(), values).is_some(),
                EntryKind::AdamM => m_state.insert(e.name.clone(), values).is_some(),
                EntryKind::AdamV => v_state.insert(e.name.clone(), values).is_some(),
            };
            if dup {
                return Err(bad(format!("duplicate entry {}", e.name)));
            }
        }
        if expected_offset != data.len() {
            return Err(bad("trailing data after the last entry".into()));
        }
        let same_names = |a: &mut dyn Iterator<Item = &String>, b: &mut dyn Iterator<Item = &String>| {
            let mut a: Vec<&String> = a.collect();
            let mut b: Vec<&String> = b.collect();
            a.sort();
            b.sort();
            a == b
        };
        if !same_names(&mut params.keys(), &mut model.parameters().keys()) {
            return Err(bad("parameter names do not match the model configuration".into()));
        }
        if !same_names(&mut buffers.keys(), &mut model.buffers().keys()) {
            return Err(bad("buffer names do not match the model configuration".into()));
        }
        for (name, t) in params {
            model.set_parameter(&name, t)?;
        }
        for (name, b) in buffers {
            model.set_buffer(&name, b)?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut opt = AdamW::new(o.config)?;
                opt.t = o.t;
                if !same_names(&mut m_state.keys(), &mut v_state.keys()) {
                    return Err(bad("first and second moment entries differ".into()));
                }
                for (name, m) in m_state {
                    let p = model
                        .parameters()
                        .get(&name)
                        .ok_or_else(|| bad(format!("moments for unknown parameter {name}")))?;
                    let v = v_state.swap_remove(&name).expect("checked above");
                    if m.len() != p.numel() || v.len() != p.numel() {
                        return Err(bad(format!("moment size mismatch for {name}")));
                    }
                    opt.moments.insert(name, Moments { m, v });
                }
                Some(opt)
            }
            None if m_state.is_empty() && v_state.is_empty() => None,
            None => return Err(bad("moment entries without optimizer state".into())),
        };
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            best_val_auc: header.best_val_auc,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
