//! Binary checkpoint: `"MAFN"`, format version (u32), entry count (u32),
//! then per entry the name length (u32), name bytes, rank (u32), dims (u32
//! each) and the values as little-endian f32. Entries are sorted by name.
//!
//! Besides parameters a checkpoint holds the optimizer moments
//! (`adam.m.<param>`, `adam.v.<param>`) and byte-string entries (one f32 per
//! byte) for the configuration text, the vocabulary and the training state.

use std::collections::BTreeMap;
use std::path::Path;

use mafn_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"MAFN";
pub const VERSION: u32 = 1;

const CONFIG_ENTRY: &str = "__config";
const VOCAB_ENTRY: &str = "__vocab";
const STATE_ENTRY: &str = "__state";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Training progress carried across resumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Bit pattern of the best validation mIoU so far.
    pub best_miou_bits: u64,
    pub best_epoch: usize,
    pub since_best: usize,
    /// Metric log rows written so far (CSV, without header).
    pub log: Vec<String>,
}

impl TrainState {
    pub fn best_miou(&self) -> f64 {
        f64::from_bits(self.best_miou_bits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
    pub state: TrainState,
}

fn bytes_tensor(bytes: &[u8]) -> Tensor<f32> {
    Tensor::from_fn(vec![bytes.len()], |i| bytes[i] as f32)
}

fn tensor_bytes(name: &str, t: &Tensor<f32>) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&x| {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Checkpoint(format!("entry {name:?} is not a byte string")))
            }
        })
        .collect()
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, vocab: Vocabulary, params: ParamStore<f32>) -> Self {
        let optimizer = AdamW::new(&config.train);
        Checkpoint {
            config,
            vocab,
            params,
            optimizer,
            state: TrainState::default(),
        }
    }

    fn entries(&self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let mut map = BTreeMap::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("__") || name.starts_with("adam.") {
                return Err(Error::Checkpoint(format!("reserved parameter name {name:?}")));
            }
            map.insert(name.to_string(), (**t).clone());
        }
        for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
            for (name, data) in moments {
                let shape = self.params.get(name)?.shape().to_vec();
                map.insert(format!("{prefix}{name}"), Tensor::new(shape, data.clone())?);
            }
        }
        let mut state = self.state.clone();
        state.step = self.optimizer.step;
        let state = serde_json::to_vec(&state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        map.insert(STATE_ENTRY.into(), bytes_tensor(&state));
        map.insert(CONFIG_ENTRY.into(), bytes_tensor(self.config.to_text().as_bytes()));
        map.insert(VOCAB_ENTRY.into(), bytes_tensor(self.vocab.to_text().as_bytes()));
        Ok(map)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_u32(&mut out, entries.len() as u32);
        for (name, t) in &entries {
            push_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                push_u32(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut take_bytes = |name: &str| -> Result<Vec<u8>> {
            let t = entries
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))?;
            tensor_bytes(name, &t)
        };
        let text = |b: Vec<u8>, what: &str| {
            String::from_utf8(b).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
        };
        let config = RunConfig::parse(&text(take_bytes(CONFIG_ENTRY)?, "config")?)?;
        let vocab_text = text(take_bytes(VOCAB_ENTRY)?, "vocabulary")?;
        let vocab = Vocabulary::from_words(vocab_text.lines().map(String::from).collect())?;
        let state: TrainState = serde_json::from_slice(&take_bytes(STATE_ENTRY)?)
            .map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
        let mut optimizer = AdamW::new(&config.train);
        optimizer.step = state.step;
        let mut params = ParamStore::new();
        for (name, t) in entries {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                optimizer.m.insert(p.to_string(), t.into_data());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                optimizer.v.insert(p.to_string(), t.into_data());
            } else if name.starts_with("__") {
                return Err(Error::Checkpoint(format!("unknown entry {name:?}")));
            } else {
                params.insert(name, t);
            }
        }
        for name in optimizer.m.keys().chain(optimizer.v.keys()) {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!("moments for unknown parameter {name:?}")));
            }
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            optimizer,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::dataset::write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}
