//! Binary checkpoints.
//!
//! Layout: `u64` little-endian header length, the header as JSON, then raw
//! little-endian `f32` blobs in directory order. Optimizer moments follow the
//! model tensors as `adam.m/<name>` and `adam.v/<name>` entries.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::trainer::adam::AdamState;

use super::config::ModelConfig;
use super::network::Model;
use super::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab_hash: String,
    vocab_tokens: Vec<String>,
    vocab_min_freq: usize,
    tensors: Vec<Entry>,
    optimizer_step: Option<u64>,
    training: Option<TrainingState>,
}

/// Loop position needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub epochs_completed: usize,
    pub best_dev_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub evals_without_improvement: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn new(model: &Model<f32>, vocab: &Vocabulary) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().clone(),
            optimizer: None,
            training: None,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    /// Fails unless `vocab` is the vocabulary the checkpoint was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let (expected, found) = (self.vocab.hash(), vocab.hash());
        if expected != found {
            return Err(Error::VocabMismatch { expected, found });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<(String, Vec<usize>, &[f32])> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for ((name, t), data) in self.params.iter().zip(moments) {
                    blobs.push((format!("{prefix}/{name}"), t.shape().to_vec(), data));
                }
            }
        }
        let mut offset = 0u64;
        let tensors = blobs
            .iter()
            .map(|(name, shape, data)| {
                let e = Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len() as u64,
                };
                offset += 4 * data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab_hash: self.vocab.hash(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_min_freq: self.vocab.min_freq(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blobs {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[8..body_start]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", header.format_version)));
        }
        let vocab = Vocabulary::from_tokens(header.vocab_tokens, header.vocab_min_freq)?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("embedded vocabulary does not match vocab_hash".into()));
        }
        let body = &bytes[body_start..];
        let mut params = ParamStore::default();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > body.len() || e.shape.iter().product::<usize>() != e.len as usize {
                return Err(bad(format!("tensor {} is out of bounds or misshapen", e.name)));
            }
            let data: Vec<f32> = body[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(n) = e.name.strip_prefix("adam.m/") {
                check_moment(&params, n, &e.shape).map_err(&bad)?;
                m.push(data);
            } else if let Some(n) = e.name.strip_prefix("adam.v/") {
                check_moment(&params, n, &e.shape).map_err(&bad)?;
                v.push(data);
            } else {
                let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
                params.insert(&e.name, t);
            }
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let state = AdamState { step, m, v };
                if !state.matches(&params) {
                    return Err(bad("optimizer moments do not cover every parameter".into()));
                }
                Some(state)
            }
            None => None,
        };
        Model::from_params(header.config.clone(), params.clone()).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            config: header.config,
            vocab,
            params,
            optimizer,
            training: header.training,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn check_moment(params: &ParamStore<f32>, name: &str, shape: &[usize]) -> std::result::Result<(), String> {
    match params.by_name(name) {
        Some(t) if t.shape() == shape => Ok(()),
        _ => Err(format!("optimizer moment for unknown or misshapen parameter {name}")),
    }
}
