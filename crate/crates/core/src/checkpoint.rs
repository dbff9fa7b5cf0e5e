//! Checkpoint files.
//!
//! A checkpoint is a one-line header followed by a JSON payload:
//!
//! ```text
//! clonealign-checkpoint 1 sha256:<hex digest of the payload>
//! {"encoder_config": ..., "vocab": [...], "tensors": {...}, ...}
//! ```
//!
//! Tensors are stored as hex strings of little-endian `f64` bytes so every
//! value survives the round trip bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Param;
use crate::csp::{LanguageQueue, QueueEntry};
use crate::encoder::{Embedding, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, Moment};
use crate::tokenizer::Vocabulary;
use crate::trainer::{Stage, TrainState};

pub const MAGIC: &str = "clonealign-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: String,
}

fn encode_f64s<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode_f64s(data: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(data).map_err(|e| Error::Validation(format!("tensor data: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation("tensor data is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Tensor {
    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: encode_f64s(a.iter()),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        let values = decode_f64s(&self.data)?;
        Array2::from_shape_vec((self.rows, self.cols), values)
            .map_err(|e| Error::Validation(format!("tensor shape: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct MomentRecord {
    step: u64,
    m: Tensor,
    v: Tensor,
}

#[derive(Serialize, Deserialize)]
struct QueueRecord {
    capacity: usize,
    sources: Vec<String>,
    snippets: Vec<usize>,
    embeddings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    encoder_config: EncoderConfig,
    vocab: Vocabulary,
    seed: u64,
    stage: Stage,
    step: u64,
    tensors: BTreeMap<String, Tensor>,
    optimizer: BTreeMap<String, MomentRecord>,
    queues: BTreeMap<String, QueueRecord>,
}

/// Serialize `state` into checkpoint bytes.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let tensors = state
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), Tensor::from_array(&p.value)))
        .collect();
    let optimizer = state
        .optimizer
        .moments
        .iter()
        .map(|(k, m)| {
            (
                k.clone(),
                MomentRecord {
                    step: m.step,
                    m: Tensor::from_array(&m.m),
                    v: Tensor::from_array(&m.v),
                },
            )
        })
        .collect();
    let queues = state
        .queues
        .iter()
        .map(|(lang, q)| {
            (
                lang.clone(),
                QueueRecord {
                    capacity: q.capacity(),
                    sources: q.entries().map(|e| e.source.clone()).collect(),
                    snippets: q.entries().map(|e| e.snippet).collect(),
                    embeddings: q.entries().map(|e| encode_f64s(e.embedding.values().iter())).collect(),
                },
            )
        })
        .collect();
    let payload = Payload {
        encoder_config: state.encoder.config().clone(),
        vocab: state.encoder.vocab().clone(),
        seed: state.seed,
        stage: state.stage,
        step: state.step,
        tensors,
        optimizer,
        queues,
    };
    let body = serde_json::to_vec(&payload).expect("payload serializes");
    let digest = hex::encode(Sha256::digest(&body));
    let mut out = format!("{MAGIC} {VERSION} sha256:{digest}\n").into_bytes();
    out.extend(body);
    out
}

/// Parse checkpoint bytes, verifying header and checksum before anything
/// else.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<TrainState> {
    let checksum = || Error::Checksum {
        path: origin.to_path_buf(),
    };
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(checksum)?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| checksum())?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Incompatible {
            found: header.chars().take(40).collect(),
            expected: format!("{MAGIC} {VERSION}"),
        });
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION.to_string() {
        return Err(Error::Incompatible {
            found: format!("{MAGIC} {version}"),
            expected: format!("{MAGIC} {VERSION}"),
        });
    }
    let digest = parts.next().and_then(|d| d.strip_prefix("sha256:")).ok_or_else(checksum)?;
    let body = &bytes[newline + 1..];
    if hex::encode(Sha256::digest(body)) != digest {
        return Err(checksum());
    }
    let payload: Payload = serde_json::from_slice(body)
        .map_err(|e| Error::Validation(format!("checkpoint payload: {e}")))?;

    let mut encoder = Encoder::new(payload.encoder_config.clone(), payload.vocab)?;
    if encoder.config() != &payload.encoder_config {
        return Err(Error::Validation("encoder config does not match its vocabulary".into()));
    }
    // mapper and head tensors may be absent, e.g. dropped for an ablation
    let mut state = TrainState::new(encoder.clone(), payload.seed)?;
    assign(encoder.params_mut(), &payload.tensors, true)?;
    state.encoder = encoder;
    let mut rest = state.domain_head.params_mut();
    rest.extend(state.mapper_h.params_mut());
    rest.extend(state.mapper_p.params_mut());
    assign(rest, &payload.tensors, false)?;
    let known: Vec<String> = state.params().iter().map(|p| p.name.clone()).collect();
    if let Some(extra) = payload.tensors.keys().find(|k| !known.contains(k)) {
        return Err(Error::Validation(format!("unknown tensor `{extra}`")));
    }

    let mut moments = BTreeMap::new();
    for (name, rec) in payload.optimizer {
        moments.insert(
            name,
            Moment {
                step: rec.step,
                m: rec.m.to_array()?,
                v: rec.v.to_array()?,
            },
        );
    }
    state.optimizer = AdamW { moments };
    for (lang, rec) in payload.queues {
        if rec.sources.len() != rec.embeddings.len() || rec.snippets.len() != rec.embeddings.len() {
            return Err(Error::Validation(format!("queue `{lang}` is inconsistent")));
        }
        let mut q = LanguageQueue::new(lang.clone(), rec.capacity)?;
        let entries = rec
            .sources
            .into_iter()
            .zip(rec.snippets)
            .zip(rec.embeddings)
            .map(|((source, snippet), data)| {
                Ok(QueueEntry {
                    embedding: Embedding(decode_f64s(&data)?),
                    source,
                    snippet,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        q.push(entries)?;
        state.queues.insert(lang, q);
    }
    state.stage = payload.stage;
    state.step = payload.step;
    Ok(state)
}

fn assign(params: Vec<&mut Param>, tensors: &BTreeMap<String, Tensor>, required: bool) -> Result<()> {
    for p in params {
        match tensors.get(&p.name) {
            Some(t) => {
                let value = t.to_array()?;
                if value.dim() != p.value.dim() {
                    return Err(Error::Validation(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        p.name,
                        value.dim(),
                        p.value.dim()
                    )));
                }
                p.value = value;
            }
            None if required => {
                return Err(Error::Validation(format!("missing tensor `{}`", p.name)));
            }
            None => {}
        }
    }
    Ok(())
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
