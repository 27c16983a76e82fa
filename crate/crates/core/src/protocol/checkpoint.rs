//! Binary checkpoint: fixed prefix, JSON header, little-endian f64 payload, trailing SHA-256.
//!
//! Layout: `magic[8] | version u32 | header_len u64 | payload_len u64 | header | payload | sha256[32]`.
//! The digest covers every byte before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, EpisodeState, ExemplarStore, LabelSpace};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OWDETRCK";
const PREFIX: usize = 8 + 4 + 8 + 8;
const DIGEST: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    model: ModelConfig,
    labels: LabelSpace,
    exemplars: ExemplarStore,
    rng: RngState,
    adam_step: u64,
    epochs_run: u64,
    steps_run: u64,
    params: Vec<TensorEntry>,
    moment1: Vec<TensorEntry>,
    moment2: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// SHA-256 of the canonical JSON encoding of the model configuration.
pub(crate) fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_vec(model).expect("model config serializes");
    hex(&Sha256::digest(&json))
}

fn bad(message: impl Into<String>) -> Error {
    Error::Parse {
        context: "checkpoint".into(),
        line: 0,
        message: message.into(),
    }
}

fn write_tensors<'a>(
    items: impl Iterator<Item = (&'a str, Vec<usize>, &'a [f64])>,
    payload: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    items
        .map(|(name, shape, data)| {
            let offset = payload.len() as u64;
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            TensorEntry {
                name: name.to_string(),
                shape,
                offset,
            }
        })
        .collect()
}

pub fn checkpoint_to_bytes(state: &EpisodeState) -> Vec<u8> {
    let mut payload = Vec::new();
    let params = write_tensors(
        state.params.iter().map(|(k, t)| (k, t.shape().to_vec(), t.data())),
        &mut payload,
    );
    let moment1 = write_tensors(
        state.adam.m.iter().map(|(k, v)| (k.as_str(), vec![v.len()], v.as_slice())),
        &mut payload,
    );
    let moment2 = write_tensors(
        state.adam.v.iter().map(|(k, v)| (k.as_str(), vec![v.len()], v.as_slice())),
        &mut payload,
    );
    let header = Header {
        config_hash: config_hash(&state.model),
        model: state.model.clone(),
        labels: state.labels.clone(),
        exemplars: state.exemplars.clone(),
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream().to_string(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam_step: state.adam.step,
        epochs_run: state.epochs_run,
        steps_run: state.steps_run,
        params,
        moment1,
        moment2,
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn read_tensor(payload: &[u8], e: &TensorEntry) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let bytes = payload
        .get(start..start + 8 * n)
        .ok_or_else(|| bad(format!("tensor {} lies outside the payload", e.name)))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&e.shape, data)
}

fn read_moments(payload: &[u8], entries: &[TensorEntry]) -> Result<BTreeMap<String, Vec<f64>>> {
    entries
        .iter()
        .map(|e| Ok((e.name.clone(), read_tensor(payload, e)?.into_data())))
        .collect()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EpisodeState> {
    let found = bytes.len() as u64;
    if bytes.len() < PREFIX + DIGEST {
        return Err(Error::Truncated {
            expected: (PREFIX + DIGEST) as u64,
            found,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload_len = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    let expected = (PREFIX as u64)
        .checked_add(header_len)
        .and_then(|x| x.checked_add(payload_len))
        .and_then(|x| x.checked_add(DIGEST as u64))
        .ok_or_else(|| bad("section lengths overflow"))?;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(bad(format!("{} trailing bytes", found - expected)));
    }
    let body = bytes.len() - DIGEST;
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(Error::Checksum);
    }
    let header_end = PREFIX + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[header_end..body];
    if header.config_hash != config_hash(&header.model) {
        return Err(bad("config hash does not match the stored model configuration"));
    }
    let params = Params::from_tensors(
        header
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), read_tensor(payload, e)?)))
            .collect::<Result<Vec<_>>>()?,
    );
    let adam = Adam {
        step: header.adam_step,
        m: read_moments(payload, &header.moment1)?,
        v: read_moments(payload, &header.moment2)?,
    };
    let seed = unhex(&header.rng.seed).ok_or_else(|| bad("bad rng seed"))?;
    let stream: u64 = header.rng.stream.parse().map_err(|_| bad("bad rng stream"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad("bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    if params.classifier_width() != header.labels.width() {
        return Err(bad("classifier width disagrees with the label space"));
    }
    Ok(EpisodeState {
        model: header.model,
        params,
        labels: header.labels,
        exemplars: header.exemplars,
        adam,
        rng,
        epochs_run: header.epochs_run,
        steps_run: header.steps_run,
    })
}

pub fn checkpoint_save(state: &EpisodeState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_to_bytes(state))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<EpisodeState> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    checkpoint_from_bytes(&fs::read(path)?)
}
