//! Checkpoint files (`.smck`): everything needed to resume or evaluate a
//! run — both configs, all parameters, the optimizer's moments and
//! per-parameter step counters, and the batch RNG's exact position.
//!
//! Layout: a 6-byte prelude (magic, format version, scalar dtype), a
//! length-prefixed JSON header (configs, optimizer hyperparameters, RNG
//! position, parameter manifest, parameter checksum), then length-prefixed
//! tensor blobs in the header's order. The file carries no timestamps, so
//! saving identical state twice yields byte-identical files. Writes go to a
//! sibling temp file and rename into place, so a crash mid-write never
//! leaves a truncated checkpoint under the real name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::training::{AdamState, TrainConfig};
use crate::{ensure_arg, Tensor};

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct RngPos {
    seed_hex: String,
    stream: u64,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHypers {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    optimizer: OptimizerHypers,
    rng: RngPos,
    params: Vec<ParamEntry>,
    /// Names with optimizer state; their step counts. Parameters never yet
    /// updated carry no moments.
    adam_steps: BTreeMap<String, u64>,
    param_checksum: String,
}

/// A fully rehydrated checkpoint.
pub struct Checkpoint<S: Scalar> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub store: ParamStore<S>,
    pub opt: AdamState<S>,
    pub rng: ChaCha8Rng,
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn take_blob<'a>(bytes: &'a [u8], off: &mut usize) -> Result<&'a [u8]> {
    ensure_arg!(bytes.len() >= *off + 8, "checkpoint truncated before blob length");
    let len = u64::from_le_bytes(bytes[*off..*off + 8].try_into().expect("8 bytes")) as usize;
    *off += 8;
    ensure_arg!(bytes.len() >= *off + len, "checkpoint truncated inside blob");
    let blob = &bytes[*off..*off + len];
    *off += len;
    Ok(blob)
}

/// Serialize a full training state. Atomic: writes a temp sibling then
/// renames over `path`.
pub fn save<S: Scalar>(
    path: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    store: &ParamStore<S>,
    opt: &AdamState<S>,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let seed_hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let word_pos = rng.get_word_pos();
    let header = Header {
        format_version: 1,
        model: model.clone(),
        train: train.clone(),
        optimizer: OptimizerHypers {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        },
        rng: RngPos {
            seed_hex,
            stream: rng.get_stream(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        },
        params: store
            .iter()
            .map(|(n, t)| ParamEntry { name: n.to_string(), dims: t.dims().to_vec() })
            .collect(),
        adam_steps: opt.t.clone(),
        param_checksum: store.checksum(),
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    push_blob(&mut out, serde_json::to_string(&header)?.as_bytes());
    for (_, t) in store.iter() {
        push_blob(&mut out, &encode_tensor(t));
    }
    for name in header.adam_steps.keys() {
        push_blob(&mut out, &encode_tensor(&opt.m[name]));
        push_blob(&mut out, &encode_tensor(&opt.v[name]));
    }

    let tmp = path.with_extension("smck.tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint back, verifying the embedded parameter checksum.
pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path)?;
    ensure_arg!(bytes.len() >= 6, "checkpoint too short");
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {:?}, expected {:?}",
            dtype,
            S::DTYPE
        )));
    }

    let mut off = 6;
    let header: Header = serde_json::from_slice(take_blob(&bytes, &mut off)?)?;
    ensure_arg!(header.format_version == 1, "unsupported header version");

    let mut store = ParamStore::new();
    for entry in &header.params {
        let t: Tensor<S> = decode_tensor(take_blob(&bytes, &mut off)?)?;
        ensure_arg!(
            t.dims() == entry.dims.as_slice(),
            "parameter {} has shape {:?}, manifest says {:?}",
            entry.name,
            t.dims(),
            entry.dims
        );
        store.insert(&entry.name, t);
    }
    if store.checksum() != header.param_checksum {
        return Err(Error::Format("parameter checksum mismatch".into()));
    }

    let mut opt = AdamState::new(header.optimizer.lr);
    opt.beta1 = header.optimizer.beta1;
    opt.beta2 = header.optimizer.beta2;
    opt.eps = header.optimizer.eps;
    opt.t = header.adam_steps.clone();
    for name in header.adam_steps.keys() {
        opt.m.insert(name.clone(), decode_tensor(take_blob(&bytes, &mut off)?)?);
        opt.v.insert(name.clone(), decode_tensor(take_blob(&bytes, &mut off)?)?);
    }
    ensure_arg!(off == bytes.len(), "trailing bytes after checkpoint body");

    ensure_arg!(header.rng.seed_hex.len() == 64, "rng seed must be 32 bytes hex");
    let mut seed = [0u8; 32];
    for (i, chunk) in header.rng.seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| Error::Format("bad seed hex".into()))?;
        seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::Format("bad seed hex".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(((header.rng.word_pos_hi as u128) << 64) | header.rng.word_pos_lo as u128);

    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        store,
        opt,
        rng,
    })
}
