//! DSCK checkpoint files.
//!
//! Layout (little-endian): magic `DSCK`, u32 version, u32 metadata length,
//! UTF-8 `key=value` metadata lines, u32 record count, then records of
//! u32 name length, name, u32 ndim, `ndim` × u32 dims, f32 payload, and
//! finally a CRC-32 of everything before it.
//!
//! Record names are `param/<path>`, `buffer/<path>`, `adam.m/<path>` and
//! `adam.v/<path>`. Metadata holds the hyperparameters plus `epoch`,
//! `optimizer_step` and `rng`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::adam::OptimizerState;
use super::config::{parse_value, TrainConfig};
use crate::data::Reader;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::{RngSnapshot, RngState};

pub const DSCK_MAGIC: &[u8; 4] = b"DSCK";
pub const DSCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hyperparameters; dataset and output paths are not persisted.
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Trainer stream position after `epoch` epochs.
    pub rng: RngSnapshot,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut meta = String::new();
    for (k, v) in ck.config.entries() {
        meta.push_str(&format!("{k}={v}\n"));
    }
    meta.push_str(&format!("epoch={}\n", ck.epoch));
    meta.push_str(&format!("optimizer_step={}\n", ck.optimizer.step));
    meta.push_str(&format!("rng={}\n", ck.rng.to_text()));

    let mut records: Vec<(String, &Tensor)> = Vec::new();
    let p = &ck.params;
    for store in [&p.encoder, &p.decoder, &p.context] {
        records.extend(store.iter().map(|(n, t)| (format!("param/{n}"), t)));
    }
    records.extend(p.buffers.iter().map(|(n, t)| (format!("buffer/{n}"), t)));
    records.extend(ck.optimizer.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
    records.extend(ck.optimizer.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));

    let mut out = Vec::new();
    out.extend_from_slice(DSCK_MAGIC);
    push_u32(&mut out, DSCK_VERSION);
    push_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    push_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        push_record(&mut out, &name, t);
    }
    let crc = crc32fast::hash(&out);
    push_u32(&mut out, crc);
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(4, "magic")
        .map_err(|_| Error::Format("file shorter than the DSCK magic".into()))?;
    if magic != DSCK_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected DSCK")));
    }
    let version = r.u32("version")?;
    if version != DSCK_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DSCK_VERSION,
        });
    }
    // Magic and version are reported before the checksum so old or foreign
    // files get the more specific error.
    let body_len = bytes
        .len()
        .checked_sub(4)
        .filter(|&n| n >= 12)
        .ok_or_else(|| corrupt("file too short for a checksum"))?;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader::new(&bytes[8..body_len]);
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| corrupt("metadata is not UTF-8"))?;

    let mut config = TrainConfig::default();
    let (mut epoch, mut step, mut rng) = (None, None, None);
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("metadata line '{line}' lacks '='")))?;
        match k {
            "epoch" => epoch = Some(parse_value::<usize>(k, v, "an integer").map_err(|e| corrupt(e.to_string()))?),
            "optimizer_step" => step = Some(parse_value::<u64>(k, v, "an integer").map_err(|e| corrupt(e.to_string()))?),
            "rng" => rng = Some(RngSnapshot::parse(v).map_err(|e| corrupt(e.to_string()))?),
            _ => {
                if !config.set(k, v).map_err(|e| corrupt(e.to_string()))? {
                    return Err(corrupt(format!("unknown metadata key '{k}'")));
                }
            }
        }
    }
    let (Some(epoch), Some(step), Some(rng)) = (epoch, step, rng) else {
        return Err(corrupt("metadata lacks epoch, optimizer_step or rng"));
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;

    let count = r.u32("record count")? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| corrupt("record name is not UTF-8"))?
            .to_string();
        let shape = r.shape(&name)?;
        let t = r.f32s(&shape, &name)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate record '{name}'")));
        }
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }

    // Build a skeleton of the right architecture, then fill every slot.
    let mut params = ModelParams::init(config.model, &mut RngState::new(0))?;
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = records
            .remove(&name)
            .ok_or_else(|| corrupt(format!("missing record '{name}'")))?;
        if t.shape() != shape {
            return Err(corrupt(format!(
                "record '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut optimizer = OptimizerState {
        step,
        ..OptimizerState::default()
    };
    for store in params.stores_mut() {
        for (name, slot) in store.iter_mut() {
            let t = take(format!("param/{name}"), slot.shape())?;
            *slot = t.with_requires_grad();
            if step > 0 {
                optimizer.m.insert(name.to_string(), take(format!("adam.m/{name}"), slot.shape())?);
                optimizer.v.insert(name.to_string(), take(format!("adam.v/{name}"), slot.shape())?);
            }
        }
    }
    let names: Vec<String> = params.buffers.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let slot = params.buffers.get_mut(&name).expect("listed above");
        *slot = take(format!("buffer/{name}"), slot.shape())?;
    }
    if let Some(extra) = records.keys().next() {
        return Err(corrupt(format!("unexpected record '{extra}'")));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        epoch,
        rng,
    })
}

pub fn checkpoint_save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
