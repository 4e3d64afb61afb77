//! Checkpoint serialization.
//!
//! Layout (little-endian): magic `SVCK`, `u32` format version, `u32` record
//! count, then repeated records `[u16 name-length, name bytes, u8 ndim,
//! u32 dims.., raw 32-bit values]`, and a trailing CRC32 of everything
//! before it. Dependency-free, diffable and documented.
//!
//! Besides the parameter, optimizer-moment and EMA tensors, three metadata
//! records ride along in the same record scheme: the config echo and the
//! RNG state as one byte per f32 value, and the step counter as a single
//! f32 (exact for any step below 2^24).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fit::ParamStore;
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

/// IEEE CRC32 (reflected, polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

fn push_record(out: &mut Vec<u8>, r: &Record) -> Result<()> {
    if r.name.len() > u16::MAX as usize {
        return Err(Error::Checkpoint("record name too long".into()));
    }
    out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
    out.extend_from_slice(r.name.as_bytes());
    out.push(r.dims.len() as u8);
    for &d in &r.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &r.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize records into the checkpoint byte format.
pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        push_record(&mut out, r)?;
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("not a SVCK checkpoint".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch (corrupt checkpoint)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let mut pos = 12usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > body.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let ndim = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let raw = take(4 * numel)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, dims, values });
    }
    if pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }
    Ok(records)
}

fn bytes_record(name: &str, bytes: &[u8]) -> Record {
    Record {
        name: name.to_string(),
        dims: vec![bytes.len() as u32],
        values: bytes.iter().map(|&b| b as f32).collect(),
    }
}

fn record_bytes(r: &Record) -> Result<Vec<u8>> {
    r.values
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                Err(Error::Checkpoint(format!("record `{}` is not a byte record", r.name)))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}

fn tensor_record(name: &str, shape: &[usize], values: &[f32]) -> Record {
    Record {
        name: name.to_string(),
        dims: shape.iter().map(|&d| d as u32).collect(),
        values: values.to_vec(),
    }
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out
}

fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(Error::Checkpoint("bad RNG state length".into()));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[0..32]);
    let word_pos = u128::from_le_bytes(bytes[32..48].try_into().unwrap());
    let stream = u64::from_le_bytes(bytes[48..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Snapshot the full training state into checkpoint bytes.
pub fn checkpoint_bytes(trainer: &Trainer, config_text: &str) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    records.push(bytes_record("meta.config", config_text.as_bytes()));
    records.push(bytes_record("meta.rng", &rng_bytes(&trainer.rng)));
    if trainer.step >= (1 << 24) {
        return Err(Error::Checkpoint("step counter exceeds f32 range".into()));
    }
    records.push(tensor_record("meta.step", &[1], &[trainer.step as f32]));
    records.push(tensor_record("meta.opt_step", &[1], &[trainer.opt.step as f32]));

    for (name, t) in trainer.params.iter() {
        records.push(tensor_record(&format!("param.{name}"), t.shape(), t.data()));
    }
    for (name, t) in trainer.params.iter() {
        let m = trainer.opt.m.get(name).cloned().unwrap_or_default();
        let v = trainer.opt.v.get(name).cloned().unwrap_or_default();
        if !m.is_empty() {
            records.push(tensor_record(&format!("opt.m.{name}"), t.shape(), &m));
            records.push(tensor_record(&format!("opt.v.{name}"), t.shape(), &v));
        }
    }
    for (name, values) in trainer.ema.iter() {
        let shape = trainer.params.get(name)?.shape().to_vec();
        records.push(tensor_record(&format!("ema.{name}"), &shape, values));
    }
    encode(&records)
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, config_text: &str) -> Result<()> {
    let bytes = checkpoint_bytes(trainer, config_text)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Restore a trainer from a checkpoint. The embedded config echo drives the
/// reconstruction, so a checkpoint is self-describing.
pub fn load_checkpoint(path: &Path) -> Result<(super::RunConfig, Trainer)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let records = decode(&bytes)?;
    let find = |name: &str| -> Result<&Record> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    };

    let config_text = String::from_utf8(record_bytes(find("meta.config")?)?)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
    let cfg = super::RunConfig::parse(&config_text)?;
    let mut trainer = Trainer::new(cfg.diffusion()?, cfg.fit(), cfg.training()?, cfg.dataset())?;

    trainer.rng = rng_from_bytes(&record_bytes(find("meta.rng")?)?)?;
    trainer.step = find("meta.step")?.values[0] as u64;
    trainer.opt.step = find("meta.opt_step")?.values[0] as u64;

    for r in &records {
        if let Some(name) = r.name.strip_prefix("param.") {
            let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
            trainer.params.set(name, Tensor::var(r.values.clone(), &shape)?)?;
        } else if let Some(name) = r.name.strip_prefix("opt.m.") {
            trainer.opt.m.insert(name.to_string(), r.values.clone());
        } else if let Some(name) = r.name.strip_prefix("opt.v.") {
            trainer.opt.v.insert(name.to_string(), r.values.clone());
        } else if let Some(name) = r.name.strip_prefix("ema.") {
            trainer.ema.load_values(name, r.values.clone())?;
        }
    }
    Ok((cfg, trainer))
}

/// Load only the parameter tensors of a checkpoint (for sampling).
pub fn load_params(path: &Path) -> Result<(super::RunConfig, ParamStore<f32>, ParamStore<f32>)> {
    let (cfg, trainer) = load_checkpoint(path)?;
    let ema = trainer.ema.to_params(&trainer.params)?;
    Ok((cfg, trainer.params, ema))
}
