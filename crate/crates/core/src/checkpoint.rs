//! Self-contained binary checkpoints: model config, trained weights,
//! optimizer moments, and the run-config fingerprint that produced them.
//!
//! Format (all integers little-endian):
//!
//! ```text
//! magic "PGCK" | version u32 | fingerprint (str) | config JSON (str)
//! | epoch u64 | adam lr,β₁,β₂,ε,wd (5×f64) | adam step u64
//! | tensor count u64 | per tensor: name (str), ndim u64, dims u64...,
//!   data f64..., m f64..., v f64...
//! ```
//!
//! Strings are u64 length + UTF-8 bytes. Only trainable tensors are
//! stored; positional tables are deterministic in the config and are
//! rebuilt on load. Tensor payloads round-trip f64 bits exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::mae::{init_params, MAEConfig, MAEParams, MaeError};
use crate::tensor::{AdamWConfig, AdamWState};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mae(#[from] MaeError),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

fn bad(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(detail.into())
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub fingerprint: String,
    /// Epochs completed when this snapshot was taken.
    pub epoch: u64,
    pub params: MAEParams,
    pub optimizer: AdamWState,
}

pub fn save_checkpoint(
    path: &Path,
    fingerprint: &str,
    epoch: u64,
    params: &MAEParams,
    optimizer: &AdamWState,
) -> Result<(), CheckpointError> {
    let named = params.named_trainable();
    if named.len() != optimizer.m.len() {
        return Err(bad(format!(
            "{} tensors vs optimizer state for {}",
            named.len(),
            optimizer.m.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, fingerprint)?;
    write_str(&mut w, &serde_json::to_string(&params.config)?)?;
    w.write_all(&epoch.to_le_bytes())?;
    let c = optimizer.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&optimizer.step.to_le_bytes())?;
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    for (i, (name, tensor)) in named.iter().enumerate() {
        let (m, v) = (&optimizer.m[i], &optimizer.v[i]);
        if m.len() != tensor.numel() || v.len() != tensor.numel() {
            return Err(bad(format!("moment size mismatch for {name}")));
        }
        write_str(&mut w, name)?;
        w.write_all(&(tensor.shape.len() as u64).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, &tensor.data)?;
        write_f64s(&mut w, m)?;
        write_f64s(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = read_str(&mut r)?;
    let config: MAEConfig = serde_json::from_str(&read_str(&mut r)?)?;
    config.validate()?;
    let epoch = read_u64(&mut r)?;
    let mut hyper = [0.0f64; 5];
    for h in &mut hyper {
        *h = read_f64(&mut r)?;
    }
    let step = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;

    // Seed value is irrelevant: every trainable tensor is overwritten
    // below, and the positional tables depend only on the config.
    let mut params = init_params(&config, 0)?;
    let expected: Vec<String> = params.named_trainable().iter().map(|(n, _)| n.clone()).collect();
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, expected {}", expected.len())));
    }

    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    {
        let mut slots = params.trainable_mut();
        for (i, slot) in slots.iter_mut().enumerate() {
            let name = read_str(&mut r)?;
            if name != expected[i] {
                return Err(bad(format!("tensor {i} is '{name}', expected '{}'", expected[i])));
            }
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != slot.shape {
                return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", slot.shape)));
            }
            let n = slot.numel();
            slot.data = read_f64s(&mut r, n)?;
            m.push(read_f64s(&mut r, n)?);
            v.push(read_f64s(&mut r, n)?);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }

    let adam = AdamWConfig {
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        weight_decay: hyper[4],
    };
    Ok(Checkpoint {
        fingerprint,
        epoch,
        params,
        optimizer: AdamWState { config: adam, step, m, v },
    })
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(bad(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("non-UTF-8 string"))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
