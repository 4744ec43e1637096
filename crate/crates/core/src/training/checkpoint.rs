//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (config, step counter, optimiser step counts, pool RNG states, tensor
//! index), little-endian f32 payload in index order, SHA-256 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImagePool, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PGANCKPT";
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    adam_g_steps: u64,
    adam_d_steps: Vec<u64>,
    pools: Vec<ImagePool>,
    pool_sizes: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every tensor of the trainer in payload order.
fn collect(trainer: &Trainer) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    let g = trainer.generator.params();
    for (name, t) in g.iter() {
        out.push((format!("g/{name}"), t));
    }
    for (i, (m, v)) in trainer.adam_g.m.iter().zip(&trainer.adam_g.v).enumerate() {
        out.push((format!("g.adam_m/{}", g.names()[i]), m));
        out.push((format!("g.adam_v/{}", g.names()[i]), v));
    }
    for (k, d) in trainer.discriminator.levels().iter().enumerate() {
        for (name, t) in d.params().iter() {
            out.push((format!("d{k}/{name}"), t));
        }
        let s = &trainer.adam_d[k];
        for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
            out.push((format!("d{k}.adam_m/{}", d.params().names()[i]), m));
            out.push((format!("d{k}.adam_v/{}", d.params().names()[i]), v));
        }
    }
    for (p, pool) in trainer.pools.iter().enumerate() {
        for (i, t) in pool.images().iter().enumerate() {
            out.push((format!("pool{p}/{i}"), t));
        }
    }
    out
}

/// Write `trainer` to `path` atomically; returns the checkpoint id.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<String> {
    let tensors = collect(trainer);
    let header = Header {
        config: trainer.config.clone(),
        step: trainer.step,
        adam_g_steps: trainer.adam_g.t,
        adam_d_steps: trainer.adam_d.iter().map(|s| s.t).collect(),
        pools: trainer.pools.clone(),
        pool_sizes: trainer.pools.iter().map(ImagePool::len).collect(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * n_values + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(hex(&digest[..6]))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Read a checkpoint back into a trainer; returns it with its id.
pub fn load_checkpoint(path: &Path) -> Result<(Trainer, String)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(corrupt(format!("{} is too short ({} bytes)", path.display(), bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch (truncated or modified file)"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &body[header_end..];
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * expected {
        return Err(corrupt(format!(
            "payload holds {} bytes, index describes {}",
            payload.len(),
            4 * expected
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut stored = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        stored.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }

    let mut trainer = Trainer::new(header.config)?;
    let layout: Vec<(String, Vec<usize>)> = {
        let mut fresh = trainer.clone();
        fresh.pools = header.pools.clone();
        for (pool, &n) in fresh.pools.iter_mut().zip(&header.pool_sizes) {
            pool.restore_images(vec![Tensor::zeros(&[0]); n]);
        }
        collect(&fresh).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    };
    if layout.len() != stored.len() {
        return Err(corrupt(format!(
            "expected {} tensors, file has {}",
            layout.len(),
            stored.len()
        )));
    }
    for ((name, shape), (sname, st)) in layout.iter().zip(&stored) {
        let pool_slot = name.starts_with("pool");
        if name != sname || (!pool_slot && shape.as_slice() != st.shape()) {
            return Err(corrupt(format!("tensor {sname} {:?} does not fit {name} {shape:?}", st.shape())));
        }
    }

    let mut it = stored.into_iter().map(|(_, t)| t);
    let n_levels = trainer.discriminator.n_levels();
    let parts = trainer.parts_mut();
    for t in parts.generator.tensors_mut() {
        *t = it.next().expect("checked length");
    }
    for i in 0..parts.adam_g.m.len() {
        parts.adam_g.m[i] = it.next().expect("checked length");
        parts.adam_g.v[i] = it.next().expect("checked length");
    }
    parts.adam_g.t = header.adam_g_steps;
    let mut disc = parts.discriminator;
    for (k, params) in disc.iter_mut().enumerate().take(n_levels) {
        for t in params.tensors_mut() {
            *t = it.next().expect("checked length");
        }
        let s = &mut parts.adam_d[k];
        for i in 0..s.m.len() {
            s.m[i] = it.next().expect("checked length");
            s.v[i] = it.next().expect("checked length");
        }
        s.t = *header
            .adam_d_steps
            .get(k)
            .ok_or_else(|| corrupt("missing discriminator optimiser state"))?;
    }
    *parts.pools = header.pools;
    for (pool, &n) in parts.pools.iter_mut().zip(&header.pool_sizes) {
        pool.restore_images(it.by_ref().take(n).collect());
    }
    *parts.step = header.step;
    Ok((trainer, hex(&digest[..6])))
}
