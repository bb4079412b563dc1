//! `MTS3CKP1` checkpoint format: a JSON manifest (tensor names, shapes,
//! byte offsets, config echo, rng state) followed by one raw little-endian
//! f64 blob. Adam moments ride along as `<name>.adam_m` / `<name>.adam_v`
//! entries so training resumes exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::NormStats;
use crate::error::{MtsError, Result};
use crate::model::{Mts3, Mts3Config};
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"MTS3CKP1";

#[derive(Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: Mts3Config,
    pub train: TrainConfig,
    pub norm: NormStats,
    pub epoch: usize,
    pub best_val_nll: f64,
    pub adam_step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: String,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Mts3,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Mts3,
    train: &TrainConfig,
    norm: &NormStats,
    epoch: usize,
    best_val_nll: f64,
    rng_seed: u64,
    rng_word_pos: u128,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, data: &[f64], blob: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            rows,
            cols,
            offset: blob.len(),
        });
        for &x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (_, p) in model.store.iter() {
        push(p.name.clone(), p.rows, p.cols, &p.value, &mut blob);
        push(format!("{}.adam_m", p.name), p.rows, p.cols, &p.m, &mut blob);
        push(format!("{}.adam_v", p.name), p.rows, p.cols, &p.v, &mut blob);
    }
    let meta = CheckpointMeta {
        version: 1,
        model: model.cfg.clone(),
        train: train.clone(),
        norm: norm.clone(),
        epoch,
        best_val_nll,
        adam_step: model.store.adam.step,
        rng_seed,
        rng_word_pos: rng_word_pos.to_string(),
        tensors,
    };
    let manifest = serde_json::to_vec(&meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest.len() as u32).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(MtsError::Data("not an MTS3CKP1 file".into()));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(MtsError::Data("checkpoint manifest truncated".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + mlen])?;
    let blob = &bytes[12 + mlen..];

    let mut model = Mts3::new(meta.model.clone())?;
    for entry in &meta.tensors {
        let n = entry.rows * entry.cols;
        let end = entry.offset + 8 * n;
        if end > blob.len() {
            return Err(MtsError::Data(format!(
                "checkpoint blob truncated at tensor {}",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (base, slot) = match entry.name.strip_suffix(".adam_m") {
            Some(b) => (b.to_string(), 1u8),
            None => match entry.name.strip_suffix(".adam_v") {
                Some(b) => (b.to_string(), 2),
                None => (entry.name.clone(), 0),
            },
        };
        let id = model
            .store
            .id_of(&base)
            .ok_or_else(|| MtsError::Data(format!("unknown tensor {} in checkpoint", entry.name)))?;
        let p = model.store.param_mut(id);
        if p.rows != entry.rows || p.cols != entry.cols {
            return Err(MtsError::Data(format!(
                "tensor {} shape mismatch: file [{}, {}] vs model [{}, {}]",
                entry.name, entry.rows, entry.cols, p.rows, p.cols
            )));
        }
        match slot {
            0 => p.value = data,
            1 => p.m = data,
            _ => p.v = data,
        }
    }
    model.store.adam.step = meta.adam_step;
    Ok(Checkpoint { meta, model })
}
