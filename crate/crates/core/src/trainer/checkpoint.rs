//! On-disk checkpoints.
//!
//! ```text
//! config.json       format version, TrainConfig, ModelConfig
//! vocab.json        token list, index = id
//! params.idx.json   [{name, shape, byte_offset}]
//! params.bin        little-endian f32, concatenated in index order
//! optimizer.bin     first moments then second moments, same layout as params.bin
//! meta.json         epoch, seed, Adam step, CRC-32 of params.bin and optimizer.bin
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{TrainConfig, TrainError};
use crate::autodiff::Precision;
use crate::models::{Model, ModelConfig, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
    pub checksum: u32,
    pub optimizer_checksum: u32,
    pub best_dev_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub vocab: Vocabulary,
    pub index: Vec<IndexEntry>,
    /// Parameter values in index order.
    pub values: Vec<Vec<f64>>,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("plain data") + "\n";
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text)
        .map_err(|e| TrainError::CorruptFile(format!("{}: {e}", path.display())))
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Writes a checkpoint into `dir` (created if needed) and returns the stored metadata.
pub fn save_checkpoint(
    dir: &Path,
    train: &TrainConfig,
    model: &Model,
    vocab: &Vocabulary,
    adam: &AdamState,
    epoch: usize,
    best_dev_loss: Option<f64>,
) -> Result<CheckpointMeta, TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut index = Vec::with_capacity(model.store.len());
    let mut params = Vec::with_capacity(model.store.num_scalars() * 4);
    for p in model.store.iter() {
        index.push(IndexEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            byte_offset: params.len() as u64,
        });
        push_f32(&mut params, p.value.data());
    }
    let mut optimizer = Vec::with_capacity(params.len() * 2);
    if adam.matches(&model.store) {
        adam.m.iter().for_each(|m| push_f32(&mut optimizer, m));
        adam.v.iter().for_each(|v| push_f32(&mut optimizer, v));
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        epoch,
        seed: train.seed,
        adam_step: adam.step,
        checksum: crc32fast::hash(&params),
        optimizer_checksum: crc32fast::hash(&optimizer),
        best_dev_loss,
    };
    let config = CheckpointConfig {
        format_version: FORMAT_VERSION,
        train: train.clone(),
        model: model.config.clone(),
    };
    write_json(&dir.join("config.json"), &config)?;
    write_json(&dir.join("vocab.json"), vocab)?;
    write_json(&dir.join("params.idx.json"), &index)?;
    let p = dir.join("params.bin");
    fs::write(&p, &params).map_err(io(&p))?;
    let p = dir.join("optimizer.bin");
    fs::write(&p, &optimizer).map_err(io(&p))?;
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let config: CheckpointConfig = read_json(&dir.join("config.json"))?;
    if meta.format_version != FORMAT_VERSION || config.format_version != FORMAT_VERSION {
        return Err(TrainError::IncompatibleVersion(format!(
            "checkpoint format {} (config {}), expected {FORMAT_VERSION}",
            meta.format_version, config.format_version
        )));
    }
    let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
    let index: Vec<IndexEntry> = read_json(&dir.join("params.idx.json"))?;

    let path = dir.join("params.bin");
    let params = fs::read(&path).map_err(io(&path))?;
    if crc32fast::hash(&params) != meta.checksum {
        return Err(TrainError::CorruptFile(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    let total: usize = index
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if params.len() != total * 4 {
        return Err(TrainError::CorruptFile(format!(
            "{}: {} bytes for {total} values",
            path.display(),
            params.len()
        )));
    }
    let mut values = Vec::with_capacity(index.len());
    for e in &index {
        let n: usize = e.shape.iter().product();
        let at = e.byte_offset as usize;
        let chunk = params
            .get(at..at + n * 4)
            .ok_or_else(|| TrainError::CorruptFile(format!("{}: offset out of range", e.name)))?;
        values.push(read_f32(chunk));
    }

    let path = dir.join("optimizer.bin");
    let opt = fs::read(&path).map_err(io(&path))?;
    if crc32fast::hash(&opt) != meta.optimizer_checksum {
        return Err(TrainError::CorruptFile(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    let adam = if opt.is_empty() {
        AdamState {
            m: values.iter().map(|v| vec![0.0; v.len()]).collect(),
            v: values.iter().map(|v| vec![0.0; v.len()]).collect(),
            step: 0,
        }
    } else {
        if opt.len() != total * 8 {
            return Err(TrainError::CorruptFile(format!(
                "{}: {} bytes",
                path.display(),
                opt.len()
            )));
        }
        let split = |base: usize| -> Vec<Vec<f64>> {
            index
                .iter()
                .zip(&values)
                .map(|(e, v)| {
                    let at = base + e.byte_offset as usize;
                    read_f32(&opt[at..at + v.len() * 4])
                })
                .collect()
        };
        AdamState {
            m: split(0),
            v: split(total * 4),
            step: meta.adam_step,
        }
    };
    Ok(Checkpoint {
        config,
        vocab,
        index,
        values,
        adam,
        meta,
    })
}

impl Checkpoint {
    /// Copies the stored values into `model`, which must have the same parameter layout.
    pub fn restore(&self, model: &mut Model) -> Result<(), TrainError> {
        if model.config != self.config.model || model.store.len() != self.index.len() {
            return Err(TrainError::IncompatibleVersion(
                "model configuration differs from checkpoint".into(),
            ));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, e), v) in ids.into_iter().zip(&self.index).zip(&self.values) {
            let p = model.store.get(id);
            if p.name != e.name || p.value.shape() != e.shape.as_slice() {
                return Err(TrainError::IncompatibleVersion(format!(
                    "parameter {} {:?} vs stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.shape
                )));
            }
            model.store.set_values(id, v);
        }
        Ok(())
    }

    /// A fresh model with the stored weights.
    pub fn model(&self) -> Result<Model, TrainError> {
        let mut model = Model::new(
            self.config.model.clone(),
            Precision::F32,
            self.config.train.seed,
        )?;
        self.restore(&mut model)?;
        Ok(model)
    }
}
