//! Training loop: Adam with a stepped decay, gradient clipping, dropout and teacher forcing,
//! plus per-epoch dev evaluation and checkpointing.

mod checkpoint;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig, CheckpointMeta, IndexEntry,
    FORMAT_VERSION,
};
pub use optim::{clamp_gradients, clip_gradients, AdamState, ClipMode, BETA1, BETA2, EPSILON};

use crate::autodiff::{AutodiffError, Precision, Tape};
use crate::corpus::{AnnotationLevel, Dataset, SignSample, Split};
use crate::keypoints::{FeatureSequence, NormalizationMode, PartMask};
use crate::metrics::{MetricError, MetricReport, ReferenceSet, Sentence};
use crate::models::{
    pad_targets, Architecture, Ctx, Model, ModelConfig, ModelError, RecurrentConfig, SourceBatch,
    TransformerConfig, Vocabulary,
};
use crate::sampler::{augment, center_indices, derive_seed, rng_for, SamplerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleVersion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr0 * decay^floor(epoch / decay_every)`.
    #[default]
    Step,
    /// Linear warmup then inverse square root, per optimizer step.
    Noam,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "step" => Ok(Schedule::Step),
            "noam" | "warmup" => Ok(Schedule::Noam),
            _ => Err(format!("unknown schedule '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub clip_threshold: f64,
    pub clip_mode: ClipMode,
    /// Probability of dropping a unit.
    pub dropout_p: f64,
    pub batch_size: usize,
    pub frames_n: usize,
    pub augmentation_factor: usize,
    pub seed: u64,
    pub annotation_level: AnnotationLevel,
    /// Train on every reference sentence instead of the first one.
    pub all_sentences: bool,
    pub normalization: NormalizationMode,
    pub mask: PartMask,
    pub architecture: Architecture,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_decode_len: usize,
    /// Decode the dev split for metrics every this many epochs (and after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rec = RecurrentConfig::default();
        let tr = TransformerConfig::default();
        TrainConfig {
            epochs: 50,
            lr0: 0.001,
            decay_every: 20,
            decay: 0.5,
            schedule: Schedule::Step,
            warmup_steps: 4000,
            clip_threshold: 5.0,
            clip_mode: ClipMode::Norm,
            dropout_p: 0.8,
            batch_size: 32,
            frames_n: 50,
            augmentation_factor: 10,
            seed: 0,
            annotation_level: AnnotationLevel::Sentence,
            all_sentences: false,
            normalization: NormalizationMode::Object2D,
            mask: PartMask::FULL,
            architecture: Architecture::LuongGeneral,
            hidden_dim: rec.hidden_dim,
            embedding_dim: rec.embedding_dim,
            num_layers: rec.num_layers,
            d_model: tr.d_model,
            heads: tr.heads,
            d_ff: tr.d_ff,
            encoder_layers: tr.encoder_layers,
            decoder_layers: tr.decoder_layers,
            max_decode_len: 20,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("epochs", self.epochs),
            ("decay_every", self.decay_every),
            ("batch_size", self.batch_size),
            ("frames_n", self.frames_n),
            ("augmentation_factor", self.augmentation_factor),
            ("warmup_steps", self.warmup_steps),
            ("max_decode_len", self.max_decode_len),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::InvalidConfig(format!(
                "{name} must be positive"
            )));
        }
        if !(self.lr0 > 0.0 && self.decay > 0.0 && self.clip_threshold > 0.0) {
            return Err(TrainError::InvalidConfig(
                "lr0, decay and clip_threshold must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TrainError::InvalidConfig(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            input_dim,
            vocab_size,
            recurrent: RecurrentConfig {
                hidden_dim: self.hidden_dim,
                embedding_dim: self.embedding_dim,
                num_layers: self.num_layers,
            },
            transformer: TransformerConfig {
                d_model: self.d_model,
                heads: self.heads,
                d_ff: self.d_ff,
                encoder_layers: self.encoder_layers,
                decoder_layers: self.decoder_layers,
            },
        }
    }

    /// Learning rate for 0-based `epoch`; `step` is the 1-based optimizer step (noam only).
    pub fn learning_rate(&self, epoch: usize, step: u64) -> f64 {
        match self.schedule {
            Schedule::Step => lr_schedule(self.lr0, self.decay, self.decay_every, epoch),
            Schedule::Noam => {
                let s = step.max(1) as f64;
                let w = self.warmup_steps as f64;
                self.lr0 * (s / w).min((w / s).sqrt())
            }
        }
    }
}

pub fn lr_schedule(lr0: f64, decay: f64, decay_every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / decay_every.max(1)) as i32)
}

/// One fixed-length source with its target ids (ending in `EOS`).
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureSequence,
    pub target: Vec<usize>,
}

/// Stable per-video key for the augmentation seed.
pub fn video_key(video_id: &str) -> u64 {
    crc32fast::hash(video_id.as_bytes()) as u64
}

/// Randomly sampled training copies of every sample, `augmentation_factor` each.
pub fn training_examples(
    samples: &[&SignSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<Example>, TrainError> {
    let master = derive_seed(cfg.seed, &[12]);
    let mut out = Vec::new();
    for s in samples {
        let targets: Vec<Vec<usize>> =
            if cfg.all_sentences && cfg.annotation_level == AnnotationLevel::Sentence {
                s.references
                    .references()
                    .iter()
                    .map(|r| vocab.encode_target(r))
                    .collect()
            } else {
                vec![s.target.clone()]
            };
        for features in augment(
            &s.features,
            cfg.augmentation_factor,
            cfg.frames_n,
            master,
            video_key(&s.video_id),
        )? {
            for target in &targets {
                out.push(Example {
                    features: features.clone(),
                    target: target.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Deterministic evaluation copy of a sample.
pub fn eval_example(sample: &SignSample, frames_n: usize) -> Example {
    let idx = center_indices(sample.features.len(), frames_n);
    Example {
        features: sample.features.select(&idx),
        target: sample.target.clone(),
    }
}

fn batch_of(examples: &[&Example]) -> Result<(SourceBatch, Vec<Vec<usize>>), TrainError> {
    let feats: Vec<&FeatureSequence> = examples.iter().map(|e| &e.features).collect();
    let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok((SourceBatch::new(&feats)?, pad_targets(&targets)))
}

/// One pass over `examples` in a seed- and epoch-determined order. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !adam.matches(&model.store) {
        *adam = AdamState::new(&model.store);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[10, epoch as u64]));
    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let picked: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let (src, targets) = batch_of(&picked)?;
        let tape = Tape::new();
        let loss = {
            let seed = derive_seed(cfg.seed, &[11, epoch as u64, b as u64]);
            let ctx = Ctx::new(&tape, &model.store, true, cfg.dropout_p, seed);
            model.loss(&ctx, &src, &targets)?
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: b,
                loss: value,
            });
        }
        tape.backward(loss, &mut model.store)?;
        match cfg.clip_mode {
            ClipMode::Norm => {
                clip_gradients(&mut model.store, cfg.clip_threshold);
            }
            ClipMode::Value => {
                clamp_gradients(&mut model.store, cfg.clip_threshold);
            }
        }
        let lr = cfg.learning_rate(epoch, adam.step + 1);
        adam.step(&mut model.store, lr);
        model.store.zero_grad();
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Mean teacher-forced loss without dropout.
pub fn evaluate_loss(
    model: &Model,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (src, targets) = batch_of(chunk)?;
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &model.store);
        total += model.loss(&ctx, &src, &targets)?.item();
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Greedy translations of `examples`, as token strings.
pub fn translate_examples(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Sentence>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let feats: Vec<&FeatureSequence> = chunk.iter().map(|e| &e.features).collect();
        for h in model.translate(&SourceBatch::new(&feats)?, max_len)? {
            out.push(vocab.decode(&h.tokens));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: Split,
    pub loss: f64,
    /// Absent when the split has fewer than two samples.
    pub metrics: Option<MetricReport>,
    #[serde(skip)]
    pub hypotheses: Vec<Sentence>,
}

/// Loss and metrics on `samples` using center-sampled frames.
pub fn evaluate_samples(
    model: &Model,
    vocab: &Vocabulary,
    samples: &[&SignSample],
    split: Split,
    cfg: &TrainConfig,
) -> Result<SplitEvaluation, TrainError> {
    let examples: Vec<Example> = samples
        .iter()
        .map(|s| eval_example(s, cfg.frames_n))
        .collect();
    let loss = evaluate_loss(model, &examples, cfg.batch_size)?;
    let hypotheses =
        translate_examples(model, vocab, &examples, cfg.batch_size, cfg.max_decode_len)?;
    let refs: Vec<ReferenceSet> = samples.iter().map(|s| s.references.clone()).collect();
    let metrics = if samples.len() >= 2 {
        Some(MetricReport::compute(&hypotheses, &refs)?)
    } else {
        None
    };
    Ok(SplitEvaluation {
        split,
        loss,
        metrics,
        hypotheses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_metrics: Option<MetricReport>,
    /// CRC-32 of the parameters after the epoch.
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_loss: Option<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// A trained model with its vocabulary and report.
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocabulary,
    pub adam: AdamState,
    pub report: TrainReport,
}

fn params_checksum(model: &Model) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in model.store.iter() {
        for &v in p.value.data() {
            h.update(&(v as f32).to_le_bytes());
        }
    }
    h.finalize()
}

/// Trains on the train split of `data` for `cfg.epochs` epochs, evaluating on dev after each.
///
/// With `out_dir`, writes `report.jsonl`, `last/` after every epoch and `best/` whenever
/// the dev loss improves. With `resume`, continues from that checkpoint's epoch.
pub fn fit(
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train: Vec<&SignSample> = data.split(Split::Train);
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let dev: Vec<&SignSample> = data.split(Split::Dev);
    let model_cfg = cfg.model_config(data.feature_dim(), data.vocab.len());
    let mut model = Model::new(model_cfg, Precision::F32, cfg.seed)?;
    let mut adam = AdamState::new(&model.store);
    let (mut start, mut best) = (0, None);
    if let Some(ck) = resume {
        if ck.vocab != data.vocab {
            return Err(TrainError::IncompatibleVersion(
                "vocabulary differs from checkpoint".into(),
            ));
        }
        ck.restore(&mut model)?;
        adam = ck.adam.clone();
        start = ck.meta.epoch;
        best = ck.meta.best_dev_loss;
    }

    let examples = training_examples(&train, &data.vocab, cfg)?;
    let dev_examples: Vec<Example> = dev.iter().map(|s| eval_example(s, cfg.frames_n)).collect();
    let mut report_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let path = dir.join("report.jsonl");
            let file = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            };
            Some((
                file.map_err(|source| TrainError::Io {
                    path: path.clone(),
                    source,
                })?,
                path,
            ))
        }
        None => None,
    };

    let mut report = TrainReport {
        records: Vec::new(),
        best_epoch: None,
        best_dev_loss: best,
    };
    for epoch in start..cfg.epochs {
        let lr = cfg.learning_rate(epoch, adam.step + 1);
        let train_loss = train_epoch(&mut model, &examples, cfg, &mut adam, epoch)?;
        let dev_loss = if dev_examples.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, &dev_examples, cfg.batch_size)?)
        };
        let last = epoch + 1 == cfg.epochs;
        let dev_metrics = if dev.len() >= 2 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            evaluate_samples(&model, &data.vocab, &dev, Split::Dev, cfg)?.metrics
        } else {
            None
        };
        let selection = dev_loss.unwrap_or(train_loss);
        let improved = best.is_none_or(|b| selection < b);
        if improved {
            best = Some(selection);
            report.best_epoch = Some(epoch);
            report.best_dev_loss = best;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            dev_loss,
            dev_metrics,
            checksum: params_checksum(&model),
        };
        if let Some(dir) = out_dir {
            save_checkpoint(
                &dir.join("last"),
                cfg,
                &model,
                &data.vocab,
                &adam,
                epoch + 1,
                best,
            )?;
            if improved {
                save_checkpoint(
                    &dir.join("best"),
                    cfg,
                    &model,
                    &data.vocab,
                    &adam,
                    epoch + 1,
                    best,
                )?;
            }
        }
        if let Some((file, path)) = report_file.as_mut() {
            let line = serde_json::to_string(&record).expect("plain data");
            writeln!(file, "{line}").map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        report.records.push(record);
    }
    Ok(TrainOutcome {
        model,
        vocab: data.vocab.clone(),
        adam,
        report,
    })
}
