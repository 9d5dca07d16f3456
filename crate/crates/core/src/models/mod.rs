//! Encoder-decoder translation models over feature sequences.
//!
//! Four families share one interface: a vanilla GRU encoder-decoder, GRU with
//! Bahdanau (context-before-cell) attention, GRU with Luong
//! (context-after-cell) attention under three scoring functions, and a
//! Transformer. [`Model`] owns the parameters; [`Ctx`] carries the tape,
//! training flag and dropout randomness for one forward pass.

mod attention;
mod decode;
mod gru;
mod seq2seq;
mod transformer;
mod vocab;

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    grad_check, AutodiffError, GradCheckReport, ParamId, ParamStore, Precision, Tape, Tensor, Var,
};
use crate::keypoints::FeatureSequence;

pub use attention::{attend, attention_score, AttentionKind, AttentionLayer, EncodedKeys};
pub use decode::{greedy_translate, StepDecoder, TranslationHypothesis};
pub use gru::{GruCell, GruStack};
pub use seq2seq::{EncoderOutput, RecurrentConfig, RecurrentModel};
pub use transformer::{
    positional_encoding, MultiHeadAttention, TransformerConfig, TransformerModel,
};
pub use vocab::{Vocabulary, EOS, PAD, SOS, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("positional encoding needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Per-pass forward context.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub training: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(
        tape: &'t Tape,
        store: &'s ParamStore,
        training: bool,
        dropout: f64,
        seed: u64,
    ) -> Self {
        Ctx {
            tape,
            store,
            training,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Deterministic inference context: no dropout.
    pub fn eval(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx::new(tape, store, false, 0.0, 0)
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&self, x: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.dropout(self.dropout, self.training, &mut *self.rng.borrow_mut())
    }

    /// `x · W + b`.
    pub fn linear(&self, x: &Var<'t>, w: ParamId, b: ParamId) -> Result<Var<'t>, AutodiffError> {
        x.matmul(&self.p(w))?.add_bias(&self.p(b))
    }
}

/// A batch of equal-length feature sequences, stored `[B, T, F]`.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub data: Tensor,
}

impl SourceBatch {
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self, ModelError> {
        let first = seqs.first().ok_or(ModelError::EmptySequence)?;
        let (steps, dim) = (first.len(), first.dim());
        if steps == 0 || dim == 0 {
            return Err(ModelError::EmptySequence);
        }
        let mut data = Vec::with_capacity(seqs.len() * steps * dim);
        for s in seqs {
            if s.len() != steps || s.dim() != dim {
                return Err(AutodiffError::ShapeMismatch {
                    op: "source_batch",
                    detail: format!("sequence {}x{} vs {}x{}", s.len(), s.dim(), steps, dim),
                }
                .into());
            }
            for f in &s.frames {
                data.extend_from_slice(&f.values);
            }
        }
        Ok(SourceBatch {
            data: Tensor::new(vec![seqs.len(), steps, dim], data)?,
        })
    }

    pub fn from_tensor(data: Tensor) -> Result<Self, ModelError> {
        if data.shape().len() != 3 {
            return Err(ModelError::InvalidConfig(format!(
                "source must be [B, T, F], got {:?}",
                data.shape()
            )));
        }
        Ok(SourceBatch { data })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Frame `t` of every sequence: `[B, F]`.
    pub fn step(&self, t: usize) -> Tensor {
        let (b, steps, f) = (self.batch(), self.steps(), self.dim());
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            let at = (i * steps + t) * f;
            out.extend_from_slice(&self.data.data()[at..at + f]);
        }
        Tensor::new(vec![b, f], out).expect("non-empty batch")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(alias = "none")]
    Vanilla,
    Bahdanau,
    LuongDot,
    LuongGeneral,
    LuongConcat,
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Vanilla,
        Architecture::Bahdanau,
        Architecture::LuongDot,
        Architecture::LuongGeneral,
        Architecture::LuongConcat,
        Architecture::Transformer,
    ];

    /// Attention used by the recurrent families; `None` for the Transformer.
    pub fn attention(self) -> Option<AttentionKind> {
        match self {
            Architecture::Vanilla => Some(AttentionKind::None),
            Architecture::Bahdanau => Some(AttentionKind::Bahdanau),
            Architecture::LuongDot => Some(AttentionKind::LuongDot),
            Architecture::LuongGeneral => Some(AttentionKind::LuongGeneral),
            Architecture::LuongConcat => Some(AttentionKind::LuongConcat),
            Architecture::Transformer => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Vanilla => "vanilla",
            Architecture::Bahdanau => "bahdanau",
            Architecture::LuongDot => "luong_dot",
            Architecture::LuongGeneral => "luong_general",
            Architecture::LuongConcat => "luong_concat",
            Architecture::Transformer => "transformer",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "none" | "vanilla" | "seq2seq" => Ok(Architecture::Vanilla),
            "bahdanau" => Ok(Architecture::Bahdanau),
            "luong_dot" | "dot" => Ok(Architecture::LuongDot),
            "luong_general" | "luong" | "general" => Ok(Architecture::LuongGeneral),
            "luong_concat" | "concat" => Ok(Architecture::LuongConcat),
            "transformer" => Ok(Architecture::Transformer),
            _ => Err(format!("unknown architecture '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub vocab_size: usize,
    pub recurrent: RecurrentConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, input_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            input_dim,
            vocab_size,
            recurrent: RecurrentConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }

    /// Tiny dimensions for gradient checks.
    pub fn tiny(architecture: Architecture, input_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            input_dim,
            vocab_size,
            recurrent: RecurrentConfig {
                hidden_dim: 8,
                embedding_dim: 8,
                num_layers: 2,
            },
            transformer: TransformerConfig {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                encoder_layers: 2,
                decoder_layers: 2,
            },
        }
    }
}

enum Net {
    Recurrent(RecurrentModel),
    Transformer(TransformerModel),
}

/// A translation model together with its parameters.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Net,
}

impl Model {
    pub fn new(config: ModelConfig, precision: Precision, seed: u64) -> Result<Self, ModelError> {
        let mut store = ParamStore::new(precision);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match config.architecture.attention() {
            Some(kind) => Net::Recurrent(RecurrentModel::new(
                &mut store,
                &config.recurrent,
                kind,
                config.input_dim,
                config.vocab_size,
                &mut rng,
            )?),
            None => Net::Transformer(TransformerModel::new(
                &mut store,
                &config.transformer,
                config.input_dim,
                config.vocab_size,
                &mut rng,
            )?),
        };
        Ok(Model { config, store, net })
    }

    pub fn recurrent(&self) -> Option<&RecurrentModel> {
        match &self.net {
            Net::Recurrent(m) => Some(m),
            Net::Transformer(_) => None,
        }
    }

    pub fn transformer(&self) -> Option<&TransformerModel> {
        match &self.net {
            Net::Transformer(m) => Some(m),
            Net::Recurrent(_) => None,
        }
    }

    /// Teacher-forced logits `[B * T_y, V]` (batch-major) for decoder inputs `tgt_in`
    /// (each row starts with `SOS`; all rows the same length).
    pub fn forward_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        src: &SourceBatch,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        match &self.net {
            Net::Recurrent(m) => m.forward(ctx, src, tgt_in),
            Net::Transformer(m) => m.forward(ctx, src, tgt_in),
        }
    }

    /// Mean cross-entropy of `targets` under teacher forcing, pad positions excluded.
    /// `targets[b]` ends with `EOS` and is padded with `PAD`.
    pub fn loss<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        src: &SourceBatch,
        targets: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        let tgt_in: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                std::iter::once(SOS)
                    .chain(t[..t.len() - 1].iter().copied())
                    .collect()
            })
            .collect();
        let logits = self.forward_logits(ctx, src, &tgt_in)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        Ok(logits.cross_entropy(&flat, PAD)?)
    }

    pub fn translate(
        &self,
        src: &SourceBatch,
        max_len: usize,
    ) -> Result<Vec<TranslationHypothesis>, ModelError> {
        greedy_translate(self, src, max_len)
    }
}

/// Inference state for [`Model`]'s step decoder.
pub enum ModelState {
    Recurrent(seq2seq::InferenceState),
    Transformer(transformer::InferenceState),
}

impl StepDecoder for Model {
    type State = ModelState;

    fn begin(&self, src: &SourceBatch) -> Result<ModelState, ModelError> {
        match &self.net {
            Net::Recurrent(m) => Ok(ModelState::Recurrent(m.begin(&self.store, src)?)),
            Net::Transformer(m) => Ok(ModelState::Transformer(m.begin(&self.store, src)?)),
        }
    }

    fn next_logits(&self, state: &mut ModelState, prev: &[usize]) -> Result<Tensor, ModelError> {
        match (&self.net, state) {
            (Net::Recurrent(m), ModelState::Recurrent(s)) => m.next_logits(&self.store, s, prev),
            (Net::Transformer(m), ModelState::Transformer(s)) => {
                m.next_logits(&self.store, s, prev)
            }
            _ => Err(ModelError::InvalidConfig(
                "decoder state does not match model".into(),
            )),
        }
    }
}

/// Pads each target (already ending in `EOS`) to the batch maximum with `PAD`.
pub fn pad_targets(targets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let max = targets.iter().map(Vec::len).max().unwrap_or(0);
    targets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.resize(max, PAD);
            t
        })
        .collect()
}

/// Central-difference check of the full teacher-forced loss of a tiny `arch` model
/// (hidden 8, vocabulary 7, four source steps, three target steps) at 64-bit precision.
pub fn check_architecture(arch: Architecture, seed: u64) -> Result<GradCheckReport, ModelError> {
    const FEATURES: usize = 6;
    let mut model = Model::new(ModelConfig::tiny(arch, FEATURES, 7), Precision::F64, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = (0..2 * 4 * FEATURES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let src = SourceBatch::from_tensor(Tensor::new(vec![2, 4, FEATURES], data)?)?;
    let targets = pad_targets(&[vec![4, 5, EOS], vec![6, EOS]]);
    let mut store = std::mem::replace(&mut model.store, ParamStore::new(Precision::F64));
    let report = grad_check(&mut store, 1e-5, |tape, store| {
        let ctx = Ctx::eval(tape, store);
        model.loss(&ctx, &src, &targets).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => AutodiffError::ShapeMismatch {
                op: "model",
                detail: other.to_string(),
            },
        })
    })?;
    model.store = store;
    Ok(report)
}
