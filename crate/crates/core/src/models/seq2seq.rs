use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend, AttentionKind, AttentionLayer, EncodedKeys};
use super::gru::GruStack;
use super::{Ctx, ModelError, SourceBatch};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Depth of both the encoder and the decoder stack.
    pub num_layers: usize,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        RecurrentConfig {
            hidden_dim: 256,
            embedding_dim: 256,
            num_layers: 2,
        }
    }
}

/// GRU encoder-decoder. The decoder stack starts from the encoder's final per-layer
/// states for every attention kind.
///
/// * `None`: no attention, the final state is the only link between the two stacks.
/// * `Bahdanau`: context from the previous decoder state, concatenated with the embedding.
/// * Luong kinds: context from the new decoder state, merged by `tanh(W_c [s; c] + b_c)`.
#[derive(Debug, Clone)]
pub struct RecurrentModel {
    pub kind: AttentionKind,
    pub config: RecurrentConfig,
    pub vocab_size: usize,
    encoder: GruStack,
    decoder: GruStack,
    embedding: ParamId,
    attention: Option<AttentionLayer>,
    combine: Option<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

pub struct EncoderOutput<'t> {
    /// Top-layer states `[B, T_x, H]`.
    pub states: Var<'t>,
    /// Final state of each layer, `[B, H]`; the last one is the vanilla context vector.
    pub finals: Vec<Var<'t>>,
    keys: Option<EncodedKeys<'t>>,
}

impl<'t> EncoderOutput<'t> {
    pub fn context(&self) -> Var<'t> {
        *self.finals.last().expect("at least one layer")
    }
}

/// Decoder state carried between greedy steps, detached from any tape.
pub struct InferenceState {
    states: Tensor,
    hidden: Vec<Tensor>,
}

impl RecurrentModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &RecurrentConfig,
        kind: AttentionKind,
        input_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if cfg.embedding_dim == 0 || vocab_size == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embedding_dim={}, vocab_size={vocab_size}",
                cfg.embedding_dim
            )));
        }
        let h = cfg.hidden_dim;
        let encoder = GruStack::new(store, "encoder", input_dim, h, cfg.num_layers, rng)?;
        let dec_in = match kind {
            AttentionKind::Bahdanau => cfg.embedding_dim + h,
            _ => cfg.embedding_dim,
        };
        let decoder = GruStack::new(store, "decoder", dec_in, h, cfg.num_layers, rng)?;
        let embedding =
            store.add_embedding("decoder.embedding", vocab_size, cfg.embedding_dim, rng)?;
        let attention = match kind {
            AttentionKind::None => None,
            k => Some(AttentionLayer::new(store, "attention", k, h, rng)?),
        };
        let combine = if kind.is_luong() {
            Some((
                store.add_matrix("attention.W_c", 2 * h, h, rng)?,
                store.add_bias("attention.b_c", h)?,
            ))
        } else {
            None
        };
        let out_w = store.add_matrix("output.W", h, vocab_size, rng)?;
        let out_b = store.add_bias("output.b", vocab_size)?;
        Ok(RecurrentModel {
            kind,
            config: cfg.clone(),
            vocab_size,
            encoder,
            decoder,
            embedding,
            attention,
            combine,
            out_w,
            out_b,
        })
    }

    pub fn encode<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        src: &SourceBatch,
    ) -> Result<EncoderOutput<'t>, ModelError> {
        if src.steps() == 0 {
            return Err(ModelError::EmptySequence);
        }
        let mut state = self.encoder.zero_state(ctx, src.batch());
        let mut tops = Vec::with_capacity(src.steps());
        for t in 0..src.steps() {
            let x = ctx.constant(src.step(t));
            state = self.encoder.step(ctx, &x, &state)?;
            tops.push(*state.last().expect("non-empty stack"));
        }
        let states = Var::stack(&tops)?;
        let keys = match &self.attention {
            Some(att) => Some(att.keys(ctx, states)?),
            None => None,
        };
        Ok(EncoderOutput {
            states,
            finals: state,
            keys,
        })
    }

    /// One decoder step. Returns logits `[B, V]` and the new per-layer states.
    pub fn decode_step<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        prev: &[usize],
        state: &[Var<'t>],
        enc: &EncoderOutput<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), ModelError> {
        let pre = self.pre_logit_step(ctx, prev, state, enc)?;
        let logits = ctx.linear(&ctx.dropout(&pre.0)?, self.out_w, self.out_b)?;
        Ok((logits, pre.1))
    }

    fn pre_logit_step<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        prev: &[usize],
        state: &[Var<'t>],
        enc: &EncoderOutput<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), ModelError> {
        let embedded = ctx.dropout(&ctx.p(self.embedding).embedding(prev)?)?;
        let input = match (self.kind, &self.attention, &enc.keys) {
            (AttentionKind::Bahdanau, Some(att), Some(keys)) => {
                let (context, _) = attend(ctx, att, state.last().expect("non-empty stack"), keys)?;
                Var::concat(&[embedded, context])?
            }
            _ => embedded,
        };
        let next = self.decoder.step(ctx, &input, state)?;
        let top = *next.last().expect("non-empty stack");
        let out = match (&self.attention, &enc.keys, self.combine) {
            (Some(att), Some(keys), Some((w_c, b_c))) => {
                let (context, _) = attend(ctx, att, &top, keys)?;
                ctx.linear(&Var::concat(&[top, context])?, w_c, b_c)?.tanh()
            }
            _ => top,
        };
        Ok((out, next))
    }

    /// Teacher-forced logits `[B * T_y, V]`, batch-major.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        src: &SourceBatch,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        let steps = check_targets(tgt_in, src.batch())?;
        let enc = self.encode(ctx, src)?;
        let mut state = enc.finals.clone();
        let mut outs = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev: Vec<usize> = tgt_in.iter().map(|row| row[i]).collect();
            let (out, next) = self.pre_logit_step(ctx, &prev, &state, &enc)?;
            outs.push(out);
            state = next;
        }
        let hidden = self.config.hidden_dim;
        let stacked = ctx.dropout(&Var::stack(&outs)?.reshape(&[src.batch() * steps, hidden])?)?;
        Ok(ctx.linear(&stacked, self.out_w, self.out_b)?)
    }

    pub fn begin(
        &self,
        store: &ParamStore,
        src: &SourceBatch,
    ) -> Result<InferenceState, ModelError> {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, store);
        let enc = self.encode(&ctx, src)?;
        let hidden = enc.finals.iter().map(|v| v.value().clone()).collect();
        let states = enc.states.value().clone();
        Ok(InferenceState { states, hidden })
    }

    pub fn next_logits(
        &self,
        store: &ParamStore,
        state: &mut InferenceState,
        prev: &[usize],
    ) -> Result<Tensor, ModelError> {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, store);
        let states = ctx.constant(state.states.clone());
        let keys = match &self.attention {
            Some(att) => Some(att.keys(&ctx, states)?),
            None => None,
        };
        let finals: Vec<Var> = state
            .hidden
            .iter()
            .map(|t| ctx.constant(t.clone()))
            .collect();
        let enc = EncoderOutput {
            states,
            finals: finals.clone(),
            keys,
        };
        let (logits, next) = self.decode_step(&ctx, prev, &finals, &enc)?;
        state.hidden = next.iter().map(|v| v.value().clone()).collect();
        let out = logits.value().clone();
        Ok(out)
    }
}

/// All target rows must share one non-zero length; returns it.
pub(super) fn check_targets(tgt_in: &[Vec<usize>], batch: usize) -> Result<usize, ModelError> {
    let steps = tgt_in.first().map_or(0, Vec::len);
    if tgt_in.len() != batch || steps == 0 || tgt_in.iter().any(|r| r.len() != steps) {
        return Err(ModelError::InvalidConfig(format!(
            "decoder inputs must be {batch} rows of equal non-zero length"
        )));
    }
    Ok(steps)
}
