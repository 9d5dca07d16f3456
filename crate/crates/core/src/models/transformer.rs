use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seq2seq::check_targets;
use super::{Ctx, ModelError, SourceBatch};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            encoder_layers: 2,
            decoder_layers: 2,
        }
    }
}

/// Sinusoidal table `[steps, dim]`: `sin(pos / 10000^(2i/d))` in even columns, `cos` in odd ones.
pub fn positional_encoding(steps: usize, dim: usize) -> Result<Tensor, ModelError> {
    if !dim.is_multiple_of(2) {
        return Err(ModelError::OddDimension(dim));
    }
    if steps == 0 {
        return Err(ModelError::EmptySequence);
    }
    let mut data = vec![0.0; steps * dim];
    for pos in 0..steps {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![steps, dim], data)?)
}

fn add_positions<'t>(ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>, ModelError> {
    let shape = x.shape();
    let pe = positional_encoding(shape[1], shape[2])?;
    let tiled = pe.data().repeat(shape[0]);
    Ok(x.add(&ctx.constant(Tensor::new(shape, tiled)?))?)
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(Dense {
            w: store.add_matrix(format!("{name}.W"), fan_in, fan_out, rng)?,
            b: store.add_bias(format!("{name}.b"), fan_out)?,
        })
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        ctx.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, AutodiffError> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0))?,
            bias: store.add_bias(format!("{name}.bias"), dim)?,
        })
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.layer_norm(&ctx.p(self.gain), &ctx.p(self.bias))
    }
}

/// Scaled dot-product attention over `heads` slices of `d_model`, followed by an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    query: Dense,
    key: Dense,
    value: Dense,
    output: Dense,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            d_model,
            query: Dense::new(store, &format!("{prefix}.query"), d_model, d_model, rng)?,
            key: Dense::new(store, &format!("{prefix}.key"), d_model, d_model, rng)?,
            value: Dense::new(store, &format!("{prefix}.value"), d_model, d_model, rng)?,
            output: Dense::new(store, &format!("{prefix}.output"), d_model, d_model, rng)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `query` is `[B, T_q, D]`, `memory` is `[B, T_k, D]`. With `causal`, position `i`
    /// only sees memory positions `≤ i`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        query: &Var<'t>,
        memory: &Var<'t>,
        causal: bool,
    ) -> Result<Var<'t>, AutodiffError> {
        let (qs, ks) = (query.shape(), memory.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("query {qs:?}, memory {ks:?}"),
            });
        }
        let (batch, tq, tk) = (qs[0], qs[1], ks[1]);
        let dk = self.head_dim();
        let q = self.query.apply(ctx, query)?;
        let k = self.key.apply(ctx, memory)?;
        let v = self.value.apply(ctx, memory)?;
        let mask: Option<Vec<bool>> = causal.then(|| {
            (0..batch * tq * tk)
                .map(|n| (n % tk) > (n / tk) % tq)
                .collect()
        });
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_last(h * dk, dk)?;
            let kh = k.slice_last(h * dk, dk)?;
            let vh = v.slice_last(h * dk, dk)?;
            let mut scores = qh.bmm(&kh.transpose()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.masked_fill(m, f64::NEG_INFINITY)?;
            }
            outs.push(scores.softmax().bmm(&vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat(&outs)?
        };
        self.output.apply(ctx, &merged)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    inner: Dense,
    outer: Dense,
}

impl FeedForward {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.outer.apply(ctx, &self.inner.apply(ctx, x)?.relu())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    norm1: Norm,
    cross_attention: MultiHeadAttention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

/// Post-norm encoder-decoder Transformer. Source frames enter through a learned linear
/// projection; target tokens through an embedding scaled by `√d_model`.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    source_projection: Dense,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Dense,
}

/// Encoder memory plus the tokens decoded so far for each row.
pub struct InferenceState {
    memory: Tensor,
    prefix: Vec<Vec<usize>>,
}

impl TransformerModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &TransformerConfig,
        input_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let d = cfg.d_model;
        if d == 0 || cfg.d_ff == 0 || input_dim == 0 || vocab_size == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{cfg:?}, input {input_dim}, vocab {vocab_size}"
            )));
        }
        if !d.is_multiple_of(2) {
            return Err(ModelError::OddDimension(d));
        }
        let ff = |store: &mut ParamStore,
                  name: &str,
                  rng: &mut R|
         -> Result<FeedForward, AutodiffError> {
            Ok(FeedForward {
                inner: Dense::new(store, &format!("{name}.inner"), d, cfg.d_ff, rng)?,
                outer: Dense::new(store, &format!("{name}.outer"), cfg.d_ff, d, rng)?,
            })
        };
        let source_projection = Dense::new(store, "source_projection", input_dim, d, rng)?;
        let embedding = store.add_embedding("decoder.embedding", vocab_size, d, rng)?;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let p = format!("encoder.layer{i}");
            encoder.push(EncoderLayer {
                attention: MultiHeadAttention::new(
                    store,
                    &format!("{p}.self_attention"),
                    d,
                    cfg.heads,
                    rng,
                )?,
                norm1: Norm::new(store, &format!("{p}.norm1"), d)?,
                ff: ff(store, &format!("{p}.ff"), rng)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("decoder.layer{i}");
            decoder.push(DecoderLayer {
                self_attention: MultiHeadAttention::new(
                    store,
                    &format!("{p}.self_attention"),
                    d,
                    cfg.heads,
                    rng,
                )?,
                norm1: Norm::new(store, &format!("{p}.norm1"), d)?,
                cross_attention: MultiHeadAttention::new(
                    store,
                    &format!("{p}.cross_attention"),
                    d,
                    cfg.heads,
                    rng,
                )?,
                norm2: Norm::new(store, &format!("{p}.norm2"), d)?,
                ff: ff(store, &format!("{p}.ff"), rng)?,
                norm3: Norm::new(store, &format!("{p}.norm3"), d)?,
            });
        }
        let output = Dense::new(store, "output", d, vocab_size, rng)?;
        Ok(TransformerModel {
            config: cfg.clone(),
            vocab_size,
            source_projection,
            embedding,
            encoder,
            decoder,
            output,
        })
    }

    /// Encoder memory `[B, T_x, D]`.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, src: &SourceBatch) -> Result<Var<'t>, ModelError> {
        let x = self
            .source_projection
            .apply(ctx, &ctx.constant(src.data.clone()))?;
        let mut x = ctx.dropout(&add_positions(ctx, &x)?)?;
        for layer in &self.encoder {
            let a = ctx.dropout(&layer.attention.forward(ctx, &x, &x, false)?)?;
            x = layer.norm1.apply(ctx, &x.add(&a)?)?;
            let f = ctx.dropout(&layer.ff.apply(ctx, &x)?)?;
            x = layer.norm2.apply(ctx, &x.add(&f)?)?;
        }
        Ok(x)
    }

    /// Logits `[B, T_y, V]` for every target position.
    pub fn decode<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        memory: &Var<'t>,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        let batch = memory.shape()[0];
        let steps = check_targets(tgt_in, batch)?;
        let d = self.config.d_model;
        let ids: Vec<usize> = tgt_in.iter().flatten().copied().collect();
        let embedded = ctx
            .p(self.embedding)
            .embedding(&ids)?
            .scale((d as f64).sqrt())
            .reshape(&[batch, steps, d])?;
        let mut x = ctx.dropout(&add_positions(ctx, &embedded)?)?;
        for layer in &self.decoder {
            let a = ctx.dropout(&layer.self_attention.forward(ctx, &x, &x, true)?)?;
            x = layer.norm1.apply(ctx, &x.add(&a)?)?;
            let c = ctx.dropout(&layer.cross_attention.forward(ctx, &x, memory, false)?)?;
            x = layer.norm2.apply(ctx, &x.add(&c)?)?;
            let f = ctx.dropout(&layer.ff.apply(ctx, &x)?)?;
            x = layer.norm3.apply(ctx, &x.add(&f)?)?;
        }
        Ok(self.output.apply(ctx, &x)?)
    }

    /// Teacher-forced logits `[B * T_y, V]`, batch-major.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        src: &SourceBatch,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var<'t>, ModelError> {
        let memory = self.encode(ctx, src)?;
        let logits = self.decode(ctx, &memory, tgt_in)?;
        let s = logits.shape();
        Ok(logits.reshape(&[s[0] * s[1], s[2]])?)
    }

    pub fn begin(
        &self,
        store: &ParamStore,
        src: &SourceBatch,
    ) -> Result<InferenceState, ModelError> {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, store);
        let memory = self.encode(&ctx, src)?.value().clone();
        Ok(InferenceState {
            memory,
            prefix: vec![Vec::new(); src.batch()],
        })
    }

    /// Re-runs the decoder over the whole prefix and returns the last position's logits.
    pub fn next_logits(
        &self,
        store: &ParamStore,
        state: &mut InferenceState,
        prev: &[usize],
    ) -> Result<Tensor, ModelError> {
        if prev.len() != state.prefix.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} previous tokens for {} rows",
                prev.len(),
                state.prefix.len()
            )));
        }
        for (row, &tok) in state.prefix.iter_mut().zip(prev) {
            row.push(tok);
        }
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, store);
        let memory = ctx.constant(state.memory.clone());
        let logits = self.decode(&ctx, &memory, &state.prefix)?;
        let value = logits.value();
        let (steps, vocab) = (value.shape()[1], value.shape()[2]);
        let mut out = Vec::with_capacity(prev.len() * vocab);
        for b in 0..prev.len() {
            let at = (b * steps + steps - 1) * vocab;
            out.extend_from_slice(&value.data()[at..at + vocab]);
        }
        Ok(Tensor::new(vec![prev.len(), vocab], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_rows() {
        let pe = positional_encoding(7, 256).unwrap();
        assert_eq!(pe.shape(), &[7, 256]);
        for (c, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.row(1)[0] - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            positional_encoding(3, 5),
            Err(ModelError::OddDimension(5))
        ));
    }

    #[test]
    fn head_dim() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, "m", 256, 8, &mut rng).unwrap();
        assert_eq!(mha.head_dim(), 32);
        assert!(MultiHeadAttention::new(&mut store, "n", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn single_position_identity_returns_value_row() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, "m", 3, 1, &mut rng).unwrap();
        for part in ["query", "key", "value", "output"] {
            let w = store.find(&format!("m.{part}.W")).unwrap();
            store.set_values(w, Tensor::identity(3).data());
        }
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &store);
        let q = ctx.constant(Tensor::new(vec![1, 1, 3], vec![9.0, -3.0, 0.5]).unwrap());
        let kv = ctx.constant(Tensor::new(vec![1, 1, 3], vec![0.25, 1.0, -2.0]).unwrap());
        let out = mha.forward(&ctx, &q, &kv, false).unwrap();
        assert_eq!(out.value().data(), &[0.25, 1.0, -2.0]);
    }

    #[test]
    fn causal_self_attention_ignores_future() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "m", 4, 2, &mut rng).unwrap();
        let base: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |data: Vec<f64>| {
            let tape = Tape::inference();
            let ctx = Ctx::eval(&tape, &store);
            let x = ctx.constant(Tensor::new(vec![1, 5, 4], data).unwrap());
            let out = mha.forward(&ctx, &x, &x, true).unwrap().value().clone();
            out
        };
        let reference = run(base.clone());
        for j in 1..5 {
            let mut perturbed = base.clone();
            for v in &mut perturbed[j * 4..(j + 1) * 4] {
                *v += 1.5;
            }
            let out = run(perturbed);
            for i in 0..j {
                for c in 0..4 {
                    let (a, b) = (out.data()[i * 4 + c], reference.data()[i * 4 + c]);
                    assert!((a - b).abs() < 1e-9, "position {i} saw position {j}");
                }
            }
        }
    }
}
