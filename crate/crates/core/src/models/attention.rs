use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Ctx, ModelError};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// No attention: the decoder only sees the encoder's final state.
    None,
    /// Additive score `vᵀ tanh(W [s; h])` on the previous decoder state, context fed into the cell.
    Bahdanau,
    /// `sᵀ h`
    LuongDot,
    /// `sᵀ W h`
    LuongGeneral,
    /// `vᵀ tanh(W [s; h])` on the current decoder state.
    LuongConcat,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::None => "none",
            AttentionKind::Bahdanau => "bahdanau",
            AttentionKind::LuongDot => "luong_dot",
            AttentionKind::LuongGeneral => "luong_general",
            AttentionKind::LuongConcat => "luong_concat",
        })
    }
}

impl AttentionKind {
    pub fn is_luong(self) -> bool {
        matches!(
            self,
            AttentionKind::LuongDot | AttentionKind::LuongGeneral | AttentionKind::LuongConcat
        )
    }
}

/// Alignment parameters. The additive form keeps `W = [W_query; W_key]` as two blocks.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub kind: AttentionKind,
    general: Option<ParamId>,
    w_query: Option<ParamId>,
    w_key: Option<ParamId>,
    v: Option<ParamId>,
}

/// Encoder states prepared for repeated scoring.
pub struct EncodedKeys<'t> {
    /// `[B, T, H]`
    pub states: Var<'t>,
    /// `h_j W_key`, `[B, T, A]`, additive scores only.
    projected: Option<Var<'t>>,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: AttentionKind,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut layer = AttentionLayer {
            kind,
            general: None,
            w_query: None,
            w_key: None,
            v: None,
        };
        match kind {
            AttentionKind::None => {
                return Err(ModelError::InvalidConfig(
                    "attention layer needs a scoring function".into(),
                ))
            }
            AttentionKind::LuongDot => {}
            AttentionKind::LuongGeneral => {
                layer.general =
                    Some(store.add_matrix(format!("{prefix}.W"), hidden_dim, hidden_dim, rng)?);
            }
            AttentionKind::Bahdanau | AttentionKind::LuongConcat => {
                layer.w_query = Some(store.add_matrix(
                    format!("{prefix}.W_query"),
                    hidden_dim,
                    hidden_dim,
                    rng,
                )?);
                layer.w_key = Some(store.add_matrix(
                    format!("{prefix}.W_key"),
                    hidden_dim,
                    hidden_dim,
                    rng,
                )?);
                layer.v = Some(store.add_matrix(format!("{prefix}.v"), hidden_dim, 1, rng)?);
            }
        }
        Ok(layer)
    }

    pub fn keys<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        states: Var<'t>,
    ) -> Result<EncodedKeys<'t>, AutodiffError> {
        let projected = match self.w_key {
            Some(wk) => Some(states.matmul(&ctx.p(wk))?),
            None => None,
        };
        Ok(EncodedKeys { states, projected })
    }

    /// Alignment scores of decoder state `s` (`[B, H]`) against every encoder state: `[B, T]`.
    pub fn scores<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        s: &Var<'t>,
        keys: &EncodedKeys<'t>,
    ) -> Result<Var<'t>, AutodiffError> {
        let shape = keys.states.shape();
        let (batch, steps, hidden) = (shape[0], shape[1], shape[2]);
        let dot_with = |q: Var<'t>| -> Result<Var<'t>, AutodiffError> {
            keys.states
                .bmm(&q.reshape(&[batch, hidden, 1])?)?
                .reshape(&[batch, steps])
        };
        match self.kind {
            AttentionKind::LuongDot => dot_with(*s),
            AttentionKind::LuongGeneral => {
                // sᵀ W h = (sᵀ W) · h
                dot_with(s.matmul(&ctx.p(self.general.expect("general weights")))?)
            }
            AttentionKind::Bahdanau | AttentionKind::LuongConcat => {
                let query = s
                    .matmul(&ctx.p(self.w_query.expect("query weights")))?
                    .expand(steps)?;
                let energy = keys.projected.expect("projected keys").add(&query)?.tanh();
                energy
                    .matmul(&ctx.p(self.v.expect("score vector")))?
                    .reshape(&[batch, steps])
            }
            AttentionKind::None => unreachable!("constructor rejects AttentionKind::None"),
        }
    }
}

/// Softmax-weighted sum of encoder states. Returns `(context [B, H], weights [B, T])`.
pub fn attend<'t>(
    ctx: &Ctx<'t, '_>,
    layer: &AttentionLayer,
    s: &Var<'t>,
    keys: &EncodedKeys<'t>,
) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
    let shape = keys.states.shape();
    let (batch, steps, hidden) = (shape[0], shape[1], shape[2]);
    let weights = layer.scores(ctx, s, keys)?.softmax();
    let context = weights
        .reshape(&[batch, 1, steps])?
        .bmm(&keys.states)?
        .reshape(&[batch, hidden])?;
    Ok((context, weights))
}

/// Score of a single decoder/encoder state pair.
pub fn attention_score(
    store: &ParamStore,
    layer: &AttentionLayer,
    s: &[f64],
    h: &[f64],
) -> Result<f64, AutodiffError> {
    if s.len() != h.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "attention_score",
            detail: format!("state {} vs encoder state {}", s.len(), h.len()),
        });
    }
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, store);
    let states = ctx.constant(Tensor::new(vec![1, 1, h.len()], h.to_vec())?);
    let keys = layer.keys(&ctx, states)?;
    let s = ctx.constant(Tensor::new(vec![1, s.len()], s.to_vec())?);
    Ok(layer.scores(&ctx, &s, &keys)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(kind: AttentionKind, hidden: usize) -> (ParamStore, AttentionLayer) {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = AttentionLayer::new(&mut store, "att", kind, hidden, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn dot_score() {
        let (store, l) = layer(AttentionKind::LuongDot, 2);
        assert_eq!(
            attention_score(&store, &l, &[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            5.0
        );
    }

    #[test]
    fn general_with_identity_is_dot() {
        let (mut store, l) = layer(AttentionKind::LuongGeneral, 3);
        let w = store.find("att.W").unwrap();
        store.set_values(w, Tensor::identity(3).data());
        let s = [0.3, -1.0, 2.0];
        let h = [1.5, 0.5, -0.25];
        let dot: f64 = s.iter().zip(&h).map(|(a, b)| a * b).sum();
        assert!((attention_score(&store, &l, &s, &h).unwrap() - dot).abs() < 1e-15);
    }

    #[test]
    fn concat_with_zero_v_scores_zero() {
        for kind in [AttentionKind::LuongConcat, AttentionKind::Bahdanau] {
            let (mut store, l) = layer(kind, 3);
            let v = store.find("att.v").unwrap();
            store.set_values(v, &[0.0; 3]);
            assert_eq!(
                attention_score(&store, &l, &[1.0, 2.0, 3.0], &[-1.0, 0.5, 9.0]).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn concat_matches_hand_formula() {
        let (store, l) = layer(AttentionKind::LuongConcat, 2);
        let wq = store
            .value(store.find("att.W_query").unwrap())
            .data()
            .to_vec();
        let wk = store
            .value(store.find("att.W_key").unwrap())
            .data()
            .to_vec();
        let v = store.value(store.find("att.v").unwrap()).data().to_vec();
        let (s, h) = ([0.4, -0.7], [1.1, 0.2]);
        let mut expected = 0.0;
        for a in 0..2 {
            let pre = s[0] * wq[a] + s[1] * wq[2 + a] + h[0] * wk[a] + h[1] * wk[2 + a];
            expected += v[a] * pre.tanh();
        }
        assert!((attention_score(&store, &l, &s, &h).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn none_is_rejected() {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionLayer::new(&mut store, "a", AttentionKind::None, 4, &mut rng).is_err());
    }
}
