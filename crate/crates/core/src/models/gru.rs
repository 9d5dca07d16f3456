use rand::Rng;

use super::{Ctx, ModelError};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tensor, Var};

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h̃  = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_h: ParamId,
    u_h: ParamId,
    b_h: ParamId,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        let mut mat = |name: &str, fan_in: usize, store: &mut ParamStore| {
            store.add_matrix(format!("{prefix}.{name}"), fan_in, hidden_dim, rng)
        };
        let w_z = mat("W_z", input_dim, store)?;
        let u_z = mat("U_z", hidden_dim, store)?;
        let w_r = mat("W_r", input_dim, store)?;
        let u_r = mat("U_r", hidden_dim, store)?;
        let w_h = mat("W_h", input_dim, store)?;
        let u_h = mat("U_h", hidden_dim, store)?;
        Ok(GruCell {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z: store.add_bias(format!("{prefix}.b_z"), hidden_dim)?,
            w_r,
            u_r,
            b_r: store.add_bias(format!("{prefix}.b_r"), hidden_dim)?,
            w_h,
            u_h,
            b_h: store.add_bias(format!("{prefix}.b_h"), hidden_dim)?,
        })
    }

    /// One step on a batch: `x` is `[B, input_dim]`, `h` is `[B, hidden_dim]`.
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x: &Var<'t>,
        h: &Var<'t>,
    ) -> Result<Var<'t>, AutodiffError> {
        let gate = |w: ParamId,
                    u: ParamId,
                    b: ParamId,
                    hidden: &Var<'t>|
         -> Result<Var<'t>, AutodiffError> {
            x.matmul(&ctx.p(w))?
                .add(&hidden.matmul(&ctx.p(u))?)?
                .add_bias(&ctx.p(b))
        };
        let z = gate(self.w_z, self.u_z, self.b_z, h)?.sigmoid();
        let r = gate(self.w_r, self.u_r, self.b_r, h)?.sigmoid();
        let candidate = gate(self.w_h, self.u_h, self.b_h, &r.mul(h)?)?.tanh();
        // (1 − z) ⊙ h + z ⊙ h̃ == h + z ⊙ (h̃ − h)
        h.add(&z.mul(&candidate.sub(h)?)?)
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

/// Stacked GRU layers; layer `i > 0` consumes layer `i − 1`'s output.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruCell>,
}

impl GruStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if num_layers == 0 || hidden_dim == 0 || input_dim == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{prefix}: layers={num_layers}, input={input_dim}, hidden={hidden_dim}"
            )));
        }
        let layers = (0..num_layers)
            .map(|i| {
                let in_dim = if i == 0 { input_dim } else { hidden_dim };
                GruCell::new(
                    store,
                    &format!("{prefix}.layer{i}"),
                    in_dim,
                    hidden_dim,
                    rng,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(GruStack { layers })
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim
    }

    pub fn zero_state<'t>(&self, ctx: &Ctx<'t, '_>, batch: usize) -> Vec<Var<'t>> {
        self.layers
            .iter()
            .map(|l| ctx.constant(Tensor::zeros(&[batch, l.hidden_dim])))
            .collect()
    }

    /// Advances every layer one step; returns the new per-layer states (last = top).
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x: &Var<'t>,
        state: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        let mut input = *x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, h) in self.layers.iter().zip(state) {
            let h_new = layer.step(ctx, &input, h)?;
            next.push(h_new);
            input = h_new;
        }
        Ok(next)
    }
}
