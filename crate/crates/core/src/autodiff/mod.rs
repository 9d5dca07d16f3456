//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass (define-by-run);
//! [`Tape::backward`] replays it in reverse and accumulates gradients into the
//! [`ParamStore`] the parameters were bound from.

mod params;
mod suite;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter, Precision};
pub use suite::op_suite;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
}

/// Denominator floor for relative gradient error, so entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar of every parameter in `store`.
/// `f` must be deterministic. Parameter values are restored afterwards.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, AutodiffError>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let tape = Tape::inference();
        Ok(f(&tape, store)?.item())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        let original = store.value(id).data().to_vec();
        let mut probe = original.clone();
        for i in 0..original.len() {
            probe[i] = original[i] + h;
            store.set_values(id, &probe);
            let plus = eval(store)?;
            probe[i] = original[i] - h;
            store.set_values(id, &probe);
            let minus = eval(store)?;
            probe[i] = original[i];
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[i], numeric);
            let abs = (analytic[i] - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.get(id).name.clone(), i));
            }
            report.checked += 1;
        }
        store.set_values(id, &original);
    }
    Ok(report)
}
