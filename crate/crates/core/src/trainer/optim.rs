use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Rescale all gradients when their global L2 norm exceeds the threshold.
    #[default]
    Norm,
    /// Clamp each gradient entry to `[-threshold, threshold]`.
    Value,
}

impl std::str::FromStr for ClipMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "norm" => Ok(ClipMode::Norm),
            "value" => Ok(ClipMode::Value),
            _ => Err(format!("unknown clip mode '{s}'")),
        }
    }
}

/// Scales every gradient by `threshold / ‖g‖` when the global norm exceeds `threshold`.
/// Returns the factor applied (1 when untouched).
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let scale = threshold / norm;
    for p in store.iter_mut() {
        if let Some(g) = &mut p.grad {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    scale
}

/// Clamps gradient entries; returns how many were clamped.
pub fn clamp_gradients(store: &mut ParamStore, threshold: f64) -> usize {
    let mut clamped = 0;
    for p in store.iter_mut() {
        if let Some(g) = &mut p.grad {
            for v in g.iter_mut() {
                if v.abs() > threshold {
                    *v = v.clamp(-threshold, threshold);
                    clamped += 1;
                }
            }
        }
    }
    clamped
}

/// Bias-corrected Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let precision = store.precision();
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get(id);
            let Some(g) = p.grad.as_ref() else { continue };
            let mut values = p.value.data().to_vec();
            for k in 0..values.len() {
                m[k] = precision.round(BETA1 * m[k] + (1.0 - BETA1) * g[k]);
                v[k] = precision.round(BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k]);
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                values[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
            store.set_values(id, &values);
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((p, m), v)| m.len() == p.value.len() && v.len() == p.value.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Precision, Tensor};

    fn store_with(values: &[f64], grad: Option<Vec<f64>>) -> ParamStore {
        let mut s = ParamStore::new(Precision::F64);
        let id = s.add("w", Tensor::vector(values)).unwrap();
        s.get_mut(id).grad = grad;
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(&[0.0], Some(vec![1.0]));
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 0.001);
        let delta = s.iter().next().unwrap().value.data()[0];
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[0.5, -2.0], Some(vec![0.0, 0.0]));
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 0.1);
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn clipping_examples() {
        let mut s = store_with(&[0.0, 0.0], Some(vec![6.0, 8.0]));
        assert_eq!(clip_gradients(&mut s, 5.0), 0.5);
        assert_eq!(
            s.iter().next().unwrap().grad.as_deref(),
            Some(&[3.0, 4.0][..])
        );
        assert_eq!(clip_gradients(&mut s, 5.0), 1.0);
        let mut z = store_with(&[0.0], Some(vec![0.0]));
        assert_eq!(clip_gradients(&mut z, 5.0), 1.0);
        let mut c = store_with(&[0.0, 0.0], Some(vec![-9.0, 2.0]));
        assert_eq!(clamp_gradients(&mut c, 5.0), 1);
        assert_eq!(
            c.iter().next().unwrap().grad.as_deref(),
            Some(&[-5.0, 2.0][..])
        );
    }
}
