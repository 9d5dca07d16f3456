use super::{ModelError, SourceBatch, EOS, SOS};
use crate::autodiff::Tensor;

/// Incremental decoding interface: feed back the previous tokens, get next-token logits.
pub trait StepDecoder {
    type State;

    fn begin(&self, src: &SourceBatch) -> Result<Self::State, ModelError>;

    /// `prev` holds one token per batch row; returns logits `[B, V]`.
    fn next_logits(&self, state: &mut Self::State, prev: &[usize]) -> Result<Tensor, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationHypothesis {
    /// Emitted ids, without the terminating `EOS`.
    pub tokens: Vec<usize>,
    /// Log-probability of each chosen token, including `EOS` when it was emitted.
    pub step_logprobs: Vec<f64>,
}

impl TranslationHypothesis {
    pub fn log_prob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

/// Argmax decoding; ties go to the lowest id. Stops a row at `EOS` or after `max_len` tokens.
pub fn greedy_translate<D: StepDecoder + ?Sized>(
    decoder: &D,
    src: &SourceBatch,
    max_len: usize,
) -> Result<Vec<TranslationHypothesis>, ModelError> {
    let batch = src.batch();
    let mut state = decoder.begin(src)?;
    let mut prev = vec![SOS; batch];
    let mut done = vec![false; batch];
    let mut out = vec![
        TranslationHypothesis {
            tokens: Vec::new(),
            step_logprobs: Vec::new()
        };
        batch
    ];

    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let logits = decoder.next_logits(&mut state, &prev)?;
        for b in 0..batch {
            let row = logits.row(b);
            let (best, _) = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    },
                );
            prev[b] = best;
            if done[b] {
                continue;
            }
            let max = row[best];
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[b].step_logprobs.push(row[best] - log_z);
            if best == EOS {
                done[b] = true;
            } else {
                out[b].tokens.push(best);
            }
        }
    }
    Ok(out)
}
