use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signtrans::autodiff::{ParamStore, Precision, Tape, Tensor};
use signtrans::models::{
    attend, check_architecture, greedy_translate, Architecture, AttentionKind, AttentionLayer, Ctx,
    Model, ModelConfig, ModelError, SourceBatch, StepDecoder, EOS, SOS,
};

const VOCAB: usize = 7;
const FEATURES: usize = 5;

fn source(seed: u64, batch: usize, steps: usize) -> SourceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * steps * FEATURES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    SourceBatch::from_tensor(Tensor::new(vec![batch, steps, FEATURES], data).unwrap()).unwrap()
}

fn tiny(arch: Architecture) -> Model {
    Model::new(ModelConfig::tiny(arch, FEATURES, VOCAB), Precision::F64, 17).unwrap()
}

#[test]
fn every_architecture_passes_gradient_check() {
    for arch in Architecture::ALL {
        let report = check_architecture(arch, 17).unwrap();
        assert!(report.max_rel_err < 1e-4, "{arch}: {report:?}");
        let scalars = Model::new(ModelConfig::tiny(arch, 6, VOCAB), Precision::F64, 17)
            .unwrap()
            .store
            .num_scalars();
        assert_eq!(report.checked, scalars, "{arch}");
    }
}

#[test]
fn logits_shape_and_determinism() {
    let src = source(2, 3, 6);
    let tgt_in = vec![vec![SOS, 4, 5, 6]; 3];
    for arch in Architecture::ALL {
        let model = tiny(arch);
        let run = || {
            let tape = Tape::inference();
            let ctx = Ctx::eval(&tape, &model.store);
            let out = model
                .forward_logits(&ctx, &src, &tgt_in)
                .unwrap()
                .value()
                .clone();
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[12, VOCAB], "{arch}");
        assert_eq!(a.data(), b.data(), "{arch}");
    }
}

#[test]
fn transformer_output_ignores_later_targets() {
    let model = tiny(Architecture::Transformer);
    let src = source(3, 1, 5);
    let logits = |tgt: Vec<usize>| {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &model.store);
        let out = model
            .forward_logits(&ctx, &src, &[tgt])
            .unwrap()
            .value()
            .clone();
        out
    };
    let base = logits(vec![SOS, 4, 5, 6, 4]);
    for j in 1..5 {
        let mut tgt = vec![SOS, 4, 5, 6, 4];
        tgt[j] = 3;
        let changed = logits(tgt);
        for i in 0..j {
            for (x, y) in changed.row(i).iter().zip(base.row(i)) {
                assert!((x - y).abs() < 1e-9, "step {i} depends on target {j}");
            }
        }
        assert_ne!(changed.row(j), base.row(j));
    }
}

#[test]
fn greedy_matches_step_argmax_and_is_deterministic() {
    let src = source(4, 2, 5);
    for arch in Architecture::ALL {
        let model = tiny(arch);
        let a = model.translate(&src, 6).unwrap();
        let b = model.translate(&src, 6).unwrap();
        assert_eq!(a, b);
        for h in &a {
            assert!(h.tokens.len() <= 6);
            assert!(!h.tokens.contains(&EOS));
            let ended = h.step_logprobs.len() == h.tokens.len() + 1;
            assert!(ended || h.tokens.len() == 6, "{arch}: {h:?}");
            assert!(h.step_logprobs.iter().all(|&p| p <= 0.0));
        }
    }
}

/// Wraps a decoder and multiplies its logits by a positive constant.
struct Scaled<'a>(&'a Model, f64);

impl StepDecoder for Scaled<'_> {
    type State = <Model as StepDecoder>::State;

    fn begin(&self, src: &SourceBatch) -> Result<Self::State, ModelError> {
        self.0.begin(src)
    }

    fn next_logits(&self, state: &mut Self::State, prev: &[usize]) -> Result<Tensor, ModelError> {
        let t = self.0.next_logits(state, prev)?;
        let data = t.data().iter().map(|v| v * self.1).collect();
        Ok(Tensor::new(t.shape().to_vec(), data)?)
    }
}

#[test]
fn positive_logit_scaling_keeps_greedy_output() {
    let src = source(5, 2, 4);
    for arch in [Architecture::Bahdanau, Architecture::Transformer] {
        let model = tiny(arch);
        let base: Vec<_> = model
            .translate(&src, 5)
            .unwrap()
            .into_iter()
            .map(|h| h.tokens)
            .collect();
        for c in [0.01, 3.0, 250.0] {
            let scaled: Vec<_> = greedy_translate(&Scaled(&model, c), &src, 5)
                .unwrap()
                .into_iter()
                .map(|h| h.tokens)
                .collect();
            assert_eq!(scaled, base, "{arch} x{c}");
        }
    }
}

fn check_attention(kind: AttentionKind, seed: u64, steps: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(Precision::F64);
    let layer = AttentionLayer::new(&mut store, "att", kind, 4, &mut rng).unwrap();
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, &store);
    let states: Vec<f64> = (0..2 * steps * 4)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let states = ctx.constant(Tensor::new(vec![2, steps, 4], states.clone()).unwrap());
    let s = ctx.constant(
        Tensor::new(
            vec![2, 4],
            (0..8).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap(),
    );
    let keys = layer.keys(&ctx, states).unwrap();
    let (context, weights) = attend(&ctx, &layer, &s, &keys).unwrap();
    let (w, h) = (weights.value().clone(), states.value().clone());
    for b in 0..2 {
        let row = w.row(b);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&a| a >= 0.0));
        for c in 0..4 {
            let expected: f64 = (0..steps)
                .map(|j| row[j] * h.data()[(b * steps + j) * 4 + c])
                .sum();
            assert!((context.value().row(b)[c] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_weights_are_distributions() {
    let kinds = [
        AttentionKind::Bahdanau,
        AttentionKind::LuongDot,
        AttentionKind::LuongGeneral,
        AttentionKind::LuongConcat,
    ];
    for seed in 0..1000 {
        check_attention(kinds[seed as usize % 4], seed, 1 + seed as usize % 7);
    }
}

#[test]
fn single_state_attention_is_identity() {
    for kind in [
        AttentionKind::Bahdanau,
        AttentionKind::LuongDot,
        AttentionKind::LuongGeneral,
        AttentionKind::LuongConcat,
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new(Precision::F64);
        let layer = AttentionLayer::new(&mut store, "att", kind, 3, &mut rng).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &store);
        let h = ctx.constant(Tensor::new(vec![1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = ctx.constant(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let keys = layer.keys(&ctx, h).unwrap();
        let (c, w) = attend(&ctx, &layer, &s, &keys).unwrap();
        assert_eq!(w.value().data(), &[1.0]);
        assert_eq!(c.value().data(), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn equal_scores_average_the_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new(Precision::F64);
    let layer =
        AttentionLayer::new(&mut store, "att", AttentionKind::LuongDot, 2, &mut rng).unwrap();
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, &store);
    let h = ctx.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 5.0, 2.0, -1.0, 3.0, 2.0]).unwrap());
    let s = ctx.constant(Tensor::zeros(&[1, 2]));
    let keys = layer.keys(&ctx, h).unwrap();
    let (c, w) = attend(&ctx, &layer, &s, &keys).unwrap();
    assert!(w
        .value()
        .data()
        .iter()
        .all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    assert!((c.value().data()[0] - 2.0).abs() < 1e-15);
    assert!((c.value().data()[1] - 2.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recurrent_models_accept_any_source_length(steps in 1usize..12, arch_ix in 0usize..5) {
        let model = tiny(Architecture::ALL[arch_ix]);
        let hyps = model.translate(&source(steps as u64, 1, steps), 4).unwrap();
        prop_assert_eq!(hyps.len(), 1);
    }
}
