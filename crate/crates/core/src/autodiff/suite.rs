//! Central-difference checks for every tape operation on random small inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    grad_check, AutodiffError, GradCheckReport, ParamId, ParamStore, Precision, Tape, Tensor, Var,
};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Weighted sum against a fixed random tensor so every output entry gets a distinct upstream gradient.
fn weighted<'t>(out: Var<'t>, rng_seed: u64) -> Result<Var<'t>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = out.shape();
    let w = out.tape().constant(random_tensor(&mut rng, &shape));
    Ok(out.mul(&w)?.sum())
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>], &mut ChaCha8Rng) -> Result<Var<'t>, AutodiffError>;

struct OpCase {
    name: &'static str,
    shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    apply: OpFn,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..5),
    )
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, k], vec![k, n]]
            },
            apply: |_, v, _| v[0].matmul(&v[1]),
        },
        OpCase {
            name: "matmul_rank3",
            shapes: |r| {
                let (b, k, n) = dims(r);
                vec![vec![b, 2, k], vec![k, n]]
            },
            apply: |_, v, _| v[0].matmul(&v[1]),
        },
        OpCase {
            name: "bmm",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![2, m, k], vec![2, k, n]]
            },
            apply: |_, v, _| v[0].bmm(&v[1]),
        },
        OpCase {
            name: "add",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            apply: |_, v, _| v[0].add(&v[1]),
        },
        OpCase {
            name: "sub",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            apply: |_, v, _| v[0].sub(&v[1]),
        },
        OpCase {
            name: "mul",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            apply: |_, v, _| v[0].mul(&v[1]),
        },
        OpCase {
            name: "add_bias",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, n, k], vec![k]]
            },
            apply: |_, v, _| v[0].add_bias(&v[1]),
        },
        OpCase {
            name: "scale_add_scalar",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            apply: |_, v, _| Ok(v[0].scale(-2.5).add_scalar(0.3).one_minus()),
        },
        OpCase {
            name: "concat",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, k], vec![m, n], vec![m, 1]]
            },
            apply: |_, v, _| Var::concat(v),
        },
        OpCase {
            name: "slice_last",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k + 2]]
            },
            apply: |_, v, _| {
                let w = v[0].shape()[1];
                v[0].slice_last(1, w - 2)
            },
        },
        OpCase {
            name: "stack",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k], vec![m, k]]
            },
            apply: |_, v, _| Var::stack(v),
        },
        OpCase {
            name: "expand",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            apply: |_, v, _| v[0].expand(3),
        },
        OpCase {
            name: "reshape_transpose",
            shapes: |r| {
                let (m, k, n) = dims(r);
                vec![vec![m, k, n]]
            },
            apply: |_, v, _| {
                let s = v[0].shape();
                v[0].transpose()?.reshape(&[s[0] * s[2], s[1]])
            },
        },
        OpCase {
            name: "tanh",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            apply: |_, v, _| Ok(v[0].tanh()),
        },
        OpCase {
            name: "sigmoid",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            apply: |_, v, _| Ok(v[0].sigmoid()),
        },
        OpCase {
            name: "relu",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            // Shift away from the kink so central differences stay on one side.
            apply: |_, v, _| Ok(v[0].add_scalar(0.05).relu()),
        },
        OpCase {
            name: "softmax",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k + 1]]
            },
            apply: |_, v, _| Ok(v[0].softmax()),
        },
        OpCase {
            name: "log_softmax",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k + 1]]
            },
            apply: |_, v, _| Ok(v[0].log_softmax()),
        },
        OpCase {
            name: "embedding",
            shapes: |r| {
                let (_, k, n) = dims(r);
                vec![vec![n + 1, k]]
            },
            apply: |_, v, rng| {
                let vocab = v[0].shape()[0];
                let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..vocab)).collect();
                v[0].embedding(&ids)
            },
        },
        OpCase {
            name: "dropout",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k]]
            },
            apply: |_, v, rng| {
                let seed = rng.random::<u64>();
                v[0].dropout(0.4, true, &mut ChaCha8Rng::seed_from_u64(seed))
            },
        },
        OpCase {
            name: "layer_norm",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k + 2], vec![k + 2], vec![k + 2]]
            },
            apply: |_, v, _| v[0].layer_norm(&v[1], &v[2]),
        },
        OpCase {
            name: "sum_mean",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k], vec![m, k]]
            },
            apply: |_, v, _| v[0].sum().add(&v[1].mean()),
        },
        OpCase {
            name: "masked_fill",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m, k + 1]]
            },
            apply: |_, v, _| {
                let n = v[0].value().len();
                let mask: Vec<bool> = (0..n).map(|i| i % 3 == 1).collect();
                Ok(v[0].masked_fill(&mask, f64::NEG_INFINITY)?.softmax())
            },
        },
        OpCase {
            name: "cross_entropy",
            shapes: |r| {
                let (m, k, _) = dims(r);
                vec![vec![m + 2, k + 2]]
            },
            apply: |_, v, rng| {
                let s = v[0].shape();
                let targets: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
                v[0].cross_entropy(&targets, 0)
            },
        },
    ]
}

/// Runs one op case with its inputs as parameters.
fn check_case(case: &OpCase, seed: u64) -> Result<GradCheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (case.shapes)(&mut rng);
    let mut store = ParamStore::new(Precision::F64);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), random_tensor(&mut rng, s)))
        .collect::<Result<Vec<ParamId>, _>>()?;
    let op_seed = rng.random::<u64>();
    grad_check(&mut store, 1e-5, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let mut op_rng = ChaCha8Rng::seed_from_u64(op_seed);
        let out = (case.apply)(tape, &vars, &mut op_rng)?;
        weighted(out, op_seed ^ 0xabc)
    })
}

/// Worst relative error per operation over `draws` random inputs each.
pub fn op_suite(draws: u64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    cases()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for seed in 0..draws {
                worst = worst.max(check_case(case, seed)?.max_rel_err);
            }
            Ok((case.name, worst))
        })
        .collect()
}
