use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use super::tensor::gemm;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Concat(Vec<usize>),
    SliceLast {
        src: usize,
        start: usize,
    },
    Stack(Vec<usize>),
    Expand {
        src: usize,
        times: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        src: usize,
        mask: Vec<f64>,
    },
    LayerNorm {
        src: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    MaskedFill {
        src: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass. Nodes are stored in creation
/// order, which is a valid topological order; `backward` walks it in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that binds parameters as constants; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter; repeated binds return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.value(id).clone(), Op::Param(id), self.grad_enabled);
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse pass from a scalar loss; adds ∂loss/∂θ into each reachable parameter's grad.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if self.consumed.replace(true) {
            return Err(AutodiffError::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(loss.id + 1, || None);
        if !root.requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Param(pid) = node.op {
                store.accumulate_grad(pid, &g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient slot of `id` when that node needs one.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    delta(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let k = av.last_dim();
            let m = av.len() / k;
            let n = bv.last_dim();
            acc(nodes, grads, a, |ga| {
                gemm(m, n, k, g, false, bv.data(), true, ga, 1.0)
            });
            acc(nodes, grads, b, |gb| {
                gemm(k, m, n, av.data(), true, g, false, gb, 1.0)
            });
        }
        &Op::Bmm(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            acc(nodes, grads, a, |ga| {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            });
            acc(nodes, grads, b, |gb| {
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        1.0,
                    );
                }
            });
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, b, |gb| add_into(gb, g));
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            acc(nodes, grads, b, |gb| {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d)
            });
        }
        &Op::AddBias(a, b) => {
            acc(nodes, grads, a, |ga| add_into(ga, g));
            let w = nodes[b].value.len();
            acc(nodes, grads, b, |gb| {
                for row in g.chunks_exact(w) {
                    add_into(gb, row);
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            acc(nodes, grads, a, |ga| {
                for ((x, d), y) in ga.iter_mut().zip(g).zip(bv) {
                    *x += d * y;
                }
            });
            acc(nodes, grads, b, |gb| {
                for ((x, d), y) in gb.iter_mut().zip(g).zip(av) {
                    *x += d * y;
                }
            });
        }
        &Op::Scale(a, c) => acc(nodes, grads, a, |ga| {
            ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d)
        }),
        &Op::AddScalar(a) | &Op::Reshape(a) => acc(nodes, grads, a, |ga| add_into(ga, g)),
        Op::Concat(parts) => {
            let total = out.last_dim();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.last_dim();
                acc(nodes, grads, p, |gp| {
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                });
                offset += w;
            }
        }
        &Op::SliceLast { src, start } => {
            let full = nodes[src].value.last_dim();
            let w = out.last_dim();
            acc(nodes, grads, src, |gs| {
                for r in 0..out.rows() {
                    add_into(
                        &mut gs[r * full + start..r * full + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            });
        }
        Op::Stack(parts) => {
            let (batch, steps, width) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            for (t, &p) in parts.iter().enumerate() {
                acc(nodes, grads, p, |gp| {
                    for b in 0..batch {
                        let src = (b * steps + t) * width;
                        add_into(&mut gp[b * width..(b + 1) * width], &g[src..src + width]);
                    }
                });
            }
        }
        &Op::Expand { src, times } => {
            let width = out.last_dim();
            let batch = out.shape()[0];
            acc(nodes, grads, src, |gs| {
                for b in 0..batch {
                    for t in 0..times {
                        let at = (b * times + t) * width;
                        add_into(&mut gs[b * width..(b + 1) * width], &g[at..at + width]);
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let shape = out.shape();
            let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            acc(nodes, grads, a, |ga| {
                for (blk, gblk) in g.chunks_exact(rows * cols).enumerate() {
                    let dst = &mut ga[blk * rows * cols..(blk + 1) * rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[c * rows + r] += gblk[r * cols + c];
                        }
                    }
                }
            });
        }
        &Op::Tanh(a) => acc(nodes, grads, a, |ga| {
            for ((x, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += d * (1.0 - y * y);
            }
        }),
        &Op::Sigmoid(a) => acc(nodes, grads, a, |ga| {
            for ((x, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += d * y * (1.0 - y);
            }
        }),
        &Op::Relu(a) => acc(nodes, grads, a, |ga| {
            for ((x, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                if *y > 0.0 {
                    *x += d;
                }
            }
        }),
        &Op::Softmax(a) => {
            let w = out.last_dim();
            acc(nodes, grads, a, |ga| {
                for ((gx, dy), y) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                {
                    let dot: f64 = dy.iter().zip(y).map(|(d, p)| d * p).sum();
                    for ((x, d), p) in gx.iter_mut().zip(dy).zip(y) {
                        *x += p * (d - dot);
                    }
                }
            });
        }
        &Op::LogSoftmax(a) => {
            let w = out.last_dim();
            acc(nodes, grads, a, |ga| {
                for ((gx, dy), y) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                {
                    let total: f64 = dy.iter().sum();
                    for ((x, d), ly) in gx.iter_mut().zip(dy).zip(y) {
                        *x += d - ly.exp() * total;
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let w = out.last_dim();
            acc(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::Dropout { src, mask } => acc(nodes, grads, *src, |gs| {
            for ((x, d), m) in gs.iter_mut().zip(g).zip(mask) {
                *x += d * m;
            }
        }),
        Op::LayerNorm {
            src,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let w = out.last_dim();
            let gain_v = nodes[*gain].value.data();
            acc(nodes, grads, *gain, |gg| {
                for (dy, xh) in g.chunks_exact(w).zip(normalized.chunks_exact(w)) {
                    for ((x, d), h) in gg.iter_mut().zip(dy).zip(xh) {
                        *x += d * h;
                    }
                }
            });
            acc(nodes, grads, *bias, |gb| {
                for dy in g.chunks_exact(w) {
                    add_into(gb, dy);
                }
            });
            acc(nodes, grads, *src, |gs| {
                for (r, (gx, dy)) in gs.chunks_exact_mut(w).zip(g.chunks_exact(w)).enumerate() {
                    let xh = &normalized[r * w..(r + 1) * w];
                    let dxh: Vec<f64> = dy.iter().zip(gain_v).map(|(d, a)| d * a).collect();
                    let mean_d = dxh.iter().sum::<f64>() / w as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / w as f64;
                    for ((x, d), h) in gx.iter_mut().zip(&dxh).zip(xh) {
                        *x += inv_std[r] * (d - mean_d - h * mean_dx);
                    }
                }
            });
        }
        &Op::Sum(a) => acc(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        &Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            acc(nodes, grads, a, |ga| {
                ga.iter_mut().for_each(|x| *x += g[0] / n)
            })
        }
        Op::MaskedFill { src, mask } => acc(nodes, grads, *src, |gs| {
            for ((x, d), &m) in gs.iter_mut().zip(g).zip(mask) {
                if !m {
                    *x += d;
                }
            }
        }),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let w = nodes[*logits].value.last_dim();
            let scale = g[0] / *count as f64;
            acc(nodes, grads, *logits, |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    if t == usize::MAX {
                        continue;
                    }
                    let row = &mut gl[r * w..(r + 1) * w];
                    for (x, p) in row.iter_mut().zip(&probs[r * w..(r + 1) * w]) {
                        *x += scale * p;
                    }
                    row[t] -= scale;
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn softmax_rows(data: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (o, row) in out.chunks_exact_mut(w).zip(data.chunks_exact(w)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (y, &x) in o.iter_mut().zip(row) {
            *y = (x - max).exp();
            sum += *y;
        }
        o.iter_mut().for_each(|y| *y /= sum);
    }
    out
}

fn log_softmax_rows(data: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (o, row) in out.chunks_exact_mut(w).zip(data.chunks_exact(w)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (y, &x) in o.iter_mut().zip(row) {
            *y = x - lse;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.push(value, op(self.id), self.requires_grad())
    }

    fn binary_same_shape(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(mismatch(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    /// `[..., K] × [K, N] → [..., N]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if b.shape().len() != 2 || a.last_dim() != b.shape()[0] {
                return Err(mismatch(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            if shape.len() == 1 {
                shape.insert(0, 1);
            }
            let mut data = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut data, 0.0);
            Tensor::from_parts(shape, data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(mismatch("bmm", format!("{sa:?} x {sb:?}")));
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut data = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut data[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor::from_parts(vec![batch, m, n], data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::Bmm(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `[N]` bias to every row of a `[..., N]` tensor.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(bias);
        let value = {
            let (a, b) = (self.value(), bias.value());
            if b.shape().len() != 1 || a.last_dim() != b.len() {
                return Err(mismatch(
                    "add_bias",
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_exact_mut(b.len()) {
                add_into(row, b.data());
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|id| Op::Scale(id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let tape = first.tape;
        let value = {
            let values: Vec<_> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    p.value()
                })
                .collect();
            let lead = &values[0].shape()[..values[0].shape().len() - 1];
            for v in &values {
                if &v.shape()[..v.shape().len() - 1] != lead {
                    return Err(mismatch(
                        "concat",
                        format!("{:?} vs {:?}", values[0].shape(), v.shape()),
                    ));
                }
            }
            let total: usize = values.iter().map(|v| v.last_dim()).sum();
            let rows = values[0].rows();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, data)
        };
        let rg = parts.iter().any(Var::requires_grad);
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let a = self.value();
            let w = a.last_dim();
            if len == 0 || start + len > w {
                return Err(mismatch(
                    "slice",
                    format!("{start}..{} of {:?}", start + len, a.shape()),
                ));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(
            value,
            Op::SliceLast {
                src: self.id,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Stacks `T` tensors of shape `[B, F]` into `[B, T, F]`.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("stack", "no inputs".into()))?;
        let tape = first.tape;
        let value = {
            let values: Vec<_> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    p.value()
                })
                .collect();
            let shape = values[0].shape().to_vec();
            if shape.len() != 2 || values.iter().any(|v| v.shape() != shape.as_slice()) {
                return Err(mismatch(
                    "stack",
                    format!("parts must share a rank-2 shape, first {shape:?}"),
                ));
            }
            let (batch, width, steps) = (shape[0], shape[1], values.len());
            let mut data = vec![0.0; batch * steps * width];
            for (t, v) in values.iter().enumerate() {
                for b in 0..batch {
                    let at = (b * steps + t) * width;
                    data[at..at + width].copy_from_slice(v.row(b));
                }
            }
            Tensor::from_parts(vec![batch, steps, width], data)
        };
        let rg = parts.iter().any(Var::requires_grad);
        Ok(tape.push(value, Op::Stack(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Repeats `[B, F]` along a new middle axis: `[B, times, F]`.
    pub fn expand(&self, times: usize) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let a = self.value();
            if a.shape().len() != 2 || times == 0 {
                return Err(mismatch("expand", format!("{:?} x{times}", a.shape())));
            }
            let (batch, width) = (a.shape()[0], a.shape()[1]);
            let mut data = Vec::with_capacity(batch * times * width);
            for b in 0..batch {
                for _ in 0..times {
                    data.extend_from_slice(a.row(b));
                }
            }
            Tensor::from_parts(vec![batch, times, width], data)
        };
        Ok(self.tape.push(
            value,
            Op::Expand {
                src: self.id,
                times,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let a = self.value();
            if shape.iter().product::<usize>() != a.len() || shape.contains(&0) {
                return Err(mismatch("reshape", format!("{:?} -> {shape:?}", a.shape())));
            }
            Tensor::from_parts(shape.to_vec(), a.data().to_vec())
        };
        Ok(self
            .tape
            .push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if s.len() < 2 {
                return Err(mismatch("transpose", format!("{s:?}")));
            }
            let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
            let mut data = vec![0.0; a.len()];
            for (blk, src) in a.data().chunks_exact(rows * cols).enumerate() {
                let dst = &mut data[blk * rows * cols..(blk + 1) * rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dst[c * rows + r] = src[r * cols + c];
                    }
                }
            }
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            Tensor::from_parts(shape, data)
        };
        Ok(self
            .tape
            .push(value, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), softmax_rows(a.data(), a.last_dim()))
        };
        self.tape
            .push(value, Op::Softmax(self.id), self.requires_grad())
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), log_softmax_rows(a.data(), a.last_dim()))
        };
        self.tape
            .push(value, Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// Rows of a `[V, D]` table: `[ids.len(), D]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let table = self.value();
            if table.shape().len() != 2 || ids.is_empty() {
                return Err(mismatch("embedding", format!("table {:?}", table.shape())));
            }
            let (vocab, width) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= vocab {
                    return Err(AutodiffError::OutOfVocabulary { id, vocab });
                }
                data.extend_from_slice(table.row(id));
            }
            Tensor::from_parts(vec![ids.len(), width], data)
        };
        Ok(self.tape.push(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Inverted dropout: zeros entries with probability `p` and rescales the rest by `1/(1-p)`.
    /// Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'t>, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - p);
        let (value, mask) = {
            let a = self.value();
            let mask: Vec<f64> = (0..a.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::from_parts(a.shape().to_vec(), data), mask)
        };
        Ok(self.tape.push(
            value,
            Op::Dropout { src: self.id, mask },
            self.requires_grad(),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (value, normalized, inv_std) = {
            let (a, gv, bv) = (self.value(), gain.value(), bias.value());
            let w = a.last_dim();
            if gv.shape() != [w] || bv.shape() != [w] {
                return Err(mismatch(
                    "layer_norm",
                    format!("{:?} with gain {:?}", a.shape(), gv.shape()),
                ));
            }
            let mut normalized = Vec::with_capacity(a.len());
            let mut inv_std = Vec::with_capacity(a.rows());
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(r);
                for ((x, g), b) in row.iter().zip(gv.data()).zip(bv.data()) {
                    let h = (x - mean) * r;
                    normalized.push(h);
                    data.push(g * h + b);
                }
            }
            (
                Tensor::from_parts(a.shape().to_vec(), data),
                normalized,
                inv_std,
            )
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                src: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.tape
            .push(value, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        };
        self.tape
            .push(value, Op::Mean(self.id), self.requires_grad())
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get no gradient.
    pub fn masked_fill(&self, mask: &[bool], fill: f64) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let a = self.value();
            if mask.len() != a.len() {
                return Err(mismatch(
                    "masked_fill",
                    format!("mask {} for {:?}", mask.len(), a.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { fill } else { x })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(
            value,
            Op::MaskedFill {
                src: self.id,
                mask: mask.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `[N, V]` logits,
    /// skipping positions equal to `pad_id`. All-pad input yields 0.
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<Var<'t>, AutodiffError> {
        let (value, probs, marked, count) = {
            let a = self.value();
            let w = a.last_dim();
            if a.rows() != targets.len() {
                return Err(mismatch(
                    "cross_entropy",
                    format!("{} rows vs {} targets", a.rows(), targets.len()),
                ));
            }
            let logp = log_softmax_rows(a.data(), w);
            let mut total = 0.0;
            let mut count = 0;
            let mut marked = Vec::with_capacity(targets.len());
            for (r, &t) in targets.iter().enumerate() {
                if t == pad_id {
                    marked.push(usize::MAX);
                    continue;
                }
                if t >= w {
                    return Err(AutodiffError::OutOfVocabulary { id: t, vocab: w });
                }
                total -= logp[r * w + t];
                count += 1;
                marked.push(t);
            }
            let loss = if count == 0 {
                0.0
            } else {
                total / count as f64
            };
            let probs = logp.into_iter().map(f64::exp).collect();
            (Tensor::scalar(loss), probs, marked, count)
        };
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: marked,
                probs,
                count,
            },
            self.requires_grad(),
        ))
    }
}
