use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LeakyRelu(usize),
    Softplus(usize),
    Scale(usize, f64),
    Shift(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, Split),
    LogSumExp(usize, Split),
    Transpose(usize),
    Reshape(usize),
    RepeatRows(usize, usize),
    TileRows(usize),
}

/// `(outer, axis, inner)` decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct Split {
    outer: usize,
    axis: usize,
    inner: usize,
}

impl Split {
    fn new(shape: &[usize], axis: usize) -> Split {
        Split {
            outer: shape[..axis].iter().product(),
            axis: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape. Build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
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

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `var` into `param.grad`; zeros if `var` did not
    /// influence the loss.
    pub fn write_to(&self, var: Var<'_>, param: &mut Tensor) -> Result<()> {
        let g = match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; param.len()],
        };
        param.set_grad(g)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    if big.is_empty() {
        return false;
    }
    small == &big[1..]
        || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..])
}

/// Output shape of an elementwise binary op; broadcasting is only allowed
/// over the leading (batch) axis.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || broadcastable(b, a) {
        Ok(a.to_vec())
    } else if broadcastable(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Sums `g` (length of the broadcast output) back onto an operand of length `n`.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records `t` as a constant leaf regardless of its flag.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `loss`. A tape supports a single backward.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.data;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let (n, k, m) = (na.shape[0], na.shape[1], nb.shape[1]);
            if na.requires_grad {
                let bt = transpose_raw(&nb.data, k, m);
                accumulate(nodes, grads, a, matmul_raw(g, &bt, n, m, k));
            }
            if nb.requires_grad {
                let at = transpose_raw(&na.data, n, k);
                accumulate(nodes, grads, b, matmul_raw(&at, g, k, n, m));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, reduce_to(g, nodes[a].data.len()));
            accumulate(nodes, grads, b, reduce_to(g, nodes[b].data.len()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, reduce_to(g, nodes[a].data.len()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, grads, b, reduce_to(&neg, nodes[b].data.len()));
        }
        Op::Mul(a, b) => {
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            if nodes[a].requires_grad {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * db[i % db.len()])
                    .collect();
                accumulate(nodes, grads, a, reduce_to(&ga, da.len()));
            }
            if nodes[b].requires_grad {
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * da[i % da.len()])
                    .collect();
                accumulate(nodes, grads, b, reduce_to(&gb, db.len()));
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, a, g.iter().map(|v| -v).collect()),
        Op::Exp(a) => accumulate(nodes, grads, a, g.iter().zip(out).map(|(v, o)| v * o).collect()),
        Op::Log(a) => {
            let x = &nodes[a].data;
            accumulate(nodes, grads, a, g.iter().zip(x).map(|(v, x)| v / x).collect())
        }
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            a,
            g.iter().zip(out).map(|(v, s)| v * s * (1.0 - s)).collect(),
        ),
        Op::LeakyRelu(a) => {
            let x = &nodes[a].data;
            accumulate(
                nodes,
                grads,
                a,
                g.iter()
                    .zip(x)
                    .map(|(v, x)| if *x > 0.0 { *v } else { v * LEAKY_SLOPE })
                    .collect(),
            )
        }
        Op::Softplus(a) => {
            let x = &nodes[a].data;
            accumulate(
                nodes,
                grads,
                a,
                g.iter().zip(x).map(|(v, x)| v * sigmoid(*x)).collect(),
            )
        }
        Op::Scale(a, c) => accumulate(nodes, grads, a, g.iter().map(|v| v * c).collect()),
        Op::Shift(a) => accumulate(nodes, grads, a, g.to_vec()),
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[a].data;
            accumulate(
                nodes,
                grads,
                a,
                g.iter()
                    .zip(x)
                    .map(|(v, x)| if *x < lo || *x > hi { 0.0 } else { *v })
                    .collect(),
            )
        }
        Op::Sum(a) => accumulate(nodes, grads, a, vec![g[0]; nodes[a].data.len()]),
        Op::Mean(a) => {
            let n = nodes[a].data.len();
            accumulate(nodes, grads, a, vec![g[0] / n as f64; n])
        }
        Op::SumAxis(a, s) => {
            let mut ga = vec![0.0; s.outer * s.axis * s.inner];
            for o in 0..s.outer {
                for j in 0..s.axis {
                    for i in 0..s.inner {
                        ga[(o * s.axis + j) * s.inner + i] = g[o * s.inner + i];
                    }
                }
            }
            accumulate(nodes, grads, a, ga)
        }
        Op::LogSumExp(a, s) => {
            let x = &nodes[a].data;
            let mut ga = vec![0.0; x.len()];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let lse = out[o * s.inner + i];
                    let gv = g[o * s.inner + i];
                    for j in 0..s.axis {
                        let idx = (o * s.axis + j) * s.inner + i;
                        ga[idx] = gv * (x[idx] - lse).exp();
                    }
                }
            }
            accumulate(nodes, grads, a, ga)
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
            accumulate(nodes, grads, a, transpose_raw(g, c, r))
        }
        Op::Reshape(a) => accumulate(nodes, grads, a, g.to_vec()),
        Op::RepeatRows(a, k) => {
            let na = &nodes[a];
            let w: usize = na.shape[1..].iter().product();
            let mut ga = vec![0.0; na.data.len()];
            for (r, chunk) in g.chunks(w).enumerate() {
                let src = r / k;
                for (d, v) in ga[src * w..(src + 1) * w].iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            accumulate(nodes, grads, a, ga)
        }
        Op::TileRows(a) => {
            let n = nodes[a].data.len();
            accumulate(nodes, grads, a, reduce_to(g, n))
        }
    }
}

impl<'t> Var<'t> {
    fn node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id])
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn requires_grad(&self) -> bool {
        self.node(|n| n.requires_grad)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node(|n| n.shape.clone())
    }

    pub fn len(&self) -> usize {
        self.node(|n| n.data.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node(|n| n.data.clone())
    }

    /// Detached copy of the value.
    pub fn value(&self) -> Tensor {
        self.node(|n| Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are valid"))
    }

    pub fn item(&self) -> f64 {
        self.node(|n| n.data[0])
    }

    fn unary(
        &self,
        name: &'static str,
        op: Op,
        shape: Option<Vec<usize>>,
        f: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<Var<'t>> {
        let (data, shape) = self.node(|n| (f(&n.data), shape.unwrap_or_else(|| n.shape.clone())));
        check_finite(name, &data)?;
        Ok(self.tape.push(shape, data, op, self.requires_grad()))
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (data, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, &a.shape, &b.shape)?;
            let n: usize = shape.iter().product();
            let (la, lb) = (a.data.len(), b.data.len());
            let data: Vec<f64> = (0..n).map(|i| f(a.data[i % la], b.data[i % lb])).collect();
            (data, shape)
        };
        check_finite(name, &data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(shape, data, op, rg))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (data, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
            (matmul_raw(&a.data, &b.data, n, k, m), vec![n, m])
        };
        check_finite("matmul", &data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(shape, data, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), None, |x| x.iter().map(|v| -v).collect())
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), None, |x| x.iter().map(|v| v.exp()).collect())
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), None, |x| x.iter().map(|v| v.ln()).collect())
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), None, |x| {
            x.iter().map(|v| sigmoid(*v)).collect()
        })
    }

    pub fn leaky_relu(&self) -> Result<Var<'t>> {
        self.unary("leaky_relu", Op::LeakyRelu(self.id), None, |x| {
            x.iter()
                .map(|v| if *v > 0.0 { *v } else { v * LEAKY_SLOPE })
                .collect()
        })
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus(self.id), None, |x| {
            x.iter().map(|v| stable_softplus(*v)).collect()
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), None, |x| {
            x.iter().map(|v| v * c).collect()
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::Shift(self.id), None, |x| {
            x.iter().map(|v| v + c).collect()
        })
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary("clamp", Op::Clamp(self.id, lo, hi), None, |x| {
            x.iter().map(|v| v.clamp(lo, hi)).collect()
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), Some(vec![]), |x| vec![x.iter().sum()])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        self.unary("mean", Op::Mean(self.id), Some(vec![]), |x| {
            vec![x.iter().sum::<f64>() / n as f64]
        })
    }

    fn axis_split(&self, op: &'static str, axis: usize) -> Result<(Split, Vec<usize>)> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let split = Split::new(&shape, axis);
        let mut out = shape.clone();
        out.remove(axis);
        Ok((split, out))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (s, out_shape) = self.axis_split("sum_axis", axis)?;
        self.unary("sum_axis", Op::SumAxis(self.id, s), Some(out_shape), |x| {
            let mut out = vec![0.0; s.outer * s.inner];
            for o in 0..s.outer {
                for j in 0..s.axis {
                    for i in 0..s.inner {
                        out[o * s.inner + i] += x[(o * s.axis + j) * s.inner + i];
                    }
                }
            }
            out
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Numerically stable `log(sum(exp(x)))` over `axis`, removing it.
    /// Entries equal to `-inf` are not representable on the tape; callers
    /// drop zero-weight terms instead.
    pub fn log_sum_exp(&self, axis: usize) -> Result<Var<'t>> {
        let (s, out_shape) = self.axis_split("log_sum_exp", axis)?;
        self.unary("log_sum_exp", Op::LogSumExp(self.id, s), Some(out_shape), |x| {
            let mut out = vec![0.0; s.outer * s.inner];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let at = |j: usize| x[(o * s.axis + j) * s.inner + i];
                    let m = (0..s.axis).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let acc: f64 = (0..s.axis).map(|j| (at(j) - m).exp()).sum();
                    out[o * s.inner + i] = m + acc.ln();
                }
            }
            out
        })
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        self.unary("transpose", Op::Transpose(self.id), Some(vec![c, r]), |x| {
            transpose_raw(x, r, c)
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        self.unary("reshape", Op::Reshape(self.id), Some(shape), |x| x.to_vec())
    }

    /// Repeats each leading-axis slice `k` times consecutively:
    /// rows `[a, b]` become `[a, a, b, b]` for `k = 2`.
    pub fn repeat_rows(&self, k: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        if shape.is_empty() || k == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                lhs: shape,
                rhs: vec![k],
            });
        }
        let w: usize = shape[1..].iter().product();
        shape[0] *= k;
        self.unary("repeat_rows", Op::RepeatRows(self.id, k), Some(shape), |x| {
            let mut out = Vec::with_capacity(x.len() * k);
            for row in x.chunks(w.max(1)) {
                for _ in 0..k {
                    out.extend_from_slice(row);
                }
            }
            out
        })
    }

    /// Repeats the whole tensor `k` times along the leading axis:
    /// rows `[a, b]` become `[a, b, a, b]` for `k = 2`.
    pub fn tile_rows(&self, k: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        if shape.is_empty() || k == 0 {
            return Err(Error::ShapeMismatch {
                op: "tile_rows",
                lhs: shape,
                rhs: vec![k],
            });
        }
        shape[0] *= k;
        self.unary("tile_rows", Op::TileRows(self.id), Some(shape), |x| {
            let mut out = Vec::with_capacity(x.len() * k);
            for _ in 0..k {
                out.extend_from_slice(x);
            }
            out
        })
    }
}
