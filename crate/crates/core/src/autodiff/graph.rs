use std::cell::{Ref, RefCell};

use super::tensor::axis_split;
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operator defined outside this module.
///
/// `backward` returns one gradient contribution per input, each with the
/// same length as that input's data.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record-on-execute tape.
///
/// Every operator evaluates eagerly, appends its output to the tape and
/// returns a [`Var`]. Node ids are assigned in execution order, so the tape
/// is topologically sorted by construction and [`Graph::backward`] is a
/// single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient table produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss (or does not require gradients).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but a missing gradient reads as zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node created after the first `len`. Vars with ids at or
    /// beyond `len` become invalid.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(mismatch("matmul", &ta, &tb));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        };
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    fn elementwise(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, &ta, &tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Adds a row vector (length = column count) to every row of a matrix.
    pub fn add_row(&self, m: Var, row: Var) -> Result<Var> {
        let out = {
            let (tm, tr) = (self.value(m), self.value(row));
            if tm.rank() != 2 || tr.len() != tm.shape()[1] {
                return Err(mismatch("add_row", &tm, &tr));
            }
            let c = tm.shape()[1];
            let rd = tr.data();
            let data = tm
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + rd[i % c])
                .collect();
            Tensor::new(tm.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::AddRow(m, row), self.needs(&[m, row])))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = self.value(x).scaled(s);
        self.push(out, Op::Scale(x, s), self.needs(&[x]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), self.needs(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), self.needs(&[x]))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let src = t.data();
            let mut data = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * n * inner + j * inner + i;
                    let m = (0..n)
                        .map(|j| src[idx(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (src[idx(j)] - m).exp();
                        data[idx(j)] = e;
                        z += e;
                    }
                    for j in 0..n {
                        data[idx(j)] /= z;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Softmax { x, axis }, self.needs(&[x])))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let src = t.data();
            let mut data = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * n * inner + j * inner + i;
                    let lse = stable_lse((0..n).map(|j| src[idx(j)]));
                    for j in 0..n {
                        data[idx(j)] = src[idx(j)] - lse;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::LogSoftmax { x, axis }, self.needs(&[x])))
    }

    /// `ln Σ exp` along `axis`; the axis is removed from the output shape.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let src = t.data();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    data[o * inner + i] =
                        stable_lse((0..n).map(|j| src[o * n * inner + j * inner + i]));
                }
            }
            Tensor::new(reduced_shape(t.shape(), axis), data)?
        };
        Ok(self.push(out, Op::LogSumExp { x, axis }, self.needs(&[x])))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let first = inputs
                .first()
                .ok_or(AutodiffError::EmptyInput { op: "concat" })?;
            let t0 = self.value(*first);
            let (outer, _, inner) = axis_split(t0.shape(), axis)?;
            let mut total = 0;
            for v in inputs {
                let t = self.value(*v);
                let same_rank = t.rank() == t0.rank();
                let compatible = same_rank
                    && t.shape()
                        .iter()
                        .zip(t0.shape())
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &t0, &t));
                }
                total += t.shape()[axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = self.value(*v);
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = t0.shape().to_vec();
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let needs = self.needs(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            if len == 0 || start + len > n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "slice",
                    index: start + len,
                    bound: n,
                });
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }, self.needs(&[x])))
    }

    /// Zero-padded "same" 1-D convolution of a length-`T` signal with a
    /// `[channels, width]` kernel (odd width), producing `[T, channels]`.
    pub fn conv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let out = {
            let (tx, tk) = (self.value(x), self.value(kernel));
            if tk.rank() != 2 || tk.shape()[1] % 2 == 0 {
                return Err(mismatch("conv1d", &tx, &tk));
            }
            let (c, w) = (tk.shape()[0], tk.shape()[1]);
            let pad = w / 2;
            let t_len = tx.len();
            let (xs, ks) = (tx.data(), tk.data());
            let mut data = vec![0.0; t_len * c];
            for t in 0..t_len {
                for j in 0..w {
                    let s = t + j;
                    if s < pad || s - pad >= t_len {
                        continue;
                    }
                    let xv = xs[s - pad];
                    for ch in 0..c {
                        data[t * c + ch] += ks[ch * w + j] * xv;
                    }
                }
            }
            Tensor::matrix(t_len, c, data)
        };
        Ok(self.push(out, Op::Conv1d { x, kernel }, self.needs(&[x, kernel])))
    }

    /// Rows of a `[V, E]` table selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(table);
            if t.rank() != 2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "embedding",
                    left: t.shape().to_vec(),
                    right: vec![ids.len()],
                });
            }
            if ids.is_empty() {
                return Err(AutodiffError::EmptyInput { op: "embedding" });
            }
            let (v, e) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * e);
            for &id in ids {
                if id >= v {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "embedding",
                        index: id,
                        bound: v,
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), e, data)
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            self.needs(&[table]),
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.needs(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = {
            let t = self.value(x);
            t.data().iter().sum::<f64>() / t.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(x), self.needs(&[x]))
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        data[o * inner + i] += t.data()[o * n * inner + j * inner + i];
                    }
                }
            }
            Tensor::new(reduced_shape(t.shape(), axis), data)?
        };
        Ok(self.push(out, Op::SumAxis { x, axis }, self.needs(&[x])))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "transpose",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)
        };
        Ok(self.push(out, Op::Transpose(x), self.needs(&[x])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), self.needs(&[x])))
    }

    /// Gathers rows along axis 0; indices may repeat or reorder.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if rows.is_empty() {
                return Err(AutodiffError::EmptyInput { op: "select_rows" });
            }
            let c = t.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= t.rows() {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "select_rows",
                        index: r,
                        bound: t.rows(),
                    });
                }
                data.extend_from_slice(t.row(r));
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data)?
        };
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            self.needs(&[x]),
        ))
    }

    /// Picks individual elements by flat (row-major) index into a vector.
    pub fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if index.is_empty() {
                return Err(AutodiffError::EmptyInput { op: "gather" });
            }
            let mut data = Vec::with_capacity(index.len());
            for &i in index {
                if i >= t.len() {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather",
                        index: i,
                        bound: t.len(),
                    });
                }
                data.push(t.data()[i]);
            }
            Tensor::vector(data)
        };
        Ok(self.push(
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            self.needs(&[x]),
        ))
    }

    /// Records an externally computed operator together with its backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lshape = nodes[loss.0].value.shape();
        if lshape != [1] {
            return Err(AutodiffError::NonScalarLoss {
                shape: lshape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            shapes: nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: &Var| &nodes[v.0].value;
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let y = &node.value;

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(a) {
                let bd = tb.data();
                accumulate(grads, a.0, m * k, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            if rg(b) {
                let ad = ta.data();
                accumulate(grads, b.0, k * n, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if rg(v) {
                    accumulate(grads, v.0, g.len(), |gv| add_into(gv, g));
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(a) {
                accumulate(grads, a.0, g.len(), |ga| add_into(ga, g));
            }
            if rg(b) {
                accumulate(grads, b.0, g.len(), |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if rg(a) {
                accumulate(grads, a.0, g.len(), |ga| {
                    for ((o, &x), &bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += x * bv;
                    }
                });
            }
            if rg(b) {
                accumulate(grads, b.0, g.len(), |gb| {
                    for ((o, &x), &av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += x * av;
                    }
                });
            }
        }
        Op::AddRow(m, row) => {
            if rg(m) {
                accumulate(grads, m.0, g.len(), |gm| add_into(gm, g));
            }
            if rg(row) {
                let c = val(row).len();
                accumulate(grads, row.0, c, |gr| {
                    for (i, &x) in g.iter().enumerate() {
                        gr[i % c] += x;
                    }
                });
            }
        }
        Op::Scale(x, s) => {
            if rg(x) {
                accumulate(grads, x.0, g.len(), |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * s;
                    }
                });
            }
        }
        Op::Tanh(x) => {
            if rg(x) {
                accumulate(grads, x.0, g.len(), |gx| {
                    for ((o, &v), &yv) in gx.iter_mut().zip(g).zip(y.data()) {
                        *o += v * (1.0 - yv * yv);
                    }
                });
            }
        }
        Op::Sigmoid(x) => {
            if rg(x) {
                accumulate(grads, x.0, g.len(), |gx| {
                    for ((o, &v), &yv) in gx.iter_mut().zip(g).zip(y.data()) {
                        *o += v * yv * (1.0 - yv);
                    }
                });
            }
        }
        Op::Softmax { x, axis } => {
            if rg(x) {
                let (outer, n, inner) = axis_split(y.shape(), *axis).expect("recorded axis");
                let yd = y.data();
                accumulate(grads, x.0, g.len(), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * yd[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += yd[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::LogSoftmax { x, axis } => {
            if rg(x) {
                let (outer, n, inner) = axis_split(y.shape(), *axis).expect("recorded axis");
                let yd = y.data();
                accumulate(grads, x.0, g.len(), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += g[idx(j)] - yd[idx(j)].exp() * total;
                            }
                        }
                    }
                });
            }
        }
        Op::LogSumExp { x, axis } => {
            if rg(x) {
                let tx = val(x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis).expect("recorded axis");
                let (xd, yd) = (tx.data(), y.data());
                accumulate(grads, x.0, tx.len(), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..n {
                                let idx = o * n * inner + j * inner + i;
                                gx[idx] += g[r] * (xd[idx] - yd[r]).exp();
                            }
                        }
                    }
                });
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(y.shape(), *axis).expect("recorded axis");
            let mut offset = 0;
            for v in inputs {
                let t = val(v);
                let width = t.shape()[*axis];
                if rg(v) {
                    accumulate(grads, v.0, t.len(), |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * width * inner;
                            add_into(
                                &mut gv[dst..dst + width * inner],
                                &g[src..src + width * inner],
                            );
                        }
                    });
                }
                offset += width;
            }
        }
        Op::Slice { x, axis, start } => {
            if rg(x) {
                let tx = val(x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis).expect("recorded axis");
                let len = y.shape()[*axis];
                accumulate(grads, x.0, tx.len(), |gx| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
        }
        Op::Conv1d { x, kernel } => {
            let (tx, tk) = (val(x), val(kernel));
            let (c, w) = (tk.shape()[0], tk.shape()[1]);
            let pad = w / 2;
            let t_len = tx.len();
            let (xs, ks) = (tx.data(), tk.data());
            if rg(x) {
                accumulate(grads, x.0, t_len, |gx| {
                    for t in 0..t_len {
                        for j in 0..w {
                            let s = t + j;
                            if s < pad || s - pad >= t_len {
                                continue;
                            }
                            let acc: f64 = (0..c).map(|ch| g[t * c + ch] * ks[ch * w + j]).sum();
                            gx[s - pad] += acc;
                        }
                    }
                });
            }
            if rg(kernel) {
                accumulate(grads, kernel.0, c * w, |gk| {
                    for t in 0..t_len {
                        for j in 0..w {
                            let s = t + j;
                            if s < pad || s - pad >= t_len {
                                continue;
                            }
                            let xv = xs[s - pad];
                            for ch in 0..c {
                                gk[ch * w + j] += g[t * c + ch] * xv;
                            }
                        }
                    }
                });
            }
        }
        Op::Embedding { table, ids } => {
            if rg(table) {
                let tt = val(table);
                let e = tt.shape()[1];
                accumulate(grads, table.0, tt.len(), |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
        }
        Op::Sum(x) => {
            if rg(x) {
                let n = val(x).len();
                accumulate(grads, x.0, n, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
        }
        Op::Mean(x) => {
            if rg(x) {
                let n = val(x).len();
                let share = g[0] / n as f64;
                accumulate(grads, x.0, n, |gx| gx.iter_mut().for_each(|o| *o += share));
            }
        }
        Op::SumAxis { x, axis } => {
            if rg(x) {
                let tx = val(x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis).expect("recorded axis");
                accumulate(grads, x.0, tx.len(), |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[o * n * inner + j * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose(x) => {
            if rg(x) {
                let (r, c) = (y.shape()[1], y.shape()[0]);
                accumulate(grads, x.0, r * c, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
        }
        Op::Reshape(x) => {
            if rg(x) {
                accumulate(grads, x.0, g.len(), |gx| add_into(gx, g));
            }
        }
        Op::SelectRows { x, rows } => {
            if rg(x) {
                let tx = val(x);
                let c = tx.cols();
                accumulate(grads, x.0, tx.len(), |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
        }
        Op::Gather { x, index } => {
            if rg(x) {
                let n = val(x).len();
                accumulate(grads, x.0, n, |gx| {
                    for (k, &i) in index.iter().enumerate() {
                        gx[i] += g[k];
                    }
                });
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
            let contributions = op.backward(&ins, y, g);
            debug_assert_eq!(
                contributions.len(),
                inputs.len(),
                "{} backward arity",
                op.name()
            );
            for (v, contrib) in inputs.iter().zip(contributions) {
                if rg(v) {
                    accumulate(grads, v.0, contrib.len(), |gv| add_into(gv, &contrib));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted `ln Σ exp`; returns `-inf` when every term is `-inf`.
pub(crate) fn stable_lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}
