//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and parent
//! indices. Node order is execution order, so a single reverse sweep visits
//! each node once after all of its consumers.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Transpose(usize),
    Softmax(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Conv1d {
        x: usize,
        kernel: usize,
        taps: usize,
        stride: usize,
    },
    Sum(usize),
    Mean(usize),
    OffDiagMean(usize),
    PairwiseDiff(usize),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// A copy of the forward value of `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.val(v).clone()
    }

    /// Scalar forward value of `v` (first element).
    pub fn item(&self, v: Var) -> f64 {
        self.val(v).item()
    }

    fn val(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        self.push("matmul", out, Op::MatMul(a.0, b.0))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: name,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a.0, b.0))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let out = self.val(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a.0, factor))
    }

    /// Adds a `1 x c` bias row to every row of an `r x c` matrix.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let (r, c) = xv.dims2("add_row")?;
            if bv.len() != c {
                return Err(Error::Shape {
                    op: "add_row",
                    left: xv.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let mut data = xv.data().to_vec();
            for row in data.chunks_exact_mut(c) {
                for (v, b) in row.iter_mut().zip(bv.data()) {
                    *v += b;
                }
            }
            Tensor::matrix(r, c, data)?
        };
        self.push("add_row", out, Op::AddRow(x.0, bias.0))
    }

    /// `x W + b` for an `r x in` input, `in x out` weight and `1 x out` bias.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.val(a);
            let (r, c) = x.dims2("softmax_rows")?;
            if c == 0 {
                return Err(Error::InvalidArgument("softmax_rows: empty row".into()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::matrix(r, c, data)?
        };
        self.push("softmax_rows", out, Op::Softmax(a.0))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a.0))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a.0))
    }

    /// `log(1 + exp(x))`, evaluated without overflow for large `x`.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(softplus);
        self.push("softplus", out, Op::Softplus(a.0))
    }

    /// Valid-mode 1-D cross-correlation along the time axis.
    ///
    /// `x` is `T x C`; `kernel` is `(taps * C) x O` with row `j * C + c`
    /// holding the weights of tap `j` on input channel `c`. The output is
    /// `L x O` with `L = (T - taps) / stride + 1`.
    pub fn conv1d(&self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d: stride must be positive".into()));
        }
        let (out, taps) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (t, c) = xv.dims2("conv1d")?;
            let (kr, o) = kv.dims2("conv1d")?;
            if kr % c != 0 {
                return Err(Error::Shape {
                    op: "conv1d",
                    left: xv.shape().to_vec(),
                    right: kv.shape().to_vec(),
                });
            }
            let taps = kr / c;
            if taps > t {
                return Err(Error::InvalidArgument(format!(
                    "conv1d: kernel length {taps} exceeds input length {t}"
                )));
            }
            let len = (t - taps) / stride + 1;
            let mut data = vec![0.0; len * o];
            for step in 0..len {
                let start = step * stride * c;
                let window = &xv.data()[start..start + kr];
                gemm_nn(window, kv.data(), &mut data[step * o..(step + 1) * o], 1, kr, o);
            }
            (Tensor::matrix(len, o, data)?, taps)
        };
        self.push(
            "conv1d",
            out,
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
                taps,
                stride,
            },
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).sum());
        self.push("sum", out, Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.val(a);
            Tensor::scalar(shifted_mean(x.data().iter().copied()))
        };
        self.push("mean", out, Op::Mean(a.0))
    }

    /// Mean over the off-diagonal entries of a square matrix.
    pub fn off_diagonal_mean(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.val(a);
            let (r, c) = x.dims2("off_diagonal_mean")?;
            if r != c || r < 2 {
                return Err(Error::Shape {
                    op: "off_diagonal_mean",
                    left: x.shape().to_vec(),
                    right: vec![],
                });
            }
            let off = (0..r * c).filter(|k| k / c != k % c).map(|k| x.data()[k]);
            Tensor::scalar(shifted_mean(off))
        };
        self.push("off_diagonal_mean", out, Op::OffDiagMean(a.0))
    }

    /// `out[i][j] = a[i] - a[j]` for a vector-shaped input of length `n`.
    pub fn pairwise_diff(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.val(a);
            let n = x.len();
            let v = x.data();
            let mut data = Vec::with_capacity(n * n);
            for &vi in v {
                data.extend(v.iter().map(|&vj| vi - vj));
            }
            Tensor::matrix(n, n, data)?
        };
        self.push("pairwise_diff", out, Op::PairwiseDiff(a.0))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat_rows: no inputs".into()))?;
            let cols = nodes[first.0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        left: nodes[first.0].value.shape().to_vec(),
                        right: v.shape().to_vec(),
                    });
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", out, Op::ConcatRows(ids))
    }

    /// Propagates gradients from a scalar `loss` back to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, contrib: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches forward value")
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2("matmul")?;
            let (_, n) = bv.dims2("matmul")?;
            let mut da = vec![0.0; m * k];
            gemm_nt(gd, bv.data(), &mut da, m, n, k);
            let mut db = vec![0.0; k * n];
            gemm_tn(av.data(), gd, &mut db, m, k, n);
            accumulate(grads, *a, with_data(av.shape(), da));
            accumulate(grads, *b, with_data(bv.shape(), db));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let da = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            let db = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
            accumulate(grads, *a, with_data(av.shape(), da));
            accumulate(grads, *b, with_data(bv.shape(), db));
        }
        Op::Scale(a, factor) => accumulate(grads, *a, g.map(|v| v * factor)),
        Op::AddRow(x, bias) => {
            let bv = &nodes[*bias].value;
            let c = bv.len();
            let mut db = vec![0.0; c];
            for row in gd.chunks_exact(c) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            accumulate(grads, *x, g.clone());
            accumulate(grads, *bias, with_data(bv.shape(), db));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
        Op::Softmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .data()
                .chunks_exact(c)
                .zip(gd.chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(grads, *a, with_data(y.shape(), dx));
        }
        Op::Tanh(a) => {
            let y = &node.value;
            let dx = gd.iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
            accumulate(grads, *a, with_data(y.shape(), dx));
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            let dx = gd
                .iter()
                .zip(x.data())
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, *a, with_data(x.shape(), dx));
        }
        Op::Softplus(a) => {
            let x = &nodes[*a].value;
            let dx = gd.iter().zip(x.data()).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
            accumulate(grads, *a, with_data(x.shape(), dx));
        }
        Op::Conv1d {
            x,
            kernel,
            taps,
            stride,
        } => {
            let (xv, kv) = (&nodes[*x].value, &nodes[*kernel].value);
            let c = xv.cols();
            let o = kv.cols();
            let kr = taps * c;
            let len = node.value.rows();
            let mut dx = vec![0.0; xv.len()];
            let mut dk = vec![0.0; kv.len()];
            for step in 0..len {
                let start = step * stride * c;
                let g_row = &gd[step * o..(step + 1) * o];
                let window = &xv.data()[start..start + kr];
                gemm_tn(window, g_row, &mut dk, 1, kr, o);
                gemm_nt(g_row, kv.data(), &mut dx[start..start + kr], 1, o, kr);
            }
            accumulate(grads, *x, with_data(xv.shape(), dx));
            accumulate(grads, *kernel, with_data(kv.shape(), dk));
        }
        Op::Sum(a) => {
            let shape = nodes[*a].value.shape();
            accumulate(grads, *a, Tensor::full(shape, g.item()));
        }
        Op::Mean(a) => {
            let x = &nodes[*a].value;
            accumulate(grads, *a, Tensor::full(x.shape(), g.item() / x.len() as f64));
        }
        Op::OffDiagMean(a) => {
            let x = &nodes[*a].value;
            let n = x.rows();
            let w = g.item() / (n * (n - 1)) as f64;
            let mut dx = vec![w; n * n];
            for i in 0..n {
                dx[i * n + i] = 0.0;
            }
            accumulate(grads, *a, with_data(x.shape(), dx));
        }
        Op::PairwiseDiff(a) => {
            let x = &nodes[*a].value;
            let n = x.len();
            let mut dx = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let v = gd[i * n + j];
                    dx[i] += v;
                    dx[j] -= v;
                }
            }
            accumulate(grads, *a, with_data(x.shape(), dx));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let len = pv.len();
                accumulate(grads, p, with_data(pv.shape(), gd[offset..offset + len].to_vec()));
                offset += len;
            }
        }
    }
    Ok(())
}

/// Mean accumulated relative to the first value, so constant inputs
/// return that constant exactly.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut pivot = None;
    let mut total = 0.0;
    let mut n = 0usize;
    for v in values {
        let p = *pivot.get_or_insert(v);
        total += v - p;
        n += 1;
    }
    pivot.map_or(0.0, |p| p + total / n as f64)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
