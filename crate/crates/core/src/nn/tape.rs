//! Reverse-mode automatic differentiation over batched tensors.
//!
//! A [`Tape`] is an append-only arena: each primitive pushes one node whose
//! inputs already live on the tape, so node order is a topological order and
//! the backward sweep is a single reverse pass that visits every node once.
//! The primitive set covers the MLP forward pass plus the elementwise algebra
//! the diffusion losses need; nothing here aims to be a general graph engine.

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{contract, shape, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Lower clamp of the sigmoid head; the upper clamp is `1 - SIGMOID_EPS`.
pub const SIGMOID_EPS: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · wᵀ + b` for `x: n×k`, `w: m×k`, `b: m`.
    Linear(Var, Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape!("{what}: operand shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Linear(x, w, b)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Logistic function clamped to `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::from_raw(Vec::new(), vec![self.value(x).sum()]);
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_raw(Vec::new(), vec![t.sum() / t.len() as f64]);
        self.push(value, Op::Mean(x))
    }

    /// Mean over the last dimension: `n×d → n×1`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim() as f64;
        let data = t
            .row_iter()
            .map(|r| r.iter().sum::<f64>() / d)
            .collect::<Vec<_>>();
        let value = Tensor::from_raw(vec![data.len(), 1], data);
        self.push(value, Op::RowMean(x))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape!("row index {bad} out of range for {rows} rows"));
        }
        let value = self.value(x).gather_rows(&indices);
        Ok(self.push(value, Op::GatherRows(x, indices)))
    }

    /// Reverse sweep from a scalar `loss`, returning d(loss)/d(leaf) for every
    /// leaf the loss depends on. Interior adjoints are dropped once consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(contract!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(root.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let out = &node.value;
            let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear(x, w, b) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k) = xv.reshape_matrix();
                    let m = wv.shape()[0];
                    let dx = matmul_nn(g.data(), wv.data(), n, m, k);
                    let dw = matmul_tn(g.data(), xv.data(), n, m, k);
                    let mut db = vec![0.0; m];
                    for row in g.row_iter() {
                        for (acc_b, gv) in db.iter_mut().zip(row) {
                            *acc_b += gv;
                        }
                    }
                    acc(*x, Tensor::from_raw(xv.shape().to_vec(), dx));
                    acc(*w, Tensor::from_raw(wv.shape().to_vec(), dw));
                    acc(*b, Tensor::from_raw(self.value(*b).shape().to_vec(), db));
                }
                Op::Tanh(x) => acc(*x, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
                Op::Relu(x) => acc(
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                ),
                Op::Sigmoid(x) => acc(
                    *x,
                    g.zip_map(out, |gv, s| {
                        if s <= SIGMOID_EPS || s >= 1.0 - SIGMOID_EPS {
                            0.0
                        } else {
                            gv * s * (1.0 - s)
                        }
                    }),
                ),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, g.zip_map(bv, |gv, d| gv / d));
                    let q = out.zip_map(bv, |y, d| y / d);
                    acc(*b, g.zip_map(&q, |gv, qv| -gv * qv));
                }
                Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
                Op::Offset(x) => acc(*x, g),
                Op::Ln(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv / xv)),
                Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv)),
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(*x, Tensor::filled(xv.shape().to_vec(), g.item()));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    acc(
                        *x,
                        Tensor::filled(xv.shape().to_vec(), g.item() / xv.len() as f64),
                    );
                }
                Op::RowMean(x) => {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / d as f64, d))
                        .collect();
                    acc(*x, Tensor::from_raw(xv.shape().to_vec(), data));
                }
                Op::GatherRows(x, indices) => {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (row, &i) in g.row_iter().zip(indices) {
                        for (dst, src) in dx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                    acc(*x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `x · wᵀ + b`, shared by the tape and the tape-free inference path so both
/// produce bit-identical activations.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(shape!("weight must be a matrix, got {:?}", w.shape()));
    }
    let (m, k) = (w.shape()[0], w.shape()[1]);
    let (n, xk) = x.reshape_matrix();
    if xk != k || b.len() != m {
        return Err(shape!(
            "linear layer {m}x{k} (bias {}) cannot take input {:?}",
            b.len(),
            x.shape()
        ));
    }
    let mut data = matmul_nt(x.data(), w.data(), n, k, m);
    for row in data.chunks_exact_mut(m) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("linear input has rank >= 1") = m;
    Ok(Tensor::from_raw(shape, data))
}
