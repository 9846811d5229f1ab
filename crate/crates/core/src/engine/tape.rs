//! Reverse-mode automatic differentiation over 2D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node that depends on a trainable leaf.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use super::params::Params;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an operation: receives the gradient of the output and all
/// tape values, returns one optional gradient per parent.
pub type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Recip,
    Square,
}

impl Unary {
    fn forward<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => {
                let xf = x.as_f64();
                T::from_f64_lossy(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => x.max(T::zero()) + (one + (-x.abs()).exp()).ln(),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => one / x,
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => {
                let xf = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                T::from_f64_lossy(cdf + xf * pdf)
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => one - y * y,
            Unary::Exp => y,
            Unary::Ln => one / x,
            Unary::Sqrt => T::from_f64_lossy(0.5) / y,
            Unary::Recip => -y * y,
            Unary::Square => x + x,
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients of every trainable parameter bound during the forward pass.
    pub fn params(&self) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, idx)| (name.clone(), self.wrt(Var(*idx))))
            .collect()
    }
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<String, usize>,
    params: Vec<(String, usize)>,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            bound: HashMap::new(),
            params: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a new node. `backward` is dropped when no parent needs a gradient.
    pub fn custom(&mut self, value: Tensor<T>, parents: &[Var], backward: BackFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { parents: Vec::new(), backward: None, requires_grad: false });
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// Leaf differentiable input that is not a named parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { parents: Vec::new(), backward: None, requires_grad: true });
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// Binds a named parameter. Trainable entries become gradient leaves and
    /// are reported by [`Gradients::params`]; buffers are constants.
    pub fn param(&mut self, params: &Params<T>, name: &str) -> Result<Var> {
        if let Some(&idx) = self.bound.get(name) {
            return Ok(Var(idx));
        }
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let v = if entry.trainable {
            let v = self.input(entry.value.clone());
            self.params.push((name.to_string(), v.0));
            v
        } else {
            self.constant(entry.value.clone())
        };
        self.bound.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Binds a parameter as a constant, blocking gradient flow into it.
    pub fn frozen(&mut self, params: &Params<T>, name: &str) -> Result<Var> {
        let value = params.get(name)?.clone();
        Ok(self.constant(value))
    }

    /// Records a new value for a non-trainable buffer (running statistics).
    pub fn push_buffer_update(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffer_updates.push((name.into(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = back(&g, &self.values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), self.values[p].shape(), "gradient shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.values.iter().map(|v| v.shape()).collect(),
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(v, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(v, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let (ia, ib) = (a.0, b.0);
        self.custom(
            v,
            &[a, b],
            Box::new(move |g, vals| {
                vec![
                    Some(g.zip_map(&vals[ib], |x, y| x * y)),
                    Some(g.zip_map(&vals[ia], |x, y| x * y)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scaled(s);
        self.custom(v, &[a], Box::new(move |g, _| vec![Some(g.scaled(s))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.custom(v, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn unary(&mut self, a: Var, op: Unary) -> Var {
        let v = self.value(a).map(|x| op.forward(x));
        let (ia, out) = (a.0, self.values.len());
        self.custom(
            v,
            &[a],
            Box::new(move |g, vals| {
                let x = vals[ia].data();
                let y = vals[out].data();
                let data = g
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * op.derivative(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.rows(), g.cols(), data))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ia = a.0;
        self.custom(
            v,
            &[a],
            Box::new(move |g, vals| {
                let mut out = g.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(vals[ia].data()) {
                    if x < lo || x > hi {
                        *o = T::zero();
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    // ---- broadcasting ----

    /// `a (m×n) + row (1×n)` on every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} row");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, &b) in v.row_slice_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.custom(v, &[a, row], Box::new(|g, _| vec![Some(g.clone()), Some(col_sums(g))]))
    }

    /// `a (m×n) ⊙ row (1×n)` on every row.
    /// `a − row` broadcast over rows.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let n = self.neg(row);
        self.add_row(a, n)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row expects a 1x{n} row");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, &b) in v.row_slice_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let (ia, ir) = (a.0, row.0);
        self.custom(
            v,
            &[a, row],
            Box::new(move |g, vals| {
                let r = vals[ir].data();
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    for (x, &b) in ga.row_slice_mut(i).iter_mut().zip(r) {
                        *x *= b;
                    }
                }
                let gr = col_sums(&g.zip_map(&vals[ia], |x, y| x * y));
                vec![Some(ga), Some(gr)]
            }),
        )
    }

    /// `a (m×n) ⊙ col (m×1)` on every column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col expects a {m}x1 column");
        let mut v = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, &s) in c.iter().enumerate() {
            for x in v.row_slice_mut(i) {
                *x *= s;
            }
        }
        let (ia, ic) = (a.0, col.0);
        self.custom(
            v,
            &[a, col],
            Box::new(move |g, vals| {
                let c = vals[ic].data();
                let mut ga = g.clone();
                for (i, &s) in c.iter().enumerate() {
                    for x in ga.row_slice_mut(i) {
                        *x *= s;
                    }
                }
                let gc = row_sums(&g.zip_map(&vals[ia], |x, y| x * y));
                vec![Some(ga), Some(gc)]
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let (ia, ib) = (a.0, b.0);
        self.custom(
            v,
            &[a, b],
            Box::new(move |g, vals| {
                vec![
                    Some(g.matmul_t(false, &vals[ib], true)),
                    Some(vals[ia].matmul_t(true, g, false)),
                ]
            }),
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(false, self.value(b), true);
        let (ia, ib) = (a.0, b.0);
        self.custom(
            v,
            &[a, b],
            Box::new(move |g, vals| {
                vec![
                    Some(g.matmul(&vals[ib])),
                    Some(g.matmul_t(true, &vals[ia], false)),
                ]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.custom(v, &[a], Box::new(|g, _| vec![Some(g.transpose())]))
    }

    /// `x · w + b` with `w` of shape `in×out` and `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Builds an `n×n` diagonal matrix from a `1×n` row.
    pub fn diag(&mut self, v: Var) -> Var {
        let (r, n) = self.shape(v);
        assert_eq!(r, 1);
        let mut out = Tensor::zeros(n, n);
        for (i, &x) in self.value(v).data().iter().enumerate() {
            out.set(i, i, x);
        }
        self.custom(
            out,
            &[v],
            Box::new(move |g, _| vec![Some(Tensor::from_fn(1, n, |_, j| g.get(j, j)))]),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(v, &[a], Box::new(move |g, _| vec![Some(Tensor::filled(m, n, g.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize((m * n).max(1)).unwrap())
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let v = col_sums(self.value(a));
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let n = g.cols();
                vec![Some(Tensor::from_fn(m, n, |_, j| g.get(0, j)))]
            }),
        )
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (_, n) = self.shape(a);
        let v = row_sums(self.value(a));
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let m = g.rows();
                vec![Some(Tensor::from_fn(m, n, |i, _| g.get(i, 0)))]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.shape(a);
        let v = self.value(a).clone().reshape(rows, cols);
        self.custom(v, &[a], Box::new(move |g, _| vec![Some(g.clone().reshape(m, n))]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        let v = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat_cols(&refs)
        };
        self.custom(
            v,
            parts,
            Box::new(move |g, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let s = g.slice_cols(start, start + w);
                        start += w;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let heights: Vec<usize> = parts.iter().map(|p| self.shape(*p).0).collect();
        let v = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat_rows(&refs)
        };
        self.custom(
            v,
            parts,
            Box::new(move |g, _| {
                let mut start = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let s = g.slice_rows(start, start + h);
                        start += h;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        let v = self.value(a).slice_cols(start, end);
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(m, n);
                for i in 0..m {
                    out.row_slice_mut(i)[start..end].copy_from_slice(g.row_slice(i));
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        let v = self.value(a).slice_rows(start, end);
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(m, n);
                out.data_mut()[start * n..end * n].copy_from_slice(g.data());
                vec![Some(out)]
            }),
        )
    }

    /// Picks rows by index (embedding lookup); repeated indices accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut v = Tensor::zeros(idx.len(), n);
        for (o, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather index {i} out of range for {m} rows");
            v.row_slice_mut(o).copy_from_slice(src.row_slice(i));
        }
        let idx = idx.to_vec();
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(m, n);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, &gv) in out.row_slice_mut(i).iter_mut().zip(g.row_slice(o)) {
                        *x += gv;
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    // ---- normalization ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_slice_mut(i);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let out = self.values.len();
        self.custom(
            v,
            &[a],
            Box::new(move |g, vals| {
                let y = &vals[out];
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_slice_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Scaled dot-product self-attention applied independently to each block
    /// of `block` consecutive rows and each of `heads` column groups of the
    /// projected queries, keys and values (all `N × D`, `D` divisible by
    /// `heads`). Returns the concatenated head outputs (`N × D`).
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        assert!(block > 0 && n % block == 0, "rows must split into blocks");
        assert!(heads > 0 && d % heads == 0, "width must split into heads");
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        let probs = attention_probs(self.value(q), self.value(k), block, heads);
        let dk = d / heads;
        let vv = self.value(v);
        let mut out = Tensor::zeros(n, d);
        for (bi, per_head) in probs.iter().enumerate() {
            for (h, a) in per_head.iter().enumerate() {
                for i in 0..block {
                    for j in 0..block {
                        let w = a.get(i, j);
                        let src = vv.row_slice(bi * block + j);
                        let dst = out.row_slice_mut(bi * block + i);
                        for c in h * dk..(h + 1) * dk {
                            dst[c] += w * src[c];
                        }
                    }
                }
            }
        }
        let (qi, ki, vi) = (q.0, k.0, v.0);
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        self.custom(
            out,
            &[q, k, v],
            Box::new(move |g, vals| {
                let (qv, kv, vv) = (&vals[qi], &vals[ki], &vals[vi]);
                let mut gq = Tensor::zeros(n, d);
                let mut gk = Tensor::zeros(n, d);
                let mut gv = Tensor::zeros(n, d);
                for (bi, per_head) in probs.iter().enumerate() {
                    let r0 = bi * block;
                    for (h, a) in per_head.iter().enumerate() {
                        let cols = h * dk..(h + 1) * dk;
                        // dA = dO·Vᵀ, dV = Aᵀ·dO
                        let mut da = Tensor::zeros(block, block);
                        for i in 0..block {
                            let gr = g.row_slice(r0 + i);
                            for j in 0..block {
                                let vr = vv.row_slice(r0 + j);
                                let mut acc = T::zero();
                                for c in cols.clone() {
                                    acc += gr[c] * vr[c];
                                }
                                da.set(i, j, acc);
                                let w = a.get(i, j);
                                let dst = gv.row_slice_mut(r0 + j);
                                for c in cols.clone() {
                                    dst[c] += w * gr[c];
                                }
                            }
                        }
                        // dS = A ⊙ (dA − rowsum(dA ⊙ A)), scaled into dQ and dK
                        for i in 0..block {
                            let dot: T = (0..block).map(|j| da.get(i, j) * a.get(i, j)).sum();
                            for j in 0..block {
                                let ds = a.get(i, j) * (da.get(i, j) - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                for c in cols.clone() {
                                    let kc = kv.get(r0 + j, c);
                                    let qc = qv.get(r0 + i, c);
                                    gq.row_slice_mut(r0 + i)[c] += ds * kc;
                                    gk.row_slice_mut(r0 + j)[c] += ds * qc;
                                }
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        )
    }

    /// Standardizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let nf = T::from_usize(n).unwrap();
        let mut y = Tensor::zeros(m, n);
        let mut inv_std = vec![T::zero(); m];
        for i in 0..m {
            let row = x.row_slice(i);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, &v) in y.row_slice_mut(i).iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let out = self.values.len();
        self.custom(
            y,
            &[a],
            Box::new(move |g, vals| {
                let y = &vals[out];
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let gm = gr.iter().copied().sum::<T>() / nf;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((o, &yv), &gv) in gx.row_slice_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[i] * (gv - gm - yv * gym);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Standardizes each column with its batch statistics. Returns the
    /// normalized node and the per-column (mean, biased variance).
    pub fn batch_norm_cols(&mut self, a: Var, eps: T) -> (Var, Vec<T>, Vec<T>) {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        for i in 0..m {
            for (mu, &v) in mean.iter_mut().zip(x.row_slice(i)) {
                *mu += v;
            }
        }
        for mu in &mut mean {
            *mu = *mu / mf;
        }
        for i in 0..m {
            for ((s, &mu), &v) in var.iter_mut().zip(&mean).zip(x.row_slice(i)) {
                *s += (v - mu) * (v - mu);
            }
        }
        for s in &mut var {
            *s = *s / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = Tensor::zeros(m, n);
        for i in 0..m {
            let row = x.row_slice(i);
            for (j, o) in y.row_slice_mut(i).iter_mut().enumerate() {
                *o = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let out = self.values.len();
        let node = self.custom(
            y,
            &[a],
            Box::new(move |g, vals| {
                let y = &vals[out];
                let mut gm = vec![T::zero(); n];
                let mut gym = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gm[j] += g.get(i, j);
                        gym[j] += g.get(i, j) * y.get(i, j);
                    }
                }
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        let v = inv_std[j] * (g.get(i, j) - gm[j] / mf - y.get(i, j) * gym[j] / mf);
                        gx.set(i, j, v);
                    }
                }
                vec![Some(gx)]
            }),
        );
        (node, mean, var)
    }

    // ---- convolution helpers ----

    /// Unfolds a `T×C` sequence into `T×(k·C)` dilated windows with
    /// zero padding of `dilation·(k−1)/2` frames at each end, so a following
    /// matmul is a length-preserving 1D convolution.
    pub fn im2col_1d(&mut self, a: Var, kernel: usize, dilation: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let x = self.value(a);
        let (t_len, c) = x.shape();
        let half = (kernel / 2) as isize;
        let mut v = Tensor::zeros(t_len, kernel * c);
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize + (j as isize - half) * dilation as isize;
                if src >= 0 && (src as usize) < t_len {
                    v.row_slice_mut(t)[j * c..(j + 1) * c].copy_from_slice(x.row_slice(src as usize));
                }
            }
        }
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(t_len, c);
                for t in 0..t_len {
                    for j in 0..kernel {
                        let src = t as isize + (j as isize - half) * dilation as isize;
                        if src >= 0 && (src as usize) < t_len {
                            let gr = &g.row_slice(t)[j * c..(j + 1) * c];
                            for (o, &gv) in gx.row_slice_mut(src as usize).iter_mut().zip(gr) {
                                *o += gv;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Unfolds an image stored as `(H·W)×C` into `(H·W)×(k·k·C)` patches with
    /// zero "same" padding.
    pub fn im2col_2d(&mut self, a: Var, height: usize, width: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let x = self.value(a);
        let c = x.cols();
        assert_eq!(x.rows(), height * width);
        let half = (kernel / 2) as isize;
        let kc = kernel * kernel * c;
        let mut v = Tensor::zeros(height * width, kc);
        let src_of = move |y: usize, xx: usize, ky: usize, kx: usize| -> Option<usize> {
            let sy = y as isize + ky as isize - half;
            let sx = xx as isize + kx as isize - half;
            (sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width)
                .then(|| sy as usize * width + sx as usize)
        };
        for y in 0..height {
            for xx in 0..width {
                let row = y * width + xx;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        if let Some(s) = src_of(y, xx, ky, kx) {
                            let off = (ky * kernel + kx) * c;
                            v.row_slice_mut(row)[off..off + c].copy_from_slice(x.row_slice(s));
                        }
                    }
                }
            }
        }
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(height * width, c);
                for y in 0..height {
                    for xx in 0..width {
                        let row = y * width + xx;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                if let Some(s) = src_of(y, xx, ky, kx) {
                                    let off = (ky * kernel + kx) * c;
                                    let gr = &g.row_slice(row)[off..off + c];
                                    for (o, &gv) in gx.row_slice_mut(s).iter_mut().zip(gr) {
                                        *o += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Inverted dropout with keep-probability `1 − p`; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (m, n) = self.shape(a);
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(m, n, |_, _| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let mask = self.constant(mask);
        self.mul(a, mask)
    }
}

/// Attention weights `softmax(Q_h·K_hᵀ/√d_k)` for every block and head,
/// indexed `[block][head]`, each `block × block` with rows summing to one.
pub fn attention_probs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, block: usize, heads: usize) -> Vec<Vec<Tensor<T>>> {
    let (n, d) = q.shape();
    let dk = d / heads;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    (0..n / block)
        .map(|bi| {
            (0..heads)
                .map(|h| {
                    let mut a = Tensor::from_fn(block, block, |i, j| {
                        let qr = &q.row_slice(bi * block + i)[h * dk..(h + 1) * dk];
                        let kr = &k.row_slice(bi * block + j)[h * dk..(h + 1) * dk];
                        qr.iter().zip(kr).map(|(&x, &y)| x * y).sum::<T>() * scale
                    });
                    for i in 0..block {
                        let row = a.row_slice_mut(i);
                        let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                        let mut s = T::zero();
                        for x in row.iter_mut() {
                            *x = (*x - mx).exp();
                            s += *x;
                        }
                        for x in row.iter_mut() {
                            *x = *x / s;
                        }
                    }
                    a
                })
                .collect()
        })
        .collect()
}

pub fn col_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

pub fn row_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    Tensor::new(g.rows(), 1, (0..g.rows()).map(|i| g.row_slice(i).iter().copied().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::gradcheck::check_inputs;

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        // small deterministic pseudo-random values in [-1, 1]
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn block_attention_matches_composed_ops() {
        let (q, k, v) = (t(6, 4, 1), t(6, 4, 2), t(6, 4, 3));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let fused = tape.block_attention(qv, kv, vv, 3, 2);
        let fused = tape.value(fused).clone();
        for b in 0..2 {
            for h in 0..2 {
                let qs = tape.constant(q.slice_rows(b * 3, b * 3 + 3).slice_cols(h * 2, h * 2 + 2));
                let ks = tape.constant(k.slice_rows(b * 3, b * 3 + 3).slice_cols(h * 2, h * 2 + 2));
                let vs = tape.constant(v.slice_rows(b * 3, b * 3 + 3).slice_cols(h * 2, h * 2 + 2));
                let s = tape.matmul_nt(qs, ks);
                let s = tape.scale(s, 1.0 / 2f64.sqrt());
                let a = tape.softmax_rows(s);
                let o = tape.matmul(a, vs);
                for i in 0..3 {
                    for c in 0..2 {
                        assert!((tape.value(o).get(i, c) - fused.get(b * 3 + i, h * 2 + c)).abs() < 1e-12);
                    }
                }
            }
        }
        for per_head in attention_probs(&q, &k, 3, 2) {
            for a in per_head {
                for i in 0..3 {
                    let s: f64 = a.row_slice(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_attention_gradients() {
        check(vec![t(6, 4, 4), t(6, 4, 5), t(6, 4, 6), t(6, 4, 7)], |tp, x| {
            let o = tp.block_attention(x[0], x[1], x[2], 3, 2);
            let w = tp.mul(o, x[3]);
            tp.sum(w)
        });
    }

    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let err = check_inputs(&inputs, &f, 1e-6);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check(vec![t(3, 4, 1), t(3, 4, 2), t(1, 4, 3), t(3, 1, 4)], |tp, v| {
            let a = tp.mul(v[0], v[1]);
            let b = tp.add_row(a, v[2]);
            let c = tp.mul_row(b, v[2]);
            let d = tp.mul_col(c, v[3]);
            let e = tp.sub(d, v[0]);
            let f = tp.square(e);
            tp.sum(f)
        });
    }

    #[test]
    fn unary_gradients() {
        for op in [Unary::Relu, Unary::Gelu, Unary::Sigmoid, Unary::Softplus, Unary::Tanh, Unary::Exp, Unary::Square] {
            check(vec![t(2, 5, 7)], |tp, v| {
                let y = tp.unary(v[0], op);
                let w = tp.constant(t(2, 5, 8));
                let z = tp.mul(y, w);
                tp.sum(z)
            });
        }
        check(vec![t(2, 5, 9).map(|x| x.abs() + 0.5)], |tp, v| {
            let a = tp.ln(v[0]);
            let b = tp.sqrt(v[0]);
            let c = tp.recip(v[0]);
            let s = tp.concat_cols(&[a, b, c]);
            let w = tp.constant(t(2, 15, 10));
            let z = tp.mul(s, w);
            tp.sum(z)
        });
    }

    #[test]
    fn matmul_and_shape_gradients() {
        check(vec![t(3, 4, 11), t(4, 2, 12), t(5, 4, 13)], |tp, v| {
            let a = tp.matmul(v[0], v[1]);
            let b = tp.matmul_nt(v[0], v[2]);
            let bt = tp.transpose(b);
            let c = tp.matmul(bt, a);
            let r = tp.reshape(c, 2, 5);
            let s = tp.slice_cols(r, 1, 4);
            let rows = tp.slice_rows(s, 1, 2);
            let g = tp.gather_rows(v[2], &[0, 3, 3]);
            let gs = tp.sum_rows(g);
            let cs = tp.sum_cols(v[0]);
            let cc = tp.concat_rows(&[cs, cs]);
            let p = tp.sum(rows);
            let q = tp.sum(gs);
            let q2 = tp.mul(q, p);
            let sq = tp.square(cc);
            let w = tp.sum(sq);
            tp.add(q2, w)
        });
    }

    #[test]
    fn normalization_gradients() {
        check(vec![t(4, 6, 21)], |tp, v| {
            let a = tp.softmax_rows(v[0]);
            let b = tp.layer_norm_rows(v[0], 1e-5);
            let (c, _, _) = tp.batch_norm_cols(v[0], 1e-5);
            let w = tp.constant(t(4, 18, 22));
            let s = tp.concat_cols(&[a, b, c]);
            let z = tp.mul(s, w);
            tp.sum(z)
        });
    }

    #[test]
    fn convolution_unfold_gradients() {
        check(vec![t(7, 3, 31), t(9, 2, 32)], |tp, v| {
            let a = tp.im2col_1d(v[0], 3, 2);
            let b = tp.im2col_2d(v[1], 3, 3, 3);
            let wa = tp.constant(t(7, 9, 33));
            let wb = tp.constant(t(9, 18, 34));
            let x = tp.mul(a, wa);
            let y = tp.mul(b, wb);
            let sx = tp.sum(x);
            let sy = tp.sum(y);
            tp.add(sx, sy)
        });
    }

    #[test]
    fn diag_and_clamp_gradients() {
        check(vec![t(1, 4, 41), t(4, 4, 42)], |tp, v| {
            let d = tp.diag(v[0]);
            let m = tp.matmul(d, v[1]);
            let c = tp.clamp(m, -0.3, 0.4);
            let sq = tp.square(c);
            tp.sum(sq)
        });
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tp = Tape::<f64>::new();
        let x = tp.input(Tensor::scalar(3.0));
        let y = tp.mul(x, x);
        let z = tp.add(y, x);
        let g = tp.backward(z);
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tp = Tape::<f32>::new();
        let x = tp.input(Tensor::scalar(2.0));
        let c = tp.constant(Tensor::scalar(5.0));
        let y = tp.mul(x, c);
        assert!(!tp.requires_grad(c));
        let g = tp.backward(y);
        assert_eq!(g.wrt(c).item(), 0.0);
        assert_eq!(g.wrt(x).item(), 5.0);
    }
}
