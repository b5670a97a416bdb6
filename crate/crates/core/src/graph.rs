//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records eagerly-evaluated ops; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every variable flagged as a
//! parameter. The op set is exactly what the detector-VAE objective needs —
//! nothing speculative.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_weight, matmul_abt_acc, matmul_acc, matmul_atb_acc,
    ConvSpec, Scalar, Tensor,
};

/// Handle to a value in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalarF(Var),
    MulScalarF(Var, f64),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul(Var, Var),
    /// `[n,d] + [d]` broadcast over rows
    RowAdd(Var, Var),
    /// `[n,d] * [d]` broadcast over rows
    RowMul(Var, Var),
    /// `[n,C,H,W] + [C]` broadcast over channel planes
    ChanAdd(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    /// Transposed convolution: maps the "small" side back to the "large"
    /// side of `spec`. `out_hw` is the large-side spatial size.
    ConvT2d {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    Reshape(Var),
    SumAll(Var),
    /// Row-wise log-softmax over `[n,2]`.
    LogSoftmax2(Var),
    /// Column selection from `[n,2]` into `[n]`.
    ColSel2(Var, usize),
    /// Column range selection from `[n,d]` into `[n,to-from]`.
    SliceCols(Var, usize, usize),
}

pub struct Graph<T: Scalar> {
    vals: Vec<Tensor<T>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            vals: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, t: Tensor<T>, op: Op, needs: bool) -> Var {
        self.vals.push(t);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.vals.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant leaf: gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf: [`Graph::backward`] accumulates its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = T::of_f64(s);
        let t = self.vals[a.0].map(|x| x + sv);
        let ng = self.needs(a);
        self.push(t, Op::AddScalarF(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = T::of_f64(s);
        let t = self.vals[a.0].map(|x| x * sv);
        let ng = self.needs(a);
        self.push(t, Op::MulScalarF(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.vals[a.0].map(|x| -x);
        let ng = self.needs(a);
        self.push(t, Op::Neg(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.vals[a.0].map(|x| x.exp());
        let ng = self.needs(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.vals[a.0].map(|x| x.ln());
        let ng = self.needs(a);
        self.push(t, Op::Ln(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.vals[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let t = self.vals[a.0].map(|x| one / (one + (-x).exp()));
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn row_add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let d = tb.len();
        assert_eq!(ta.row_len(), d, "row_add widths");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::RowAdd(a, b), ng)
    }

    pub fn row_mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let d = tb.len();
        assert_eq!(ta.row_len(), d, "row_mul widths");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v *= bv;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::RowMul(a, b), ng)
    }

    pub fn chan_add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let c = tb.len();
        assert_eq!(ta.shape()[1], c, "chan_add channels");
        let plane = ta.shape()[2] * ta.shape()[3];
        let mut out = ta.clone();
        for sample in out.data_mut().chunks_mut(c * plane) {
            for (ch, chunk) in sample.chunks_mut(plane).enumerate() {
                let bv = tb.data()[ch];
                for v in chunk.iter_mut() {
                    *v += bv;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::ChanAdd(a, b), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let out = conv2d(&self.vals[x.0], &self.vals[w.0], &spec);
        let ng = self.needs(x) || self.needs(w);
        self.push(out, Op::Conv2d { x, w, spec }, ng)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvSpec, out_hw: (usize, usize)) -> Var {
        let out = conv2d_grad_input(&self.vals[x.0], &self.vals[w.0], &spec, out_hw);
        let ng = self.needs(x) || self.needs(w);
        self.push(out, Op::ConvT2d { x, w, spec }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.vals[a.0].clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.vals[a.0].sum());
        let ng = self.needs(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn log_softmax2(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.row_len(), 2, "log_softmax2 expects [n,2]");
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(2) {
            let m = if row[0] > row[1] { row[0] } else { row[1] };
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            row[0] = row[0] - lse;
            row[1] = row[1] - lse;
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax2(a), ng)
    }

    pub fn col_sel2(&mut self, a: Var, col: usize) -> Var {
        let ta = &self.vals[a.0];
        assert_eq!(ta.row_len(), 2, "col_sel2 expects [n,2]");
        assert!(col < 2);
        let n = ta.rows();
        let data = (0..n).map(|i| ta.data()[i * 2 + col]).collect();
        let ng = self.needs(a);
        self.push(Tensor::from_vec(&[n], data), Op::ColSel2(a, col), ng)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let ta = &self.vals[a.0];
        let d = ta.row_len();
        assert!(from < to && to <= d, "slice_cols range");
        let n = ta.rows();
        let w = to - from;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&ta.row(i)[from..to]);
        }
        let ng = self.needs(a);
        self.push(Tensor::from_vec(&[n, w], data), Op::SliceCols(a, from, to), ng)
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// grad-requiring variable reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.vals[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map(&self.vals[b.0], |gv, bv| gv * bv);
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map(&self.vals[a.0], |gv, av| gv * av);
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddScalarF(a) => Self::accumulate(&mut grads, *a, g),
                Op::MulScalarF(a, s) => {
                    let sv = T::of_f64(*s);
                    Self::accumulate(&mut grads, *a, g.map(|x| x * sv));
                }
                Op::Neg(a) => Self::accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Exp(a) => {
                    let ga = g.zip_map(&self.vals[idx], |gv, yv| gv * yv);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(&self.vals[a.0], |gv, xv| gv / xv);
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.vals[a.0], |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let one = T::one();
                    let ga = g.zip_map(&self.vals[idx], |gv, yv| gv * yv * (one - yv));
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(&[m, k]);
                        matmul_abt_acc(g.data(), tb.data(), da.data_mut(), m, n, k);
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&[k, n]);
                        matmul_atb_acc(ta.data(), g.data(), db.data_mut(), k, m, n);
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::RowAdd(a, b) => {
                    let d = self.vals[b.0].len();
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&[d]);
                        for row in g.data().chunks(d) {
                            for (s, &gv) in db.data_mut().iter_mut().zip(row) {
                                *s += gv;
                            }
                        }
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::RowMul(a, b) => {
                    let d = self.vals[b.0].len();
                    if self.needs(*a) {
                        let tb = &self.vals[b.0];
                        let mut da = g.clone();
                        for row in da.data_mut().chunks_mut(d) {
                            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                                *v *= bv;
                            }
                        }
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let ta = &self.vals[a.0];
                        let mut db = Tensor::zeros(&[d]);
                        for (grow, arow) in g.data().chunks(d).zip(ta.data().chunks(d)) {
                            for ((s, &gv), &av) in db.data_mut().iter_mut().zip(grow).zip(arow) {
                                *s += gv * av;
                            }
                        }
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::ChanAdd(a, b) => {
                    let ta = &self.vals[a.0];
                    let c = self.vals[b.0].len();
                    let plane = ta.shape()[2] * ta.shape()[3];
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&[c]);
                        for sample in g.data().chunks(c * plane) {
                            for (ch, chunk) in sample.chunks(plane).enumerate() {
                                let mut acc = T::zero();
                                for &v in chunk {
                                    acc += v;
                                }
                                db.data_mut()[ch] += acc;
                            }
                        }
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::Conv2d { x, w, spec } => {
                    let (h, wd) = (self.vals[x.0].shape()[2], self.vals[x.0].shape()[3]);
                    if self.needs(*x) {
                        let dx = conv2d_grad_input(&g, &self.vals[w.0], spec, (h, wd));
                        Self::accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = conv2d_grad_weight(&self.vals[x.0], &g, spec);
                        Self::accumulate(&mut grads, *w, dw);
                    }
                }
                Op::ConvT2d { x, w, spec } => {
                    if self.needs(*x) {
                        let dx = conv2d(&g, &self.vals[w.0], spec);
                        Self::accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = conv2d_grad_weight(&g, &self.vals[x.0], spec);
                        Self::accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Reshape(a) => {
                    let back = g.reshaped(self.vals[a.0].shape());
                    Self::accumulate(&mut grads, *a, back);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let da = Tensor::full(self.vals[a.0].shape(), gv);
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmax2(a) => {
                    let y = &self.vals[idx];
                    let mut da = g.clone();
                    for (drow, yrow) in da.data_mut().chunks_mut(2).zip(y.data().chunks(2)) {
                        let gsum = drow[0] + drow[1];
                        drow[0] = drow[0] - yrow[0].exp() * gsum;
                        drow[1] = drow[1] - yrow[1].exp() * gsum;
                    }
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::ColSel2(a, col) => {
                    let n = g.len();
                    let mut da = Tensor::zeros(&[n, 2]);
                    for (i, &gv) in g.data().iter().enumerate() {
                        da.data_mut()[i * 2 + col] = gv;
                    }
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, from, to) => {
                    let ta = &self.vals[a.0];
                    let (n, d) = (ta.rows(), ta.row_len());
                    let w = to - from;
                    let mut da = Tensor::zeros(&[n, d]);
                    for i in 0..n {
                        da.data_mut()[i * d + from..i * d + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    Self::accumulate(&mut grads, *a, da);
                }
            }
            grads[idx] = None;
        }

        // Leaves kept their accumulated gradients; everything else was
        // consumed during the sweep.
        for idx in 0..self.vals.len() {
            if !matches!(self.ops[idx], Op::Leaf) {
                grads[idx] = None;
            }
        }
        Gradients { grads }
    }
}

/// Central-difference gradient oracle, independent of the tape: evaluates a
/// closure at `p ± h` componentwise. Used by the gradient-agreement tests.
pub mod gradcheck {
    use super::*;

    /// d/dp f(p) via central differences for every element of `p`.
    pub fn finite_diff<T: Scalar>(
        p: &Tensor<T>,
        h: f64,
        mut f: impl FnMut(&Tensor<T>) -> T,
    ) -> Tensor<T> {
        let mut grad = Tensor::zeros(p.shape());
        let hv = T::of_f64(h);
        for i in 0..p.len() {
            let mut hi = p.clone();
            hi.data_mut()[i] += hv;
            let mut lo = p.clone();
            lo.data_mut()[i] -= hv;
            grad.data_mut()[i] = (f(&hi) - f(&lo)) / (hv + hv);
        }
        grad
    }

    /// Largest relative error between two gradients, with an absolute floor
    /// so near-zero entries do not blow up the ratio.
    pub fn max_rel_err<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| {
                let denom = a.abs().max(n.abs()).as_f64().max(1e-6);
                (a - n).abs().as_f64() / denom
            })
            .fold(0.0, f64::max)
    }
}
