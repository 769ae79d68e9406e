//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created) and [`Graph::backward`] walks the tape in reverse. Nodes
//! that do not depend on any parameter leaf are skipped during the backward
//! pass.
//!
//! Row/column conventions follow [`Tensor`]: the last dimension is the column
//! dimension, everything before it is flattened into rows.

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
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
    Gather { src: Var, idx: Vec<usize> },
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, batch: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    MulConst { x: Var, c: Vec<f64> },
    AddConst { x: Var },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid { x: Var, clamp: f64 },
    LogSumExp { x: Var, mask: Vec<bool> },
    RowDot { a: Var, b: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Expand { x: Var, times: usize },
    Reshape(Var),
    Sum(Var),
    SelectTime { x: Var, j: usize },
    StackTime(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Selects rows of `src` (viewed as `[rows, cols]`) into `[idx.len(), cols]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let c = s.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(s.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out);
        let ng = self.ng(src);
        self.push(t, Op::Gather { src, idx: idx.to_vec() }, ng)
    }

    /// `a [.., k] · b [k, m]` (or `b [m, k]ᵀ` with `trans_b`), output `[rows(a), m]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = if trans_b { bv.rows() } else { bv.cols() };
        let bk = if trans_b { bv.cols() } else { bv.rows() };
        assert_eq!(k, bk, "matmul shapes {:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b }, ng)
    }

    /// Batched product of `[B, n, k]` with `[B, k, m]` (or `[B, m, k]ᵀ`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        let batch = av.shape()[0];
        assert_eq!(batch, bv.shape()[0]);
        let (n, k) = (av.shape()[1], av.shape()[2]);
        let (m, bk) = if trans_b {
            (bv.shape()[1], bv.shape()[2])
        } else {
            (bv.shape()[2], bv.shape()[1])
        };
        assert_eq!(k, bk, "batch_matmul shapes {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            gemm(
                n,
                k,
                m,
                &av.data()[bi * n * k..(bi + 1) * n * k],
                false,
                &bv.data()[bi * k * m..(bi + 1) * k * m],
                trans_b,
                0.0,
                &mut out[bi * n * m..(bi + 1) * n * m],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(vec![batch, n, m], out),
            Op::BatchMatMul { a, b, batch, trans_b },
            ng,
        )
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        assert_eq!(rv.numel(), c);
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for (v, b) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(t, Op::AddRow { x, row }, ng)
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        assert_eq!(rv.numel(), c);
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for (v, g) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *v *= g;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(t, Op::MulRow { x, row }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v *= c;
        }
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let mut t = self.value(x).clone();
        assert_eq!(t.numel(), c.len());
        for (v, m) in t.data_mut().iter_mut().zip(&c) {
            *v *= m;
        }
        let ng = self.ng(x);
        self.push(t, Op::MulConst { x, c }, ng)
    }

    /// Multiplies each row by a per-row constant (row masks).
    pub fn mul_rows_const(&mut self, x: Var, per_row: &[f64]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), per_row.len());
        let expanded = per_row.iter().flat_map(|&m| std::iter::repeat_n(m, c)).collect();
        self.mul_const(x, expanded)
    }

    /// Adds a constant of the same size.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        let mut t = self.value(x).clone();
        assert_eq!(t.numel(), c.len());
        for (v, a) in t.data_mut().iter_mut().zip(c) {
            *v += a;
        }
        let ng = self.ng(x);
        self.push(t, Op::AddConst { x }, ng)
    }

    /// Softmax over the last dimension restricted to `mask == true` entries.
    /// Masked entries get exactly zero weight; fully masked rows are all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), mask.len());
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mrow = &mask[r * c..(r + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (v, &m) in row.iter().zip(mrow) {
                if m && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for ((o, v), &m) in orow.iter_mut().zip(row).zip(mrow) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(t, Op::MaskedSoftmax { x, mask }, ng)
    }

    /// Normalizes each row to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut t = xv.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, eps }, ng)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// `ln σ(clamp(x, -clamp, clamp))`.
    pub fn log_sigmoid(&mut self, x: Var, clamp: f64) -> Var {
        let t = self.map(x, |v| -softplus(-v.clamp(-clamp, clamp)));
        let ng = self.ng(x);
        self.push(t, Op::LogSigmoid { x, clamp }, ng)
    }

    /// Row-wise `ln Σ exp` over unmasked entries; output has one value per row.
    pub fn log_sum_exp(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), mask.len());
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mrow = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |a, (v, _)| a.max(*v));
            let sum: f64 = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(v, _)| (v - max).exp())
                .sum();
            out.push(max + sum.ln());
        }
        let t = Tensor::new(vec![xv.rows()], out);
        let ng = self.ng(x);
        self.push(t, Op::LogSumExp { x, mask }, ng)
    }

    /// Per-row dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let out = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect::<Vec<f64>>();
        let t = Tensor::new(vec![av.rows()], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::RowDot { a, b }, ng)
    }

    /// Concatenates along the last dimension; all inputs must share row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let total: usize = xs.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let ng = xs.iter().any(|v| self.ng(*v));
        self.push(Tensor::new(shape, out), Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SliceCols { x, start }, ng)
    }

    /// `[B, 1, m]` → `[B, times, m]` by repetition.
    pub fn expand(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 3);
        assert_eq!(xv.shape()[1], 1);
        let (b, m) = (xv.shape()[0], xv.shape()[2]);
        let mut out = Vec::with_capacity(b * times * m);
        for bi in 0..b {
            let row = &xv.data()[bi * m..(bi + 1) * m];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![b, times, m], out), Op::Expand { x, times }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Position `j` of a `[B, L, d]` tensor as `[B, d]`.
    pub fn select_time(&mut self, x: Var, j: usize) -> Var {
        let xv = self.value(x);
        let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(j < l);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * l + j) * d;
            out.extend_from_slice(&xv.data()[off..off + d]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![b, d], out), Op::SelectTime { x, j }, ng)
    }

    /// Stacks `L` tensors of shape `[B, d]` into `[B, L, d]`.
    pub fn stack_time(&mut self, xs: &[Var]) -> Var {
        let (b, d) = {
            let v = self.value(xs[0]);
            (v.shape()[0], v.shape()[1])
        };
        let l = xs.len();
        let mut out = vec![0.0; b * l * d];
        for (j, v) in xs.iter().enumerate() {
            let vv = self.value(*v);
            for bi in 0..b {
                let off = (bi * l + j) * d;
                out[off..off + d].copy_from_slice(vv.row(bi));
            }
        }
        let ng = xs.iter().any(|v| self.ng(*v));
        self.push(Tensor::new(vec![b, l, d], out), Op::StackTime(xs.to_vec()), ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.value(out).shape().to_vec(), vec![1.0]));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Gather { src, idx } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let mut t = Tensor::zeros(sv.shape().to_vec());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = t.row_mut(i);
                    for (d, s) in dst.iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *d += s;
                    }
                }
                acc(*src, t);
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ  (or G · B when B is stored transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), !trans_b, 0.0, &mut da);
                    acc(*a, Tensor::new(av.shape().to_vec(), da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(n, m, k, gd, true, av.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, 0.0, &mut db);
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::BatchMatMul { a, b, batch, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = (av.shape()[1], av.shape()[2]);
                let m = g.shape()[2];
                let (sa, sb, sg) = (n * k, k * m, n * m);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; batch * sa];
                    for bi in 0..*batch {
                        gemm(
                            n,
                            m,
                            k,
                            &gd[bi * sg..(bi + 1) * sg],
                            false,
                            &bv.data()[bi * sb..(bi + 1) * sb],
                            !trans_b,
                            0.0,
                            &mut da[bi * sa..(bi + 1) * sa],
                        );
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; batch * sb];
                    for bi in 0..*batch {
                        let gs = &gd[bi * sg..(bi + 1) * sg];
                        let as_ = &av.data()[bi * sa..(bi + 1) * sa];
                        let out = &mut db[bi * sb..(bi + 1) * sb];
                        if *trans_b {
                            gemm(m, n, k, gs, true, as_, false, 0.0, out);
                        } else {
                            gemm(k, n, m, as_, true, gs, false, 0.0, out);
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                acc(*b, Tensor::new(g.shape().to_vec(), neg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::new(shape_of(*a), da));
                acc(*b, Tensor::new(shape_of(*b), db));
            }
            Op::AddRow { x, row } => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut dr = vec![0.0; c];
                for r in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*row, Tensor::new(shape_of(*row), dr));
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let c = g.cols();
                let mut dx = g.clone();
                let mut dr = vec![0.0; c];
                for r in 0..g.rows() {
                    let xr = xv.row(r);
                    for j in 0..c {
                        dr[j] += g.row(r)[j] * xr[j];
                    }
                    for (d, s) in dx.row_mut(r).iter_mut().zip(rv.data()) {
                        *d *= s;
                    }
                }
                acc(*x, dx);
                acc(*row, Tensor::new(shape_of(*row), dr));
            }
            Op::Scale { x, c } => {
                acc(*x, Tensor::new(g.shape().to_vec(), gd.iter().map(|v| v * c).collect()));
            }
            Op::MulConst { x, c } => {
                let d = gd.iter().zip(c).map(|(g, m)| g * m).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::AddConst { x } => acc(*x, g.clone()),
            Op::MaskedSoftmax { x, mask } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        if mask[r * c + j] {
                            dx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(*x);
                let y = &node.value;
                let c = y.cols();
                let n = c as f64;
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let xr = xv.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = inv / n * (n * gr[j] - sg - yr[j] * sgy);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(g, v)| g * gelu_parts(*v).1).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::LogSigmoid { x, clamp } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if v.abs() < *clamp { g * sigmoid(-v) } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::LogSumExp { x, mask } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    for j in 0..c {
                        let k = r * c + j;
                        if mask[k] {
                            dx[k] = gd[r] * (xv.data()[k] - y[r]).exp();
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for r in 0..av.rows() {
                    for j in 0..c {
                        da[r * c + j] = gd[r] * bv.data()[r * c + j];
                        db[r * c + j] = gd[r] * av.data()[r * c + j];
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da));
                acc(*b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut off = 0;
                for v in xs {
                    let vv = self.value(*v);
                    let c = vv.cols();
                    let mut d = Vec::with_capacity(vv.numel());
                    for r in 0..vv.rows() {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    acc(*v, Tensor::new(vv.shape().to_vec(), d));
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Expand { x, times } => {
                let xv = self.value(*x);
                let (b, m) = (xv.shape()[0], xv.shape()[2]);
                let mut d = vec![0.0; b * m];
                for bi in 0..b {
                    for t in 0..*times {
                        let off = (bi * times + t) * m;
                        for j in 0..m {
                            d[bi * m + j] += gd[off + j];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(shape_of(*x))),
            Op::Sum(x) => {
                let shape = shape_of(*x);
                acc(*x, Tensor::full(shape, gd[0]));
            }
            Op::SelectTime { x, j } => {
                let xv = self.value(*x);
                let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    let off = (bi * l + j) * d;
                    dx[off..off + d].copy_from_slice(g.row(bi));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::StackTime(xs) => {
                let (b, l, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (j, v) in xs.iter().enumerate() {
                    let mut dv = Vec::with_capacity(b * d);
                    for bi in 0..b {
                        let off = (bi * l + j) * d;
                        dv.extend_from_slice(&gd[off..off + d]);
                    }
                    acc(*v, Tensor::new(vec![b, d], dv));
                }
            }
        }
    }
}
