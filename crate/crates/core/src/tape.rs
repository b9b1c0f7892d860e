//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its value
//! and operands. [`Tape::backward`] then walks the nodes in exact reverse
//! order, so a node's adjoint is complete before it is propagated.
//!
//! Leaves can borrow their values (`Tape::param`), which keeps per-sample
//! tapes from copying model weights.

use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, transpose, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    /// `a·bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a borrowed input, typically a trainable tensor.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).as_matrix(what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a·bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_t")?;
        let (n, k2) = self.matrix(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t inner dimensions disagree: {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    /// `x + 1·bᵀ`: adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(Error::Shape(format!(
                "row bias of length {} cannot broadcast over {:?}",
                self.value(b).len(),
                self.value(x).shape()
            )));
        }
        let bias = self.value(b).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, bj) in row.iter_mut().zip(bias) {
                *v += bj;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, s))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(a))
    }

    /// Normalises every vector along the last axis, then scales by `gamma`
    /// and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape(format!(
                "layer norm over width {d} got gamma {:?} and beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            // A constant row with eps = 0 has no defined scale; emit zeros.
            let is = if is.is_finite() { is } else { 0.0 };
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * normal_cdf(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(a))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "column slice {start}..{} exceeds width {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols row counts differ: {m} vs {pm}"
                )));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices (or row vectors) with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::Shape(format!(
                    "concat_rows widths differ: {n} vs {}",
                    v.cols()
                )));
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec())))
    }

    /// Row `i` of a matrix as a `1×n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "row")?;
        if i >= m {
            return Err(Error::Index(format!("row {i} of a {m}-row matrix")));
        }
        let data = self.value(x).data()[i * n..(i + 1) * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![1, n], data), Op::Row(x, i)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `−log softmax(logits)[label]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Index(format!(
                "label {label} is out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Adjoints of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix("").unwrap();
                let n = out.cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                gemm_nt(g, bv, m, n, k, slot(grads, *a, m * k));
                gemm_tn(av, g, m, k, n, slot(grads, *b, k * n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).as_matrix("").unwrap();
                let n = out.cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                gemm_nn(g, bv, m, n, k, slot(grads, *a, m * k));
                gemm_tn(g, av, m, n, k, slot(grads, *b, n * k));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gt = transpose(g, m, n);
                accumulate(slot(grads, *a, gt.len()), &gt);
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                accumulate(slot(grads, *b, g.len()), g);
            }
            Op::AddRow(x, b) => {
                accumulate(slot(grads, *x, g.len()), g);
                let cols = out.cols();
                let gb = slot(grads, *b, cols);
                for row in g.chunks_exact(cols) {
                    accumulate(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.len());
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += s * gi;
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let ga = slot(grads, *a, g.len());
                for ((y, gy), d) in out
                    .data()
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                {
                    let inner: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        d[j] += y[j] * (gy[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                let gg = slot(grads, *gamma, d);
                for (h, gy) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * h[j];
                    }
                }
                let gb = slot(grads, *beta, d);
                for gy in g.chunks_exact(d) {
                    accumulate(gb, gy);
                }
                let gx = slot(grads, *x, g.len());
                let mut dh = vec![0.0; d];
                for (r, ((h, gy), dx)) in xhat
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dh[j] = gy[j] * gam[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let is = inv_std[r];
                    for j in 0..d {
                        dx[j] += is * (dh[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga = slot(grads, *a, g.len());
                for ((d, gi), &x) in ga.iter_mut().zip(g).zip(xv) {
                    *d += gi * (normal_cdf(x) + x * normal_pdf(x));
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).as_matrix("").unwrap();
                let len = out.cols();
                let gx = slot(grads, *x, m * n);
                for r in 0..m {
                    accumulate(
                        &mut gx[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let m = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = slot(grads, p, m * w);
                    for r in 0..m {
                        accumulate(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * n + offset..r * n + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Row(x, i) => {
                let (m, n) = self.value(*x).as_matrix("").unwrap();
                let gx = slot(grads, *x, m * n);
                accumulate(&mut gx[i * n..(i + 1) * n], g);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let ga = slot(grads, *a, len);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gl = slot(grads, *logits, probs.len());
                for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient of `v` out.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Tape-free GELU, for callers that only need values.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = t.sum(x);
        assert_eq!(t.value(s).item().unwrap(), 11.5);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 2, &[1.0, 2.0]));
        let p = t.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(p), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 2, &[0.0, 3f64.ln(), 7.0, 7.0]));
        let y = t.softmax_rows(x);
        let v = t.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);

        let shifted = t.leaf(m(1, 2, &[1000.0, 1000.0 + 3f64.ln()]));
        let ys = t.softmax_rows(shifted);
        assert!((t.value(ys).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 4.0, 4.0]));
        let gamma = t.leaf(Tensor::vector(vec![1.0; 3]));
        let beta = t.leaf(Tensor::vector(vec![0.0; 3]));
        let y = t.layer_norm(x, gamma, beta, 0.0).unwrap();
        let v = t.value(y).data();
        let r = 1.5f64.sqrt();
        assert!((v[0] + r).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - r).abs() < 1e-12);
        // The constant row has zero variance.
        assert_eq!(&v[3..], &[0.0; 3]);

        let z = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(t.value(z).data()[3..].iter().all(|&v| v == 0.0));
        let bad = t.leaf(Tensor::vector(vec![1.0; 2]));
        assert!(t.layer_norm(x, bad, beta, 1e-5).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.3; 17]));
        let l = t.cross_entropy(z, 4).unwrap();
        assert!((t.value(l).item().unwrap() - 17f64.ln()).abs() < 1e-12);
        let g = t.backward(l).unwrap().wrt(z);
        assert!(g.data().iter().sum::<f64>().abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[2] = 50.0;
        let z = t.leaf(Tensor::vector(logits));
        let l = t.cross_entropy(z, 2).unwrap();
        assert!(t.value(l).item().unwrap() < 1e-20);
        assert!(matches!(t.cross_entropy(z, 5), Err(Error::Index(_))));
    }

    #[test]
    fn shape_mismatches() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(t.matmul(a, b).is_err());
        assert!(t.matmul_t(a, b).is_ok());
        let c = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
        assert!(t.slice_cols(a, 2, 2).is_err());
        assert!(t.concat_cols(&[a, c]).is_err());
        assert!(t.row(a, 2).is_err());
    }
}
