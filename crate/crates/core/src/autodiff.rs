//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves are
//! either parameters (gradients requested) or constants. Calling
//! [`Graph::backward`] on a one-element node walks the tape in reverse
//! and returns [`Gradients`] for every node that depends on a parameter.
//!
//! All values are viewed as `rows x cols` matrices; rank-1 tensors are a
//! single row. Shape mismatches inside the graph are programming errors and
//! panic; the fallible entry points (for example [`crate::nn::mlp_forward`])
//! validate their inputs before building nodes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x * w^T`, with `x: [b, in]` and `w: [out, in]`.
    MatMulT(Var, Var),
    /// Adds a row vector to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    SumCols(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(strip(value), Op::Leaf, true)
    }

    /// Leaf treated as a fixed input.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(strip(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0];
        let data = src.value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(src.value.shape().to_vec(), data);
        let rg = src.requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            va.dims(),
            vb.dims(),
            "elementwise operands must have identical shapes"
        );
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// `x * w^T` for `x: [b, in]`, `w: [out, in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (b, k) = xv.dims();
        let (n, k2) = wv.dims();
        assert_eq!(k, k2, "matmul_t inner dimensions differ");
        let mut out = vec![0.0; b * n];
        gemm(
            b,
            k,
            n,
            xv.data(),
            (k as isize, 1),
            wv.data(),
            (1, k as isize),
            &mut out,
            false,
        );
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        self.push(Tensor::from_parts(vec![b, n], out), Op::MatMulT(x, w), rg)
    }

    /// Adds the row vector `b` to each row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (r, c) = xv.dims();
        assert_eq!(bv.len(), c, "row vector length differs from column count");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(Tensor::from_parts(vec![r, c], data), Op::AddRow(x, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Sums each row, giving a `[rows, 1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims();
        let data = xv.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::from_parts(vec![r, 1], data), Op::SumCols(x), rg)
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.len();
        let m = xv.data().iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (r, ca) = va.dims();
        let (r2, cb) = vb.dims();
        assert_eq!(r, r2, "concat_cols row counts differ");
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(
            Tensor::from_parts(vec![r, ca + cb], data),
            Op::ConcatCols(a, b),
            rg,
        )
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims();
        assert!(start < end && end <= c, "slice_cols range out of bounds");
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::from_parts(vec![r, end - start], data),
            Op::SliceCols(x, start),
            rg,
        )
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Structural(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (b, k) = val(x).dims();
                let n = val(w).rows();
                if rg(x) {
                    // dx = g * w, [b, n] x [n, k]
                    let acc = slot(grads, x, b * k);
                    gemm(
                        b,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        val(w).data(),
                        (k as isize, 1),
                        acc,
                        true,
                    );
                }
                if rg(w) {
                    // dw = g^T * x, [n, b] x [b, k]
                    let acc = slot(grads, w, n * k);
                    gemm(
                        n,
                        b,
                        k,
                        g,
                        (1, n as isize),
                        val(x).data(),
                        (k as isize, 1),
                        acc,
                        true,
                    );
                }
            }
            Op::AddRow(x, b) => {
                if rg(x) {
                    accumulate(slot(grads, x, g.len()), g.iter().copied());
                }
                if rg(b) {
                    let c = val(b).len();
                    let acc = slot(grads, b, c);
                    for row in g.chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(slot(grads, a, g.len()), g.iter().copied());
                }
                if rg(b) {
                    accumulate(slot(grads, b, g.len()), g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(slot(grads, a, g.len()), g.iter().copied());
                }
                if rg(b) {
                    accumulate(slot(grads, b, g.len()), g.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let other = val(b).data();
                    accumulate(
                        slot(grads, a, g.len()),
                        g.iter().zip(other).map(|(gv, o)| gv * o),
                    );
                }
                if rg(b) {
                    let other = val(a).data();
                    accumulate(
                        slot(grads, b, g.len()),
                        g.iter().zip(other).map(|(gv, o)| gv * o),
                    );
                }
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                if rg(a) {
                    accumulate(
                        slot(grads, a, g.len()),
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 }),
                    );
                }
                if rg(b) {
                    accumulate(
                        slot(grads, b, g.len()),
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv }),
                    );
                }
            }
            Op::Scale(x, k) => {
                accumulate(slot(grads, x, g.len()), g.iter().map(|v| v * k));
            }
            Op::AddScalar(x) => {
                accumulate(slot(grads, x, g.len()), g.iter().copied());
            }
            Op::Tanh(x) => {
                // d tanh = 1 - tanh^2, read from the output
                let out = node.value.data();
                accumulate(
                    slot(grads, x, g.len()),
                    g.iter().zip(out).map(|(gv, t)| gv * (1.0 - t * t)),
                );
            }
            Op::Exp(x) => {
                let out = node.value.data();
                accumulate(
                    slot(grads, x, g.len()),
                    g.iter().zip(out).map(|(gv, e)| gv * e),
                );
            }
            Op::Softplus(x) => {
                let input = val(x).data();
                accumulate(
                    slot(grads, x, g.len()),
                    g.iter().zip(input).map(|(gv, v)| gv * sigmoid(*v)),
                );
            }
            Op::Square(x) => {
                let input = val(x).data();
                accumulate(
                    slot(grads, x, g.len()),
                    g.iter().zip(input).map(|(gv, v)| gv * 2.0 * v),
                );
            }
            Op::Clamp(x, lo, hi) => {
                let input = val(x).data();
                accumulate(
                    slot(grads, x, g.len()),
                    g.iter().zip(input).map(|(gv, v)| {
                        if *v >= lo && *v <= hi {
                            *gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::SumCols(x) => {
                let (r, c) = val(x).dims();
                let acc = slot(grads, x, r * c);
                for (row, gv) in acc.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|a| *a += gv);
                }
            }
            Op::Mean(x) => {
                let n = val(x).len();
                let share = g[0] / n as f64;
                slot(grads, x, n).iter_mut().for_each(|a| *a += share);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let width = ca + cb;
                if rg(a) {
                    let acc = slot(grads, a, g.len() / width * ca);
                    for (dst, src) in acc.chunks_mut(ca).zip(g.chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[..ca]) {
                            *d += s;
                        }
                    }
                }
                if rg(b) {
                    let acc = slot(grads, b, g.len() / width * cb);
                    for (dst, src) in acc.chunks_mut(cb).zip(g.chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[ca..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = val(x).dims();
                let width = node.value.cols();
                let acc = slot(grads, x, r * c);
                for (dst, src) in acc.chunks_mut(c).zip(g.chunks(width)) {
                    for (d, s) in dst[start..start + width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// reach the loss through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but zero-filled for unreachable nodes.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Hyperbolic tangent through `exp`, with a series near zero. Relative
/// error stays below 1e-13; noticeably faster than `f64::tanh`.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
    }
    if a > 20.0 {
        return 1.0f64.copysign(x);
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn softplus(x: f64) -> f64 {
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

fn strip(t: &Tensor) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(acc: &mut [f64], src: impl Iterator<Item = f64>) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// `c (+)= a * b` for an `[m, k]` by `[k, n]` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given row/column strides for these dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(0.7));
        let x = g.constant(&Tensor::scalar(3.0));
        let y = g.mul(w, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(0.0));
        let y = g.tanh(w);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::row(&[1.0, 2.0]));
        let y = g.tanh(w);
        assert!(matches!(g.backward(y), Err(Error::Structural(_))));
    }

    #[test]
    fn unreachable_parameters_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::scalar(1.5));
        let b = g.param(&Tensor::scalar(-2.0));
        let _unused = g.exp(b);
        let y = g.square(a);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0]);
        assert_eq!(grads.get_or_zero(b, 1), vec![0.0]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let w = g.param(&Tensor::matrix(2, 3, vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap());
        let y = g.matmul_t(x, w);
        assert_eq!(g.value(y).data(), &[-2.0, 3.0, -2.0, 7.5]);
        let s = g.sum_cols(y);
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        // d mean / d w[o][i] = sum_b x[b][i] / 2
        assert_eq!(grads.get(w).unwrap(), &[2.5, 3.5, 4.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn slice_and_concat_route_gradients() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.param(&Tensor::matrix(2, 1, vec![5., 6.]).unwrap());
        let c = g.concat_cols(a, b);
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice_cols(c, 1, 3);
        let sq = g.square(s);
        let m = g.mean(sq);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(grads.get(b).unwrap(), &[2.5, 3.0]);
    }

    #[test]
    fn tanh_matches_libm() {
        let mut x = -30.0;
        while x < 30.0 {
            let (a, b) = (tanh(x), x.tanh());
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1e-300), "{x}: {a} vs {b}");
            x += 0.000_731;
        }
        for x in [0.0, -0.0, 1e-300, 1e-3, -1e-3, 19.99, 20.0, 700.0, -700.0] {
            assert!((tanh(x) - x.tanh()).abs() <= 1e-13 * x.tanh().abs());
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
