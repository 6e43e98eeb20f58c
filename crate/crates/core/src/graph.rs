//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation of
//! one forward pass, and [`Graph::backward`] walks the tape in reverse to
//! produce [`Gradients`] for the parameters. Optimizers mutate the store only
//! after the graph has been dropped.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a square-kernel convolution over channels-last images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

const MASK_FILL: f64 = -1.0e9;
const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    MeanTokens(Var),
    SumAll(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    ExpClamp { x: Var, clamped: bool },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    ConcatRows(Var, Var),
    MaskDiagonal(Var),
    Im2Col { x: Var, geom: ConvGeometry },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    track_params: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph whose parameter leaves receive gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), track_params: true }
    }

    /// Graph for inference: nothing requires gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), track_params: false }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Input, value: Some(value), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: self.track_params });
        Var(self.nodes.len() - 1)
    }

    /// `x · w` over the last axis of `x`; `w` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        if wv.shape().len() != 2 || wv.shape()[0] != k {
            bail!(Shape, "matmul {:?} x {:?}", xv.shape(), wv.shape());
        }
        let (m, n) = (xv.rows(), wv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, xv.data(), (k, 1), wv.data(), (n, 1), &mut out, (n, 1), false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(Op::MatMul(x, w), t, &[x, w]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            bail!(Shape, "batch_matmul {:?} x {:?}", av.shape(), bv.shape());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        if bk != k {
            bail!(Shape, "batch_matmul inner dims {} vs {}", k, bk);
        }
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv.data()[i * k * n..(i + 1) * k * n],
                bstride,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
                false,
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(Op::BatchMatMul { a, b, trans_b }, t, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Shape, "add {:?} + {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(Op::Add(a, b), t, &[a, b]))
    }

    /// `x + y` where the shape of `y` is a suffix of the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xs, ys) = (xv.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            bail!(Shape, "cannot broadcast {:?} onto {:?}", ys, xs);
        }
        let q = yv.numel();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(q) {
            for (a, &b) in chunk.iter_mut().zip(yv.data()) {
                *a += b;
            }
        }
        let t = Tensor::new(xs, data)?;
        Ok(self.push(Op::AddBroadcast(x, y), t, &[x, y]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Shape, "mul {:?} * {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(Op::Mul(a, b), t, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), t, &[x])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            bail!(Shape, "mul_scalar needs a one-element scale, got {:?}", sv.shape());
        }
        let c = sv.data()[0];
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(Op::MulScalar(x, s), t, &[x, s]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu(x), t, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), t, &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            bail!(Shape, "layer_norm over {} with gain {:?}", d, gv.shape());
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, t, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(Op::Softmax(x), t, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), t, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if perm.len() != xv.shape().len() {
            bail!(Shape, "permutation {:?} for rank {}", perm, xv.shape().len());
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                bail!(Shape, "invalid permutation {:?}", perm);
            }
            seen[p] = true;
        }
        let t = permute_tensor(xv, perm);
        Ok(self.push(Op::Permute(x, perm.to_vec()), t, &[x]))
    }

    /// Rows of `x` (viewed as `[rows, last_dim]`) selected by `idx`; output `[idx.len(), last_dim]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                bail!(Validation, "gather index {} out of range for {} rows", i, rows);
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(Op::Gather(x, idx.to_vec()), t, &[x]))
    }

    /// Mean over axis 1 of a `[B, T, d]` tensor.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, tokens, d] = xv.shape() else {
            bail!(Shape, "mean_tokens expects rank 3, got {:?}", xv.shape());
        };
        let mut out = vec![T::zero(); b * d];
        let inv = T::one() / T::of(tokens as f64);
        for i in 0..b {
            for t in 0..tokens {
                let base = (i * tokens + t) * d;
                for j in 0..d {
                    out[i * d + j] += xv.data()[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push(Op::MeanTokens(x), t, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), t, &[x])
    }

    /// Scales each row (last axis) to unit L2 norm; a zero row is a numeric error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                bail!(Numeric, "row {} has zero or non-finite norm", r);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Op::L2Normalize { x, norms }, t, &[x]))
    }

    /// `min(exp(x), max)` for a one-element `x`; the gradient is zero once clamped.
    pub fn exp_clamped(&mut self, x: Var, max: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != 1 {
            bail!(Shape, "exp_clamped expects one element");
        }
        let e = xv.data()[0].exp();
        let cap = T::of(max);
        let clamped = e > cap;
        let t = Tensor::scalar(if clamped { cap } else { e });
        Ok(self.push(Op::ExpClamp { x, clamped }, t, &[x]))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            bail!(Shape, "cross_entropy logits {:?} with {} targets", lv.shape(), targets.len());
        }
        if !lv.is_finite() {
            bail!(Numeric, "non-finite logits");
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                bail!(Validation, "target {} out of range for {} classes", t, c);
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += (lse - row[t]).as_f64();
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let t = Tensor::scalar(T::of(loss / n as f64));
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, t, &[logits]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            bail!(Shape, "concat_rows {:?} and {:?}", av.shape(), bv.shape());
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::new(&[av.shape()[0] + bv.shape()[0], av.shape()[1]], data)?;
        Ok(self.push(Op::ConcatRows(a, b), t, &[a, b]))
    }

    /// Replaces the diagonal of a square matrix with a large negative constant.
    pub fn mask_diagonal(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[n, m] = xv.shape() else {
            bail!(Shape, "mask_diagonal expects a matrix");
        };
        if n != m {
            bail!(Shape, "mask_diagonal expects a square matrix, got {}x{}", n, m);
        }
        let mut data = xv.data().to_vec();
        for i in 0..n {
            data[i * n + i] = T::of(MASK_FILL);
        }
        let t = Tensor::new(&[n, n], data)?;
        Ok(self.push(Op::MaskDiagonal(x), t, &[x]))
    }

    /// Unfolds `[B, H, W, C]` into `[B·Ho·Wo, k·k·C]` patches (zero padding).
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let xv = self.value(x);
        let &[b, h, w, c] = xv.shape() else {
            bail!(Shape, "im2col expects [B, H, W, C], got {:?}", xv.shape());
        };
        if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
            bail!(Shape, "kernel {} larger than padded input {}x{}", geom.kernel, h, w);
        }
        let (ho, wo) = (geom.output_size(h), geom.output_size(w));
        let k = geom.kernel;
        let cols = k * k * c;
        let mut out = vec![T::zero(); b * ho * wo * cols];
        for_each_tap(b, h, w, c, ho, wo, geom, |dst, src| out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]));
        let t = Tensor::new(&[b * ho * wo, cols], out)?;
        Ok(self.push(Op::Im2Col { x, geom }, t, &[x]))
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut param_grads)?;
        }
        Ok(Gradients { grads: param_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let out = || self.nodes[i].value.as_ref().expect("value");
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => accumulate(&mut param_grads[id.0], g),
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), (n, 1), wv.data(), (1, n), &mut gx, (k, 1), false);
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape(), gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, xv.data(), (1, k), g.data(), (n, 1), &mut gw, (n, 1), false);
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape(), gw)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                if self.wants(*a) {
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    let mut ga = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[s * m * n..(s + 1) * m * n],
                            (n, 1),
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            bt,
                            &mut ga[s * m * k..(s + 1) * m * k],
                            (k, 1),
                            false,
                        );
                    }
                    accumulate(&mut grads[a.0], Tensor::new(av.shape(), ga)?);
                }
                if self.wants(*b) {
                    let gb_layout = if *trans_b { (1, k) } else { (n, 1) };
                    let mut gb = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[s * m * k..(s + 1) * m * k],
                            (1, k),
                            &g.data()[s * m * n..(s + 1) * m * n],
                            (n, 1),
                            &mut gb[s * k * n..(s + 1) * k * n],
                            gb_layout,
                            false,
                        );
                    }
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape(), gb)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.wants(*y) {
                    let yv = self.value(*y);
                    let mut gy = Tensor::zeros(yv.shape());
                    for chunk in g.data().chunks(yv.numel()) {
                        for (a, &b) in gy.data_mut().iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[y.0], gy);
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(av.shape(), data)?);
                }
                if self.wants(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape(), data)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(&mut grads[x.0], g.map(|v| v * c));
            }
            Op::MulScalar(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.wants(*s) {
                    let gs: T = g.data().iter().zip(xv.data()).map(|(&g, &x)| g * x).sum();
                    accumulate(&mut grads[s.0], Tensor::new(sv.shape(), vec![gs])?);
                }
                if self.wants(*x) {
                    let c = sv.data()[0];
                    accumulate(&mut grads[x.0], g.map(|v| v * c));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                accumulate(&mut grads[x.0], Tensor::new(xv.shape(), data)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(xv.shape(), data)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let d = gv.numel();
                let rows = rstd.len();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let go = g.data()[r * d + j];
                            gg[j] += go * xhat[r * d + j];
                            gb[j] += go;
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::new(gv.shape(), gg)?);
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], Tensor::new(self.value(*beta).shape(), gb)?);
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_dx = T::zero();
                        let mut mean_dx_xhat = T::zero();
                        for j in 0..d {
                            let v = g.data()[r * d + j] * gv.data()[j];
                            dxhat[j] = v;
                            mean_dx += v;
                            mean_dx_xhat += v * xhat[r * d + j];
                        }
                        mean_dx *= inv_d;
                        mean_dx_xhat *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - mean_dx - xhat[r * d + j] * mean_dx_xhat);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(self.value(*x).shape(), gx)?);
                }
            }
            Op::Softmax(x) => {
                let y = out();
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &g.data()[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(y.shape(), gx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], g.reshape(&shape)?);
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                accumulate(&mut grads[x.0], permute_tensor(&g, &inverse));
            }
            Op::Gather(x, idx) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * d..(src + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::MeanTokens(x) => {
                let xv = self.value(*x);
                let (b, tokens, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let inv = T::one() / T::of(tokens as f64);
                let mut gx = vec![T::zero(); b * tokens * d];
                for i in 0..b {
                    for t in 0..tokens {
                        for j in 0..d {
                            gx[(i * tokens + t) * d + j] = g.data()[i * d + j] * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape(), gx)?);
            }
            Op::SumAll(x) => {
                let g0 = g.data()[0];
                accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), g0));
            }
            Op::L2Normalize { x, norms } => {
                let y = out();
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), &g.data()[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(y.shape(), gx)?);
            }
            Op::ExpClamp { x, clamped } => {
                let v = if *clamped { T::zero() } else { g.data()[0] * out().data()[0] };
                accumulate(&mut grads[x.0], Tensor::new(self.value(*x).shape(), vec![v])?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.shape()[0], lv.shape()[1]);
                let scale = g.data()[0] / T::of(n as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= scale;
                }
                accumulate(&mut grads[logits.0], Tensor::new(lv.shape(), gx)?);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                if self.wants(*a) {
                    let ga = Tensor::new(self.value(*a).shape(), g.data()[..split].to_vec())?;
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = Tensor::new(self.value(*b).shape(), g.data()[split..].to_vec())?;
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MaskDiagonal(x) => {
                let n = g.shape()[0];
                let mut gx = g;
                for i in 0..n {
                    gx.data_mut()[i * n + i] = T::zero();
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Im2Col { x, geom } => {
                let xv = self.value(*x);
                let (b, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (ho, wo) = (geom.output_size(h), geom.output_size(w));
                let mut gx = Tensor::zeros(xv.shape());
                let gdata = g.data();
                let dst = gx.data_mut();
                for_each_tap(b, h, w, c, ho, wo, *geom, |col, src| {
                    for ch in 0..c {
                        dst[src + ch] += gdata[col + ch];
                    }
                });
                accumulate(&mut grads[x.0], gx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Visits every in-bounds (column offset, source offset) pair of an im2col unfold.
#[allow(clippy::too_many_arguments)]
fn for_each_tap(
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
    mut f: impl FnMut(usize, usize),
) {
    let k = geom.kernel;
    let cols = k * k * c;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = row * cols + (ky * k + kx) * c;
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    if numel > 0 {
        let last = rank - 1;
        let (inner_n, inner_s) = (out_shape[last], strides[last]);
        let mut counter = vec![0usize; rank];
        let mut base = 0usize;
        let src = x.data();
        loop {
            for j in 0..inner_n {
                out.push(src[base + j * inner_s]);
            }
            // Advance the odometer over all axes except the innermost.
            let mut axis = last;
            loop {
                if axis == 0 {
                    return Tensor::new(&out_shape, out).expect("permute preserves size");
                }
                axis -= 1;
                counter[axis] += 1;
                base += strides[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                base -= strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out).expect("empty permute")
}
