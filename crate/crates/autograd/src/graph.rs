use crate::kernels::{self, ConvGeom};
use crate::real::{gemm, Real};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Tanh,
    Abs,
    Exp,
    Log,
    Sqrt,
    Square,
}

/// User-defined differentiable operation. The forward value is computed by
/// the caller; the graph only needs the vector-Jacobian product.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, `None` where an input needs none.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DwConv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumTo(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    BatchNorm { x: Var, axis: usize, rstd: Vec<T> },
    L2Normalize { x: Var, norm: Vec<T> },
    AvgPool2(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

/// Tape of operations recorded during one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::lit(v)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return Ok(ta.zip_map(tb, f));
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        Tensor::new(&out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = self.value(a).map(|x| unary_forward(kind, x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, kind), ng)
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

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Batched matrix product over the last two axes. `b` may be 2-D, in
    /// which case it is shared by every batch entry of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {:?} x {:?}", sa, sb)));
        }
        let ra = sa.len();
        let (m, k) = if ta { (sa[ra - 1], sa[ra - 2]) } else { (sa[ra - 2], sa[ra - 1]) };
        let rb = sb.len();
        let (kb, n) = if tb { (sb[rb - 1], sb[rb - 2]) } else { (sb[rb - 2], sb[rb - 1]) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                sa,
                if ta { "^T" } else { "" },
                sb,
                if tb { "^T" } else { "" }
            )));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let b_batched = rb > 2;
        if b_batched && sb[..rb - 2] != sa[..ra - 2] {
            return Err(Error::Shape(format!("matmul batch dims differ: {:?} x {:?}", sa, sb)));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let bslice = if b_batched { &db[i * k * n..(i + 1) * k * n] } else { db };
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    ta,
                    bslice,
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb, batch, m, k, n, b_batched }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x[.., in] @ w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Shape(format!("linear: input {:?} vs weight {:?}", xs, ws)));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[1]);
        self.reshape(y, &out_shape)
    }

    /// NCHW convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d: input {:?} vs weight {:?}", xs, ws)));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] || stride == 0 {
            return Err(Error::Shape(format!("conv2d: kernel {:?} larger than input {:?}", ws, xs)));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv2d: bias {:?}", self.shape(b))));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::new(&[geom.n, geom.o, geom.out_h(), geom.out_w()], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Depthwise stride-1 convolution; weight shape `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
            return Err(Error::Shape(format!("depthwise_conv2d: input {:?} vs weight {:?}", xs, ws)));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::Shape(format!(
                "depthwise_conv2d: kernel {:?} larger than input {:?}",
                ws, xs
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: xs[1],
            kh: ws[2],
            kw: ws[3],
            stride: 1,
            pad,
        };
        let out = kernels::dwconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::new(&[geom.n, geom.c, geom.out_h(), geom.out_w()], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::DwConv2d { x, w, b, geom }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {:?} for rank {}", perm, rank)));
        }
        let v = kernels::permute(self.value(x), perm);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {} out of range", axis)));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {}..{} of axis {} in {:?}", start, start + len, axis, s)));
        }
        let (outer, n, inner) = kernels::split_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.value(x).data();
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, ng))
    }

    /// Sums over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Shape(format!("sum axis {} out of range for {:?}", a, shape)));
            }
            shape[a] = 1;
        }
        let v = reduce_to_shape(self.value(x), &shape);
        let ng = self.ng(x);
        Ok(self.push(v, Op::SumTo(x), ng))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumTo(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let last = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(last.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let last = *t.shape().last().unwrap_or(&1);
        let eps = T::lit(eps);
        let nf = T::from_usize(last).unwrap();
        let mut out = t.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / last.max(1));
        for row in out.chunks_mut(last.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(v, Op::LayerNorm { x, rstd }, ng)
    }

    /// Training-mode batch normalization: normalizes every channel along
    /// `axis` with statistics over all other axes (no affine).
    pub fn batch_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Shape(format!("batch_norm axis {} for {:?}", axis, t.shape())));
        }
        let (outer, c, inner) = kernels::split_axis(t.shape(), axis);
        let count = outer * inner;
        if count < 2 {
            return Err(Error::Shape("batch_norm needs at least two values per channel".into()));
        }
        let nf = T::from_usize(count).unwrap();
        let d = t.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += d[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += d[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let var_unbiased: Vec<T> = var.iter().map(|&v| v / (nf - T::one())).collect();
        var.iter_mut().for_each(|v| *v /= nf);
        let eps = T::lit(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = d.to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v = (*v - mean[ch]) * rstd[ch]);
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        let ng = self.ng(x);
        let y = self.push(v, Op::BatchNorm { x, axis, rstd }, ng);
        Ok((y, BatchStats { mean, var_unbiased }))
    }

    /// `x / sqrt(sum(x^2) + eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let last = *t.shape().last().unwrap_or(&1);
        let eps = T::lit(eps);
        let mut out = t.data().to_vec();
        let mut norm = Vec::with_capacity(out.len() / last.max(1));
        for row in out.chunks_mut(last.max(1)) {
            let s = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= s);
            norm.push(s);
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(v, Op::L2Normalize { x, norm }, ng)
    }

    /// 2x2 average pooling on NCHW input with even spatial dims.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs NCHW with even dims, got {:?}", s)));
        }
        let (h, w) = (s[2] / 2, s[3] / 2);
        let d = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); s[0] * s[1] * h * w];
        for p in 0..s[0] * s[1] {
            let src = &d[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for i in 0..h {
                for j in 0..w {
                    let a = src[2 * i * s[3] + 2 * j] + src[2 * i * s[3] + 2 * j + 1];
                    let b = src[(2 * i + 1) * s[3] + 2 * j] + src[(2 * i + 1) * s[3] + 2 * j + 1];
                    out[p * h * w + i * w + j] = (a + b) * quarter;
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], h, w], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::AvgPool2(x), ng))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, pg) in self.node_backward(idx, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    out.push((*a, reduce_to_shape(g, self.shape(*a))));
                }
                if self.ng(*b) {
                    out.push((*b, reduce_to_shape(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    out.push((*a, reduce_to_shape(g, self.shape(*a))));
                }
                if self.ng(*b) {
                    out.push((*b, reduce_to_shape(&g.map(|v| -v), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    out.push((*a, reduce_to_shape(&bcast_zip(g, vb, |g, b| g * b), va.shape())));
                }
                if self.ng(*b) {
                    out.push((*b, reduce_to_shape(&bcast_zip(g, va, |g, a| g * a), vb.shape())));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    out.push((*a, reduce_to_shape(&bcast_zip(g, vb, |g, b| g / b), va.shape())));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = g.zip_map(y, |g, y| g * y);
                    out.push((*b, reduce_to_shape(&bcast_zip(&gy, vb, |gy, b| -gy / b), vb.shape())));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * unary_derivative(*kind, x, y))
                    .collect();
                out.push((*a, Tensor::new(x.shape(), d)?));
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n, b_batched } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                let gd = g.data();
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); va.numel()];
                    for i in 0..*batch {
                        let bs = if *b_batched { &vb.data()[i * k * n..(i + 1) * k * n] } else { vb.data() };
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if !*ta {
                            // [m,k] = g[m,n] * op(b)^T
                            gemm(m, n, k, gi, false, bs, !*tb, dst, false);
                        } else {
                            // [k,m] = op(b)[k,n] * g^T
                            gemm(k, n, m, bs, *tb, gi, true, dst, false);
                        }
                    }
                    out.push((*a, Tensor::new(va.shape(), ga)?));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); vb.numel()];
                    for i in 0..*batch {
                        let as_ = &va.data()[i * m * k..(i + 1) * m * k];
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let (dst, acc) = if *b_batched {
                            (&mut gb[i * k * n..(i + 1) * k * n], false)
                        } else {
                            (&mut gb[..], i > 0)
                        };
                        if !*tb {
                            // [k,n] = op(a)^T[k,m] * g[m,n]
                            gemm(k, m, n, as_, !*ta, gi, false, dst, acc);
                        } else {
                            // [n,k] = g^T[n,m] * op(a)[m,k]
                            gemm(n, m, k, gi, true, as_, *ta, dst, acc);
                        }
                    }
                    out.push((*b, Tensor::new(vb.shape(), gb)?));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.ng(*x);
                let need_dw = self.ng(*w);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    need_dx,
                    need_dw,
                );
                if need_dx {
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if need_dw {
                    out.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let Some(b) = b {
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::DwConv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::dwconv_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom);
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
                out.push((*w, Tensor::new(self.shape(*w), dw)?));
                if let Some(b) = b {
                    out.push((*b, Tensor::new(self.shape(*b), db)?));
                }
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, kernels::permute(g, &inv)));
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = kernels::split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        out.push((x, Tensor::new(self.shape(x), d)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = kernels::split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(xs, d)?));
            }
            Op::SumTo(x) => {
                let xs = self.shape(*x).to_vec();
                let gg = if g.rank() == xs.len() { g.clone() } else { g.clone().reshape(&vec![1; xs.len()])? };
                out.push((*x, kernels::expand(&gg, &xs)));
            }
            Op::Softmax(x) => {
                let last = *y.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(last).zip(y.data().chunks(last)).zip(g.data().chunks(last)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..last {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                out.push((*x, Tensor::new(y.shape(), d)?));
            }
            Op::LayerNorm { x, rstd } => {
                let last = *y.shape().last().unwrap_or(&1);
                let nf = T::from_usize(last).unwrap();
                let mut d = vec![T::zero(); y.numel()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(last)
                    .zip(y.data().chunks(last))
                    .zip(g.data().chunks(last))
                    .enumerate()
                {
                    let gm = gr.iter().copied().sum::<T>() / nf;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for i in 0..last {
                        dr[i] = rstd[r] * (gr[i] - gm - yr[i] * gym);
                    }
                }
                out.push((*x, Tensor::new(y.shape(), d)?));
            }
            Op::BatchNorm { x, axis, rstd } => {
                let (outer, c, inner) = kernels::split_axis(y.shape(), *axis);
                let nf = T::from_usize(outer * inner).unwrap();
                let (yd, gd) = (y.data(), g.data());
                let mut sg = vec![T::zero(); c];
                let mut sgy = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sg[ch] += gd[i];
                            sgy[ch] += gd[i] * yd[i];
                        }
                    }
                }
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let (mg, mgy) = (sg[ch] / nf, sgy[ch] / nf);
                        for i in base..base + inner {
                            d[i] = rstd[ch] * (gd[i] - mg - yd[i] * mgy);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), d)?));
            }
            Op::L2Normalize { x, norm } => {
                let last = *y.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.numel()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(last)
                    .zip(y.data().chunks(last))
                    .zip(g.data().chunks(last))
                    .enumerate()
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for i in 0..last {
                        dr[i] = (gr[i] - yr[i] * dot) / norm[r];
                    }
                }
                out.push((*x, Tensor::new(y.shape(), d)?));
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2] / 2, xs[3] / 2);
                let quarter = T::lit(0.25);
                let mut d = vec![T::zero(); xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    for i in 0..xs[2] {
                        for j in 0..xs[3] {
                            d[p * xs[2] * xs[3] + i * xs[3] + j] = g.data()[p * h * w + (i / 2) * w + j / 2] * quarter;
                        }
                    }
                }
                out.push((*x, Tensor::new(&xs, d)?));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, y, g);
                if grads.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        if gv.shape() != self.shape(v) {
                            return Err(Error::Shape(format!(
                                "custom op {} gradient shape {:?} != input {:?}",
                                op.name(),
                                gv.shape(),
                                self.shape(v)
                            )));
                        }
                        out.push((v, gv));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `f(g, other)` with `other` broadcast up to `g`'s shape.
fn bcast_zip<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if g.shape() == other.shape() {
        return g.zip_map(other, f);
    }
    let so = broadcast_strides(other.shape(), g.shape());
    let sg = crate::tensor::strides_of(g.shape());
    let mut out = vec![T::zero(); g.numel()];
    let (gd, od) = (g.data(), other.data());
    for_each_broadcast(g.shape(), &sg, &so, |o, i, j| out[o] = f(gd[i], od[j]));
    Tensor::new(g.shape(), out).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn unary_forward<T: Real>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        Unary::Tanh => x.tanh(),
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
    }
}

fn unary_derivative<T: Real>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Gelu => {
            let x2 = x * x;
            let t = (T::lit(GELU_C) * (x + T::lit(GELU_A) * x2 * x)).tanh();
            T::lit(0.5) * (T::one() + t)
                + T::lit(0.5) * x * (T::one() - t * t) * T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x2)
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Softplus => sigmoid(x),
        Unary::Tanh => T::one() - y * y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Sqrt => T::lit(0.5) / y,
        Unary::Square => T::lit(2.0) * x,
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
