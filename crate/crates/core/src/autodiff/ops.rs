//! Forward definitions and backward rules of the primitive set.

use rand::Rng;

use super::graph::{Graph, Op, Var};
use super::tensor::{gemm, split_axis, strides, Tensor};
use crate::error::{Error, Result};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature statistics of one batch-normalization pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    /// Values per feature.
    pub count: usize,
}

impl BatchStats {
    pub fn var_unbiased(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.var_biased.iter().map(|v| v * n / (n - 1.0)).collect()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Copies `data` laid out as `shape` into the order given by swapping axes `a0` and `a1`.
fn swap_axes(data: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let in_strides = strides(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    if nd == 0 || data.is_empty() {
        return (data.to_vec(), out_shape);
    }
    let last = out_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if last_stride == 1 {
            out.extend_from_slice(&data[base..base + last]);
        } else {
            out.extend((0..last).map(|j| data[base + j * last_stride]));
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Gathers `x[n, ci, t*stride + k]` into a `[ci*k_len, n*l_out]` column matrix.
fn im2col(x: &[f64], n: usize, ci: usize, len: usize, k_len: usize, stride: usize, l_out: usize) -> Vec<f64> {
    let cols_w = n * l_out;
    let mut cols = vec![0.0; ci * k_len * cols_w];
    for b in 0..n {
        for c in 0..ci {
            let xrow = &x[(b * ci + c) * len..(b * ci + c + 1) * len];
            for k in 0..k_len {
                let dst = &mut cols[(c * k_len + k) * cols_w + b * l_out..][..l_out];
                if stride == 1 {
                    dst.copy_from_slice(&xrow[k..k + l_out]);
                } else {
                    for (t, d) in dst.iter_mut().enumerate() {
                        *d = xrow[t * stride + k];
                    }
                }
            }
        }
    }
    cols
}

impl Graph {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v = self.map_binary(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.map_binary(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul_elementwise", a, b)?;
        let v = self.map_binary(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map_unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    fn check_broadcast(&self, op: &'static str, x: Var, b: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if axis >= xs.len() || self.shape(b) != [xs[axis]] {
            return Err(Error::shape(op, xs, self.shape(b)));
        }
        Ok(split_axis(xs, axis))
    }

    /// `x + b` with `b` (1-D) broadcast along `axis`.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, ext, inner) = self.check_broadcast("add_broadcast", x, b, axis)?;
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for o in 0..outer {
            for (c, bc) in bd.iter().enumerate() {
                let base = (o * ext + c) * inner;
                v.data_mut()[base..base + inner].iter_mut().for_each(|e| *e += bc);
            }
        }
        Ok(self.push(v, Op::AddBroadcast { x, b, axis }))
    }

    /// `x * b` with `b` (1-D) broadcast along `axis`.
    pub fn mul_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, ext, inner) = self.check_broadcast("mul_broadcast", x, b, axis)?;
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for o in 0..outer {
            for (c, bc) in bd.iter().enumerate() {
                let base = (o * ext + c) * inner;
                v.data_mut()[base..base + inner].iter_mut().for_each(|e| *e *= bc);
            }
        }
        Ok(self.push(v, Op::MulBroadcast { x, b, axis }))
    }

    /// Matrix product. Supports `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]` and `[..,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(err());
        }
        let (batch, m, k, n, out_shape) = if sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(err());
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(sb[1]);
            (1, m, k, sb[1], out_shape)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(err());
            }
            (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for p in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &va[p * m * k..],
                    k as isize,
                    1,
                    &vb[p * k * n..],
                    n as isize,
                    1,
                    0.0,
                    &mut out[p * m * n..],
                    n as isize,
                    1,
                );
            }
        }
        let v = Tensor::new(out_shape, out)?;
        Ok(self.push(v, Op::MatMul { a, b, batch, m, k, n }))
    }

    /// Valid (unpadded) 1-D convolution: `x` `[N, Cin, L]`, `kernel` `[Cout, Cin, K]`.
    pub fn conv1d_valid(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] > sx[2] || stride == 0 {
            return Err(Error::shape("conv1d_valid", &sx, &sw));
        }
        let (n, ci, len) = (sx[0], sx[1], sx[2]);
        let (co, k_len) = (sw[0], sw[2]);
        let l_out = (len - k_len) / stride + 1;
        let cols = im2col(self.value(x).data(), n, ci, len, k_len, stride, l_out);
        let cols_w = n * l_out;
        let mut out2 = vec![0.0; co * cols_w];
        gemm(
            co,
            ci * k_len,
            cols_w,
            1.0,
            self.value(kernel).data(),
            (ci * k_len) as isize,
            1,
            &cols,
            cols_w as isize,
            1,
            0.0,
            &mut out2,
            cols_w as isize,
            1,
        );
        // [Cout, N*Lout] -> [N, Cout, Lout]
        let mut out = vec![0.0; n * co * l_out];
        for b in 0..n {
            for c in 0..co {
                out[(b * co + c) * l_out..][..l_out]
                    .copy_from_slice(&out2[c * cols_w + b * l_out..][..l_out]);
            }
        }
        let v = Tensor::new(vec![n, co, l_out], out)?;
        Ok(self.push(v, Op::Conv1d { x, w: kernel, stride }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(Error::invalid("mean_axis", format!("axis {axis} of {sx:?}")));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let mut out = vec![0.0; outer * inner];
        let xd = self.value(x).data();
        for o in 0..outer {
            for c in 0..ext {
                let src = &xd[(o * ext + c) * inner..][..inner];
                out[o * inner..][..inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v /= ext as f64);
        let mut shape = sx.clone();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    /// Biased variance over all elements.
    pub fn var_biased(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let n = d.len() as f64;
        let mu = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::VarBiased(a))
    }

    /// `x·Φ(x)` with the exact normal CDF.
    pub fn gelu_exact(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x * std_normal_cdf(x));
        self.push(v, Op::Gelu(a))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::invalid(op, format!("needs a non-empty last axis, got {:?}", self.shape(a)))),
        }
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax_lastdim", a)?;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax_lastdim", a)?;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|e| *e -= lse);
        }
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    /// Normalizes over the last axis, then applies per-feature `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let d = self.last_dim("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, e) in xhat[r * d..][..d].iter_mut().zip(row) {
                *o = (e - mu) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Standardizes each feature (axis 1) with the statistics of this batch,
    /// pooled over the batch axis and any trailing axes.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::invalid("batch_normalize", format!("needs [N, C, ..], got {sx:?}")));
        }
        let (n, c, inner) = split_axis(&sx, 1);
        let count = n * inner;
        if count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (f, m) in mean.iter_mut().enumerate() {
                *m += xd[(b * c + f) * inner..][..inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for f in 0..c {
                let mu = mean[f];
                var[f] += xd[(b * c + f) * inner..][..inner]
                    .iter()
                    .map(|e| (e - mu) * (e - mu))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for f in 0..c {
                let base = (b * c + f) * inner;
                for i in base..base + inner {
                    out[i] = (xd[i] - mean[f]) * rstd[f];
                }
            }
        }
        let v = Tensor::new(sx, out)?;
        let stats = BatchStats {
            mean,
            var_biased: var,
            count,
        };
        Ok((self.push(v, Op::BatchNormalize { x, rstd }), stats))
    }

    /// Average pooling over the last axis.
    pub fn avg_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let len = *sx.last().unwrap_or(&0);
        if window == 0 || stride == 0 || window > len {
            return Err(Error::invalid(
                "avg_pool1d",
                format!("window {window}, stride {stride} on length {len}"),
            ));
        }
        let l_out = (len - window) / stride + 1;
        let rows = self.value(x).numel() / len;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * l_out);
        for r in 0..rows {
            let row = &xd[r * len..][..len];
            for t in 0..l_out {
                out.push(row[t * stride..t * stride + window].iter().sum::<f64>() / window as f64);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = l_out;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::AvgPool1d { x, window, stride }))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(Error::Empty("concat inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * ext * inner..][..ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start > end || end > sx[axis] {
            return Err(Error::invalid("slice", format!("{start}..{end} on axis {axis} of {sx:?}")));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let width = end - start;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * ext + start) * inner..][..width * inner]);
        }
        let mut shape = sx;
        shape[axis] = width;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if a0 >= sx.len() || a1 >= sx.len() {
            return Err(Error::invalid("transpose", format!("axes ({a0}, {a1}) of {sx:?}")));
        }
        let (data, shape) = swap_axes(self.value(x).data(), &sx, a0, a1);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Transpose { x, a0, a1 }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Gradient rule of node `id`, given its upstream gradient.
    pub(crate) fn backward_node(&self, id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
                self.accumulate(grads, *b, |g| add_into(g, grad));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(grad).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |g| g.iter_mut().zip(grad).for_each(|(d, s)| *d += c * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
            }
            Op::AddBroadcast { x, b, axis } => {
                let (outer, ext, inner) = split_axis(out.shape(), *axis);
                self.accumulate(grads, *x, |g| add_into(g, grad));
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        for (c, gc) in g.iter_mut().enumerate().take(ext) {
                            *gc += grad[(o * ext + c) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MulBroadcast { x, b, axis } => {
                let (outer, ext, inner) = split_axis(out.shape(), *axis);
                let (vx, vb) = (self.value(*x).data(), self.value(*b).data());
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for c in 0..ext {
                            let base = (o * ext + c) * inner;
                            for i in base..base + inner {
                                g[i] += grad[i] * vb[c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        for (c, gc) in g.iter_mut().enumerate().take(ext) {
                            let base = (o * ext + c) * inner;
                            *gc += (base..base + inner).map(|i| grad[i] * vx[i]).sum::<f64>();
                        }
                    }
                });
            }
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let b_batched = self.value(b).ndim() == 3;
                self.accumulate(grads, a, |g| {
                    for p in 0..batch {
                        let boff = if b_batched { p * k * n } else { 0 };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &grad[p * m * n..],
                            n as isize,
                            1,
                            &vb[boff..],
                            1,
                            n as isize,
                            1.0,
                            &mut g[p * m * k..],
                            k as isize,
                            1,
                        );
                    }
                });
                self.accumulate(grads, b, |g| {
                    for p in 0..batch {
                        let boff = if b_batched { p * k * n } else { 0 };
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &va[p * m * k..],
                            1,
                            k as isize,
                            &grad[p * m * n..],
                            n as isize,
                            1,
                            1.0,
                            &mut g[boff..],
                            n as isize,
                            1,
                        );
                    }
                });
            }
            &Op::Conv1d { x, w, stride } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (nb, ci, len) = (sx[0], sx[1], sx[2]);
                let (co, k_len) = (sw[0], sw[2]);
                let l_out = out.shape()[2];
                let cols_w = nb * l_out;
                // [N, Cout, Lout] -> [Cout, N*Lout]
                let mut g2 = vec![0.0; co * cols_w];
                for b in 0..nb {
                    for c in 0..co {
                        g2[c * cols_w + b * l_out..][..l_out]
                            .copy_from_slice(&grad[(b * co + c) * l_out..][..l_out]);
                    }
                }
                let rows = ci * k_len;
                if self.requires_grad(w) {
                    let cols = im2col(self.value(x).data(), nb, ci, len, k_len, stride, l_out);
                    self.accumulate(grads, w, |g| {
                        gemm(
                            co,
                            cols_w,
                            rows,
                            1.0,
                            &g2,
                            cols_w as isize,
                            1,
                            &cols,
                            1,
                            cols_w as isize,
                            1.0,
                            g,
                            rows as isize,
                            1,
                        );
                    });
                }
                if self.requires_grad(x) {
                    let mut dcols = vec![0.0; rows * cols_w];
                    gemm(
                        rows,
                        co,
                        cols_w,
                        1.0,
                        self.value(w).data(),
                        1,
                        rows as isize,
                        &g2,
                        cols_w as isize,
                        1,
                        0.0,
                        &mut dcols,
                        cols_w as isize,
                        1,
                    );
                    self.accumulate(grads, x, |g| {
                        for b in 0..nb {
                            for c in 0..ci {
                                let grow = &mut g[(b * ci + c) * len..][..len];
                                for k in 0..k_len {
                                    let src = &dcols[(c * k_len + k) * cols_w + b * l_out..][..l_out];
                                    for (t, s) in src.iter().enumerate() {
                                        grow[t * stride + k] += s;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|d| *d += grad[0]));
            }
            Op::Mean(a) => {
                let s = grad[0] / self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|d| *d += s));
            }
            &Op::MeanAxis { x, axis } => {
                let (outer, ext, inner) = split_axis(self.shape(x), axis);
                self.accumulate(grads, x, |g| {
                    for o in 0..outer {
                        for c in 0..ext {
                            let dst = &mut g[(o * ext + c) * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(&grad[o * inner..][..inner]) {
                                *d += s / ext as f64;
                            }
                        }
                    }
                });
            }
            Op::VarBiased(a) => {
                let d = self.value(*a).data();
                let n = d.len() as f64;
                let mu = d.iter().sum::<f64>() / n;
                self.accumulate(grads, *a, |g| {
                    for (gi, xi) in g.iter_mut().zip(d) {
                        *gi += grad[0] * 2.0 * (xi - mu) / n;
                    }
                });
            }
            Op::Gelu(a) => {
                let d = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        let x = d[i];
                        g[i] += grad[i] * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                });
            }
            Op::Softmax(a) => {
                let dim = *out.shape().last().unwrap();
                let y = out.data();
                self.accumulate(grads, *a, |g| {
                    for r in 0..y.len() / dim {
                        let (yr, gr) = (&y[r * dim..][..dim], &grad[r * dim..][..dim]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            g[r * dim + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let dim = *out.shape().last().unwrap();
                let y = out.data();
                self.accumulate(grads, *a, |g| {
                    for r in 0..y.len() / dim {
                        let gr = &grad[r * dim..][..dim];
                        let s: f64 = gr.iter().sum();
                        for j in 0..dim {
                            g[r * dim + j] += gr[j] - y[r * dim + j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                self.accumulate(grads, *beta, |g| {
                    for (i, s) in grad.iter().enumerate() {
                        g[i % dim] += s;
                    }
                });
                self.accumulate(grads, *gamma, |g| {
                    for (i, s) in grad.iter().enumerate() {
                        g[i % dim] += s * xhat[i];
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * dim;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..dim {
                            let dxh = grad[base + j] * gm[j];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[base + j];
                        }
                        mean_d /= dim as f64;
                        mean_dx /= dim as f64;
                        for j in 0..dim {
                            let dxh = grad[base + j] * gm[j];
                            g[base + j] += rs * (dxh - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
            }
            Op::BatchNormalize { x, rstd } => {
                let (n, c, inner) = split_axis(out.shape(), 1);
                let xhat = out.data();
                let count = (n * inner) as f64;
                let mut mean_d = vec![0.0; c];
                let mut mean_dx = vec![0.0; c];
                for b in 0..n {
                    for f in 0..c {
                        let base = (b * c + f) * inner;
                        for i in base..base + inner {
                            mean_d[f] += grad[i];
                            mean_dx[f] += grad[i] * xhat[i];
                        }
                    }
                }
                mean_d.iter_mut().for_each(|v| *v /= count);
                mean_dx.iter_mut().for_each(|v| *v /= count);
                self.accumulate(grads, *x, |g| {
                    for b in 0..n {
                        for f in 0..c {
                            let base = (b * c + f) * inner;
                            for i in base..base + inner {
                                g[i] += rstd[f] * (grad[i] - mean_d[f] - xhat[i] * mean_dx[f]);
                            }
                        }
                    }
                });
            }
            &Op::AvgPool1d { x, window, stride } => {
                let len = *self.shape(x).last().unwrap();
                let l_out = *out.shape().last().unwrap();
                self.accumulate(grads, x, |g| {
                    for r in 0..grad.len() / l_out {
                        for t in 0..l_out {
                            let s = grad[r * l_out + t] / window as f64;
                            g[r * len + t * stride..][..window].iter_mut().for_each(|d| *d += s);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * mask[i];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[*axis];
                    self.accumulate(grads, x, |g| {
                        for o in 0..outer {
                            let src = &grad[(o * total + offset) * inner..][..ext * inner];
                            add_into(&mut g[o * ext * inner..][..ext * inner], src);
                        }
                    });
                    offset += ext;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(x), axis);
                let width = out.shape()[axis];
                self.accumulate(grads, x, |g| {
                    for o in 0..outer {
                        let src = &grad[o * width * inner..][..width * inner];
                        add_into(&mut g[(o * ext + start) * inner..][..width * inner], src);
                    }
                });
            }
            &Op::Transpose { x, a0, a1 } => {
                let (back, _) = swap_axes(grad, out.shape(), a0, a1);
                self.accumulate(grads, x, |g| add_into(g, &back));
            }
            Op::Custom { inputs, f } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = f.backward(&vals, out, grad);
                for (v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        self.accumulate(grads, *v, |g| add_into(g, &c));
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
