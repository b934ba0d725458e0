//! Forward implementations and backward rules for every built-in op.

use super::conv::{conv2d_backward, conv2d_forward, ConvDims};
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{BackwardCtx, BinKind, Op, Tape, TensorId, UnaryKind};
use super::{broadcast_shapes, numel, reduce_to_shape, strides, Tensor, TensorError};

type Slots = Vec<Option<Vec<f32>>>;

impl Tape {
    fn req2(&self, a: TensorId, b: TensorId) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    // ── elementwise binary ───────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(bin_name(kind), av.shape(), bv.shape())?;
        let data = apply_binary(kind, av, bv, &out_shape);
        let sidecar = if out_shape == [1] && av.is_scalar() && bv.is_scalar() {
            let (x, y) = (self.scalar_f64(a), self.scalar_f64(b));
            Some(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            })
        } else {
            None
        };
        let t = Tensor::new(out_shape, data).expect("binary shape");
        let req = self.req2(a, b);
        Ok(self.push(t, Op::Binary { kind, a, b }, req, sidecar))
    }

    // ── unary ────────────────────────────────────────────────────────

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }
    /// Fixed slope 0.2 on the negative side.
    pub fn leaky_relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::LeakyRelu, x)
    }
    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn clamp01(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Clamp01, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().map(|&v| unary_f32(kind, v)).collect();
        let sidecar =
            if xv.is_scalar() { Some(unary_f64(kind, self.scalar_f64(x))) } else { None };
        let t = Tensor::new(xv.shape().to_vec(), data).expect("unary shape");
        let req = self.requires_grad(x);
        self.push(t, Op::Unary { kind, x }, req, sidecar)
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().map(|&v| v * c).collect();
        let sidecar = if xv.is_scalar() { Some(self.scalar_f64(x) * c as f64) } else { None };
        let t = Tensor::new(xv.shape().to_vec(), data).expect("scale shape");
        let req = self.requires_grad(x);
        self.push(t, Op::Scale { x, c }, req, sidecar)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f32) -> TensorId {
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().map(|&v| v + c).collect();
        let sidecar = if xv.is_scalar() { Some(self.scalar_f64(x) + c as f64) } else { None };
        let t = Tensor::new(xv.shape().to_vec(), data).expect("add_scalar shape");
        let req = self.requires_grad(x);
        self.push(t, Op::AddScalar { x }, req, sidecar)
    }

    // ── matrix products ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (dims2(av)?, dims2(bv)?);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                a: av.shape().to_vec(),
                b: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        let req = self.req2(a, b);
        Ok(self.push(t, Op::Matmul { a, b }, req, None))
    }

    /// Batched matmul over equal leading dimensions: [B,m,k]·[B,k,n].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([ba, m, k], [bb, k2, n]) = (dims3(av)?, dims3(bv)?);
        if ba != bb || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                a: av.shape().to_vec(),
                b: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; ba * m * n];
        for i in 0..ba {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![ba, m, n], out).expect("bmm shape");
        let req = self.req2(a, b);
        Ok(self.push(t, Op::Bmm { a, b }, req, None))
    }

    // ── convolution & spatial ops ────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = ConvDims::new(xv.shape(), wv.shape(), stride, pad).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "conv2d",
                a: xv.shape().to_vec(),
                b: wv.shape().to_vec(),
            }
        })?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [d.cout] {
                return Err(TensorError::BadShape {
                    op: "conv2d",
                    expected: format!("bias [{}]", d.cout),
                    got: bs.to_vec(),
                });
            }
        }
        let bias_data = bias.map(|b| self.data(b).to_vec());
        let out = conv2d_forward(self.data(x), self.data(w), bias_data.as_deref(), &d);
        let t = Tensor::new(vec![d.cout, d.ho, d.wo], out).expect("conv shape");
        let req = self.req2(x, w) || bias.map_or(false, |b| self.requires_grad(b));
        Ok(self.push(t, Op::Conv2d { x, w, bias, stride, pad }, req, None))
    }

    /// Bilinear resize up by an integer factor, half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: TensorId, factor: usize) -> Result<TensorId, TensorError> {
        let xv = self.value(x);
        let [c, h, w] = dims3(xv)?;
        if factor == 0 {
            return Err(TensorError::InvalidArg { op: "upsample", msg: "factor 0".into() });
        }
        let out = upsample_bilinear_fwd(xv.data(), c, h, w, factor);
        let t = Tensor::new(vec![c, h * factor, w * factor], out).expect("upsample shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::UpsampleBilinear { x, factor }, req, None))
    }

    /// 2x2 average pooling, stride 2. Requires even spatial dims.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xv = self.value(x);
        let [c, h, w] = dims3(xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "avg_pool2",
                expected: "even spatial dims".into(),
                got: xv.shape().to_vec(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    out[(ci * ho + oy) * wo + ox] = 0.25
                        * (xv.data()[base]
                            + xv.data()[base + 1]
                            + xv.data()[base + w]
                            + xv.data()[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out).expect("pool shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::AvgPool2 { x }, req, None))
    }

    /// [C·r², H, W] -> [C, H·r, W·r].
    pub fn pixel_shuffle(&mut self, x: TensorId, factor: usize) -> Result<TensorId, TensorError> {
        let xv = self.value(x);
        let [c_in, h, w] = dims3(xv)?;
        let r = factor;
        if r == 0 || c_in % (r * r) != 0 {
            return Err(TensorError::BadShape {
                op: "pixel_shuffle",
                expected: format!("channels divisible by {}", r * r),
                got: xv.shape().to_vec(),
            });
        }
        let c = c_in / (r * r);
        let mut out = vec![0.0f32; c_in * h * w];
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[(co * h * r + y * r + dy) * w * r + x_ * r + dx] =
                                xv.data()[(ci * h + y) * w + x_];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![c, h * r, w * r], out).expect("shuffle shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::PixelShuffle { x, factor }, req, None))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let last = *shape.last().ok_or(TensorError::BadShape {
            op: "softmax",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        let rows = xv.numel() / last;
        let mut out = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let xs = &xv.data()[r * last..(r + 1) * last];
            let os = &mut out[r * last..(r + 1) * last];
            let mx = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = (v - mx).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in os.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(shape, out).expect("softmax shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::Softmax { x }, req, None))
    }

    /// Layer normalization over the last dimension with affine params.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let last = *shape.last().ok_or(TensorError::BadShape {
            op: "layernorm",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        if self.shape(gamma) != [last] || self.shape(beta) != [last] {
            return Err(TensorError::BadShape {
                op: "layernorm",
                expected: format!("gamma/beta [{last}]"),
                got: self.shape(gamma).to_vec(),
            });
        }
        let rows = xv.numel() / last;
        let mut out = vec![0.0f32; xv.numel()];
        let (g, b) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        for r in 0..rows {
            let xs = &xv.data()[r * last..(r + 1) * last];
            let os = &mut out[r * last..(r + 1) * last];
            let (mu, var) = mean_var(xs);
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..last {
                os[i] = (xs[i] - mu) * inv * g[i] + b[i];
            }
        }
        let t = Tensor::new(shape, out).expect("layernorm shape");
        let req = self.req2(x, gamma) || self.requires_grad(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, req, None))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat", msg: "no inputs".into() });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    a: first.clone(),
                    b: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f32; numel(&out_shape)];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for &id in inputs {
            let len = self.shape(id)[axis];
            let data = self.data(id);
            let row_in = len * inner;
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + row_in]
                    .copy_from_slice(&data[o * row_in..(o + 1) * row_in]);
            }
            offset += row_in;
        }
        let t = Tensor::new(out_shape, out).expect("concat shape");
        let req = inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, req, None))
    }

    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::InvalidArg {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        let data = self.data(x);
        let row_in = shape[axis] * inner;
        let row_out = len * inner;
        for o in 0..outer {
            out[o * row_out..(o + 1) * row_out]
                .copy_from_slice(&data[o * row_in + start * inner..o * row_in + (start + len) * inner]);
        }
        let t = Tensor::new(out_shape, out).expect("slice shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::Slice { x, axis, start, len }, req, None))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let t = self.value(x).reshaped(shape)?;
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape { x }, req, None))
    }

    /// Permutes dimensions: `out.shape[d] = in.shape[perm[d]]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() || {
            let mut seen = vec![false; perm.len()];
            perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        } {
            return Err(TensorError::InvalidArg {
                op: "permute",
                msg: format!("invalid permutation {perm:?} for rank {}", shape.len()),
            });
        }
        let out = permute_data(self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(out_shape, out).expect("permute shape");
        let req = self.requires_grad(x);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, req, None))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += v as f64;
        }
        let t = Tensor::scalar(acc as f32);
        let req = self.requires_grad(x);
        self.push(t, Op::SumAll { x }, req, Some(acc))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel_of(x).max(1) as f64;
        let mut acc = 0.0f64;
        for &v in self.data(x) {
            acc += v as f64;
        }
        acc /= n;
        let t = Tensor::scalar(acc as f32);
        let req = self.requires_grad(x);
        self.push(t, Op::MeanAll { x }, req, Some(acc))
    }

    // ── common composites ────────────────────────────────────────────

    /// mean(|a - b|)
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    /// mean((a - b)^2)
    pub fn mse_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.mean_all(d2))
    }

    /// x·W + b for x [N,K], w [K,M], b [M].
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}

fn bin_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

fn dims2(t: &Tensor) -> Result<[usize; 2], TensorError> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(TensorError::BadShape {
            op: "matmul",
            expected: "rank 2".into(),
            got: t.shape().to_vec(),
        }),
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3], TensorError> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(TensorError::BadShape {
            op: "spatial op",
            expected: "rank 3".into(),
            got: t.shape().to_vec(),
        }),
    }
}

fn unary_f32(kind: UnaryKind, v: f32) -> f32 {
    match kind {
        UnaryKind::Neg => -v,
        UnaryKind::Exp => v.exp(),
        UnaryKind::Sin => v.sin(),
        UnaryKind::Sqrt => v.sqrt(),
        UnaryKind::Abs => v.abs(),
        UnaryKind::Relu => v.max(0.0),
        UnaryKind::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.2 * v
            }
        }
        UnaryKind::Tanh => v.tanh(),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        UnaryKind::Softplus => softplus(v),
        UnaryKind::Clamp01 => v.clamp(0.0, 1.0),
    }
}

fn unary_f64(kind: UnaryKind, v: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -v,
        UnaryKind::Exp => v.exp(),
        UnaryKind::Sin => v.sin(),
        UnaryKind::Sqrt => v.sqrt(),
        UnaryKind::Abs => v.abs(),
        UnaryKind::Relu => v.max(0.0),
        UnaryKind::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.2 * v
            }
        }
        UnaryKind::Tanh => v.tanh(),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        UnaryKind::Softplus => {
            if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        }
        UnaryKind::Clamp01 => v.clamp(0.0, 1.0),
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(v: f32) -> f32 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn unary_grad(kind: UnaryKind, x: f32, y: f32, g: f32) -> f32 {
    match kind {
        UnaryKind::Neg => -g,
        UnaryKind::Exp => g * y,
        UnaryKind::Sin => g * x.cos(),
        UnaryKind::Sqrt => {
            if y > 0.0 {
                g * 0.5 / y
            } else {
                0.0
            }
        }
        UnaryKind::Abs => {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu => {
            if x > 0.0 {
                g
            } else {
                0.2 * g
            }
        }
        UnaryKind::Tanh => g * (1.0 - y * y),
        UnaryKind::Sigmoid => g * y * (1.0 - y),
        UnaryKind::Softplus => g / (1.0 + (-x).exp()),
        UnaryKind::Clamp01 => {
            if x > 0.0 && x < 1.0 {
                g
            } else {
                0.0
            }
        }
    }
}

fn mean_var(xs: &[f32]) -> (f32, f32) {
    let n = xs.len() as f32;
    let mut mu = 0.0f32;
    for &v in xs {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0f32;
    for &v in xs {
        var += (v - mu) * (v - mu);
    }
    (mu, var / n)
}

/// Materializes `data` (of shape `shape`) tiled up to `out_shape`.
pub(crate) fn broadcast_gather(data: &[f32], shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let in_strides = strides(&padded);
    let out_strides = strides(out_shape);
    let n = numel(out_shape);
    let mut out = vec![0.0f32; n];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..rank {
            let coord = (flat / out_strides[d]) % out_shape[d];
            if padded[d] != 1 {
                src += coord * in_strides[d];
            }
        }
        *o = data[src];
    }
    out
}

fn apply_binary(kind: BinKind, a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Vec<f32> {
    let f = |x: f32, y: f32| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.numel() == 1 {
        let y = b.data()[0];
        return a.data().iter().map(|&x| f(x, y)).collect();
    }
    if a.numel() == 1 {
        let x = a.data()[0];
        return b.data().iter().map(|&y| f(x, y)).collect();
    }
    // suffix broadcast fast path: b's shape is a trailing suffix of a's
    if out_shape == a.shape() && a.shape().ends_with(b.shape()) {
        let bn = b.numel();
        let mut out = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(bn) {
            out.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let ae = broadcast_gather(a.data(), a.shape(), out_shape);
    let be = broadcast_gather(b.data(), b.shape(), out_shape);
    ae.iter().zip(&be).map(|(&x, &y)| f(x, y)).collect()
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let n = numel(shape);
    let mut out = vec![0.0f32; n];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..perm.len() {
            let coord = (flat / out_strides[d]) % out_shape[d];
            src += coord * in_strides[perm[d]];
        }
        *o = data[src];
    }
    out
}

fn upsample_bilinear_fwd(x: &[f32], c: usize, h: usize, w: usize, r: usize) -> Vec<f32> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0f32; c * ho * wo];
    let taps_y = bilinear_taps(h, r);
    let taps_x = bilinear_taps(w, r);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let op = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = taps_y[oy];
            for ox in 0..wo {
                let (x0, x1, fx) = taps_x[ox];
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                op[oy * wo + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Per-output-coordinate source taps for half-pixel-centered bilinear resize.
fn bilinear_taps(n_in: usize, r: usize) -> Vec<(usize, usize, f32)> {
    let n_out = n_in * r;
    (0..n_out)
        .map(|o| {
            let src = (o as f32 + 0.5) / r as f32 - 0.5;
            let clamped = src.clamp(0.0, (n_in - 1) as f32);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, clamped - i0 as f32)
        })
        .collect()
}

// ── backward dispatch ────────────────────────────────────────────────

fn acc(tape: &Tape, slots: &mut Slots, id: TensorId, g: Vec<f32>) {
    if !tape.requires_grad(id) {
        return;
    }
    match &mut slots[id.0] {
        Some(buf) => {
            for (b, v) in buf.iter_mut().zip(&g) {
                *b += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn backward_node(
    tape: &Tape,
    id: usize,
    gout: &[f32],
    slots: &mut Slots,
) -> Result<(), TensorError> {
    let node = &tape.nodes[id];
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Unary { kind, x } => {
            let xs = tape.data(*x);
            let ys = node.value.data();
            let g: Vec<f32> = (0..xs.len())
                .map(|i| unary_grad(*kind, xs[i], ys[i], gout[i]))
                .collect();
            acc(tape, slots, *x, g);
        }
        Op::Binary { kind, a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let out_shape = node.value.shape();
            match kind {
                BinKind::Add => {
                    if tape.requires_grad(*a) {
                        acc(tape, slots, *a, reduce_to_shape(gout, out_shape, av.shape()));
                    }
                    if tape.requires_grad(*b) {
                        acc(tape, slots, *b, reduce_to_shape(gout, out_shape, bv.shape()));
                    }
                }
                BinKind::Sub => {
                    if tape.requires_grad(*a) {
                        acc(tape, slots, *a, reduce_to_shape(gout, out_shape, av.shape()));
                    }
                    if tape.requires_grad(*b) {
                        let neg: Vec<f32> = gout.iter().map(|&v| -v).collect();
                        acc(tape, slots, *b, reduce_to_shape(&neg, out_shape, bv.shape()));
                    }
                }
                BinKind::Mul => {
                    if tape.requires_grad(*a) {
                        let bt = broadcast_gather(bv.data(), bv.shape(), out_shape);
                        let ga: Vec<f32> = gout.iter().zip(&bt).map(|(&g, &y)| g * y).collect();
                        acc(tape, slots, *a, reduce_to_shape(&ga, out_shape, av.shape()));
                    }
                    if tape.requires_grad(*b) {
                        let at = broadcast_gather(av.data(), av.shape(), out_shape);
                        let gb: Vec<f32> = gout.iter().zip(&at).map(|(&g, &x)| g * x).collect();
                        acc(tape, slots, *b, reduce_to_shape(&gb, out_shape, bv.shape()));
                    }
                }
                BinKind::Div => {
                    let bt = broadcast_gather(bv.data(), bv.shape(), out_shape);
                    if tape.requires_grad(*a) {
                        let ga: Vec<f32> = gout.iter().zip(&bt).map(|(&g, &y)| g / y).collect();
                        acc(tape, slots, *a, reduce_to_shape(&ga, out_shape, av.shape()));
                    }
                    if tape.requires_grad(*b) {
                        let at = broadcast_gather(av.data(), av.shape(), out_shape);
                        let gb: Vec<f32> = (0..gout.len())
                            .map(|i| -gout[i] * at[i] / (bt[i] * bt[i]))
                            .collect();
                        acc(tape, slots, *b, reduce_to_shape(&gb, out_shape, bv.shape()));
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            let g: Vec<f32> = gout.iter().map(|&v| v * c).collect();
            acc(tape, slots, *x, g);
        }
        Op::AddScalar { x } => {
            acc(tape, slots, *x, gout.to_vec());
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if tape.requires_grad(*a) {
                // dA = dC · Bᵀ
                let mut da = vec![0.0f32; m * k];
                gemm_nt(gout, bv.data(), &mut da, m, n, k);
                acc(tape, slots, *a, da);
            }
            if tape.requires_grad(*b) {
                // dB = Aᵀ · dC
                let mut db = vec![0.0f32; k * n];
                gemm_tn(av.data(), gout, &mut db, k, m, n);
                acc(tape, slots, *b, db);
            }
        }
        Op::Bmm { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let [bn, m, k] = [av.shape()[0], av.shape()[1], av.shape()[2]];
            let n = bv.shape()[2];
            if tape.requires_grad(*a) {
                let mut da = vec![0.0f32; bn * m * k];
                for i in 0..bn {
                    gemm_nt(
                        &gout[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(tape, slots, *a, da);
            }
            if tape.requires_grad(*b) {
                let mut db = vec![0.0f32; bn * k * n];
                for i in 0..bn {
                    gemm_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &gout[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                acc(tape, slots, *b, db);
            }
        }
        Op::Conv2d { x, w, bias, stride, pad } => {
            let d = ConvDims::new(tape.shape(*x), tape.shape(*w), *stride, *pad)
                .expect("validated at forward");
            let want_b = bias.map_or(false, |b| tape.requires_grad(b));
            let (dx, dw, db) = conv2d_backward(
                tape.data(*x),
                tape.data(*w),
                gout,
                &d,
                tape.requires_grad(*x),
                tape.requires_grad(*w),
                want_b,
            );
            if let Some(dx) = dx {
                acc(tape, slots, *x, dx);
            }
            if let Some(dw) = dw {
                acc(tape, slots, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, bias) {
                acc(tape, slots, *b, db);
            }
        }
        Op::UpsampleBilinear { x, factor } => {
            let [c, h, w] = [tape.shape(*x)[0], tape.shape(*x)[1], tape.shape(*x)[2]];
            let r = *factor;
            let (ho, wo) = (h * r, w * r);
            let taps_y = bilinear_taps(h, r);
            let taps_x = bilinear_taps(w, r);
            let mut dx = vec![0.0f32; c * h * w];
            for ci in 0..c {
                let dp = &mut dx[ci * h * w..(ci + 1) * h * w];
                let gp = &gout[ci * ho * wo..(ci + 1) * ho * wo];
                for oy in 0..ho {
                    let (y0, y1, fy) = taps_y[oy];
                    for ox in 0..wo {
                        let (x0, x1, fx) = taps_x[ox];
                        let g = gp[oy * wo + ox];
                        dp[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        dp[y0 * w + x1] += g * (1.0 - fy) * fx;
                        dp[y1 * w + x0] += g * fy * (1.0 - fx);
                        dp[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
            acc(tape, slots, *x, dx);
        }
        Op::AvgPool2 { x } => {
            let [c, h, w] = [tape.shape(*x)[0], tape.shape(*x)[1], tape.shape(*x)[2]];
            let (ho, wo) = (h / 2, w / 2);
            let mut dx = vec![0.0f32; c * h * w];
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = 0.25 * gout[(ci * ho + oy) * wo + ox];
                        let base = ci * h * w + 2 * oy * w + 2 * ox;
                        dx[base] += g;
                        dx[base + 1] += g;
                        dx[base + w] += g;
                        dx[base + w + 1] += g;
                    }
                }
            }
            acc(tape, slots, *x, dx);
        }
        Op::PixelShuffle { x, factor } => {
            let [c_in, h, w] = [tape.shape(*x)[0], tape.shape(*x)[1], tape.shape(*x)[2]];
            let r = *factor;
            let c = c_in / (r * r);
            let mut dx = vec![0.0f32; c_in * h * w];
            for co in 0..c {
                for dy in 0..r {
                    for dxx in 0..r {
                        let ci = co * r * r + dy * r + dxx;
                        for y in 0..h {
                            for x_ in 0..w {
                                dx[(ci * h + y) * w + x_] +=
                                    gout[(co * h * r + y * r + dy) * w * r + x_ * r + dxx];
                            }
                        }
                    }
                }
            }
            acc(tape, slots, *x, dx);
        }
        Op::Softmax { x } => {
            let ys = node.value.data();
            let last = *node.value.shape().last().unwrap();
            let rows = ys.len() / last;
            let mut dx = vec![0.0f32; ys.len()];
            for r in 0..rows {
                let y = &ys[r * last..(r + 1) * last];
                let g = &gout[r * last..(r + 1) * last];
                let mut dot = 0.0f32;
                for i in 0..last {
                    dot += y[i] * g[i];
                }
                let d = &mut dx[r * last..(r + 1) * last];
                for i in 0..last {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            acc(tape, slots, *x, dx);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xs = tape.data(*x);
            let gs = tape.data(*gamma);
            let last = *node.value.shape().last().unwrap();
            let rows = xs.len() / last;
            let mut dx = vec![0.0f32; xs.len()];
            let mut dgamma = vec![0.0f32; last];
            let mut dbeta = vec![0.0f32; last];
            let nf = last as f32;
            for r in 0..rows {
                let xr = &xs[r * last..(r + 1) * last];
                let gr = &gout[r * last..(r + 1) * last];
                let (mu, var) = mean_var(xr);
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat, plus accumulators for the mean/var terms
                let mut sum_dxhat = 0.0f32;
                let mut sum_dxhat_xhat = 0.0f32;
                for i in 0..last {
                    let xhat = (xr[i] - mu) * inv;
                    let dxhat = gr[i] * gs[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[i] += gr[i] * xhat;
                    dbeta[i] += gr[i];
                }
                let dr = &mut dx[r * last..(r + 1) * last];
                for i in 0..last {
                    let xhat = (xr[i] - mu) * inv;
                    let dxhat = gr[i] * gs[i];
                    dr[i] = inv / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            acc(tape, slots, *x, dx);
            if tape.requires_grad(*gamma) {
                acc(tape, slots, *gamma, dgamma);
            }
            if tape.requires_grad(*beta) {
                acc(tape, slots, *beta, dbeta);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let row_out = out_shape[*axis] * inner;
            let mut offset = 0usize;
            for &inp in inputs {
                let len = tape.shape(inp)[*axis];
                let row_in = len * inner;
                if tape.requires_grad(inp) {
                    let mut g = vec![0.0f32; tape.numel_of(inp)];
                    for o in 0..outer {
                        g[o * row_in..(o + 1) * row_in].copy_from_slice(
                            &gout[o * row_out + offset..o * row_out + offset + row_in],
                        );
                    }
                    acc(tape, slots, inp, g);
                }
                offset += row_in;
            }
        }
        Op::Slice { x, axis, start, len } => {
            let in_shape = tape.shape(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let row_in = in_shape[*axis] * inner;
            let row_out = len * inner;
            let mut g = vec![0.0f32; tape.numel_of(*x)];
            for o in 0..outer {
                g[o * row_in + start * inner..o * row_in + (start + len) * inner]
                    .copy_from_slice(&gout[o * row_out..(o + 1) * row_out]);
            }
            acc(tape, slots, *x, g);
        }
        Op::Reshape { x } => {
            acc(tape, slots, *x, gout.to_vec());
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0usize; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            let g = permute_data(gout, node.value.shape(), &inv);
            acc(tape, slots, *x, g);
        }
        Op::SumAll { x } => {
            let g = gout[0];
            acc(tape, slots, *x, vec![g; tape.numel_of(*x)]);
        }
        Op::MeanAll { x } => {
            let n = tape.numel_of(*x).max(1);
            let g = gout[0] / n as f32;
            acc(tape, slots, *x, vec![g; n]);
        }
        Op::Custom { inputs, grad } => {
            let ctx = BackwardCtx {
                inputs: inputs.iter().map(|&i| tape.value(i)).collect(),
                output: &node.value,
            };
            let want: Vec<bool> = inputs.iter().map(|&i| tape.requires_grad(i)).collect();
            let gs = grad.backward(&ctx, gout, &want);
            debug_assert_eq!(gs.len(), inputs.len());
            for (inp, g) in inputs.iter().zip(gs) {
                if let Some(g) = g {
                    acc(tape, slots, *inp, g);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.5, -2.0, 0.0, 7.25, -0.5, 3.0]));
        let ones = tape.leaf(&Tensor::full(&[2, 3], 1.0));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn broadcast_add_column_times_row() {
        // [[1],[2]] + [10,20] = [[11,21],[12,22]]
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2], &[10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.data(c), &[11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn shape_mismatch_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = tape.leaf(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let im = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(im), tape.data(m));

        // [[1,2],[3,4]]·[[5],[6]] = [[17],[39]]
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(&t(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[5], &[0.1, -2.0, 3.0, 4.5, -1.0]).requires_grad(true));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_sum_square_is_two_x() {
        let mut tape = Tape::new();
        let xt = t(&[4], &[0.5, -1.5, 2.0, 3.0]).requires_grad(true);
        let x = tape.leaf(&xt);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.iter().zip(xt.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).requires_grad(true));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradient_accumulates_over_consumers() {
        // loss = sum(x) + sum(x·x) → grad = 1 + 2x
        let mut tape = Tape::new();
        let xt = t(&[3], &[1.0, -2.0, 0.5]).requires_grad(true);
        let x = tape.leaf(&xt);
        let s1 = tape.sum_all(x);
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.iter().zip(xt.data()) {
            assert!((gi - (1.0 + 2.0 * xi)).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_linearity_of_losses() {
        // backward(l1 + l2) == backward(l1) + backward(l2), within 1e-6 rel
        let xt = Tensor::randn(&[6], 9).requires_grad(true);
        let build = |tape: &mut Tape, x: super::TensorId| {
            let s = tape.sin(x);
            let l1 = tape.sum_all(s);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.mean_all(sq);
            (l1, l2)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let (l1, l2) = build(&mut tape, x);
        let combined = tape.add(l1, l2).unwrap();
        let g_combined = tape.backward(combined).unwrap().get_or_zeros(&tape, x);
        let g1 = tape.backward(l1).unwrap().get_or_zeros(&tape, x);
        let g2 = tape.backward(l2).unwrap().get_or_zeros(&tape, x);
        for i in 0..6 {
            let want = g1[i] + g2[i];
            let rel = (g_combined[i] - want).abs() / want.abs().max(1e-6);
            assert!(rel < 1e-6, "{} vs {}", g_combined[i], want);
        }
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(&[3], 1).requires_grad(true));
        let y = tape.leaf(&Tensor::randn(&[3], 2).requires_grad(true));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get_or_zeros(&tape, y), vec![0.0; 3]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::randn(&[2, 3], 5).requires_grad(true));
        let b = tape.leaf(&Tensor::randn(&[2, 2], 6).requires_grad(true));
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 5]);
        let sl = tape.slice(cat, 1, 3, 2).unwrap();
        let l = tape.sum_all(sl);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get_or_zeros(&tape, a), vec![0.0; 6]);
        assert_eq!(grads.get_or_zeros(&tape, b), vec![1.0; 4]);
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(&[2, 3, 4], 3));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut tape = Tape::new();
        // 4 channels, 1x1 → 1 channel 2x2
        let x = tape.leaf(&t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(&[3, 7], 11));
        let y = tape.softmax(x).unwrap();
        for r in 0..3 {
            let s: f32 = tape.data(y)[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
