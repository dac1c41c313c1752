//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a single
//! reverse sweep visits each node once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::spline::SplineGrid;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Abs(Var),
    Silu(Var),
    Relu(Var),
    Sum(Var),
    ChannelAdd { x: Var, b: Var, c: usize, inner: usize },
    ChannelMul { x: Var, s: Var, c: usize, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<usize> },
    Upsample { x: Var, planes: usize, h: usize, w: usize, f: usize },
    Concat { parts: Vec<Var>, outer: usize, sizes: Vec<usize> },
    Reshape(Var),
    Transpose12 { x: Var, b: usize, m: usize, n: usize },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64>, d: usize },
    BatchNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64>, c: usize, inner: usize, training: bool },
    Softmax { x: Var, c: usize, inner: usize },
    LogSoftmax { x: Var, c: usize, inner: usize },
    Basis { x: Var, ders: Vec<f64>, nb: usize, channels: usize, summed: bool },
    SecondDiffSq { x: Var, seg: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mults: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Batch statistics from a training-mode batch norm, for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits `shape` at `axis` into (outer, extent, inner).
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(arg_err(op, format!("axis {} out of range for shape {:?}", axis, shape)));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
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

    /// Multiplies executed by matrix products and convolutions so far.
    pub fn mults(&self) -> u64 {
        self.mults
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// Elementwise `x^p`; inputs must keep the result finite.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.map("pow", x, Op::Pow(x, p), |v| math::pow(v, p))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, Op::Abs(x), f64::abs)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, Op::Silu(x), |v| v * math::sigmoid(v))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(arg_err("mean", format!("empty tensor")));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn channel_dims(&self, name: &'static str, x: Var, p: Var, axis: usize) -> Result<(usize, usize)> {
        let (_, c, inner) = split_axis(name, self.shape(x), axis)?;
        if self.shape(p) != [c] {
            return Err(shape_err(name, format!("expected [{}] along axis {}, got {:?}", c, axis, self.shape(p))));
        }
        Ok((c, inner))
    }

    /// Adds `b[c]` along `axis` of `x`.
    pub fn channel_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (c, inner) = self.channel_dims("channel_add", x, b, axis)?;
        let bv = self.value(b).data();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, &v)| v + bv[(i / inner) % c]).collect();
        let out = Tensor::new(t.shape(), data)?;
        self.push("channel_add", out, Op::ChannelAdd { x, b, c, inner }, &[x, b])
    }

    /// Multiplies by `s[c]` along `axis` of `x`.
    pub fn channel_mul(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let (c, inner) = self.channel_dims("channel_mul", x, s, axis)?;
        let sv = self.value(s).data();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, &v)| v * sv[(i / inner) % c]).collect();
        let out = Tensor::new(t.shape(), data)?;
        self.push("channel_mul", out, Op::ChannelMul { x, s, c, inner }, &[x, s])
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {} and {} differ", k, k2)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.mults += (m * k * n) as u64;
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`, the usual `x·Wᵀ` of a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("inner dims {} and {} differ", k, k2)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.mults += (m * k * n) as u64;
        self.push("matmul_nt", Tensor::new(&[m, n], out)?, Op::MatMulNT { a, b, m, k, n }, &[a, b])
    }

    /// Grouped convolution without bias; `w` is `[out_c, in_c/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (batch, in_c, h, wd) = self.value(x).dims4("conv2d")?;
        let (out_c, ipg, k, k2) = self.value(w).dims4("conv2d")?;
        if k != k2 || k == 0 {
            return Err(shape_err("conv2d", format!("kernel must be square, got {}×{}", k, k2)));
        }
        if stride == 0 || groups == 0 {
            return Err(arg_err("conv2d", format!("stride and groups must be positive")));
        }
        if in_c % groups != 0 || out_c % groups != 0 || ipg != in_c / groups {
            return Err(shape_err(
                "conv2d",
                format!("{} input channels, {} groups, kernel expects {} per group", in_c, groups, ipg),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("{}×{} input too small for kernel {}", h, wd, k)));
        }
        let geom = ConvGeom { batch, in_c, out_c, h, w: wd, k, stride, pad, groups };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; batch * out_c * oh * ow];
        self.mults += kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let t = Tensor::new(&[batch, out_c, oh, ow], out)?;
        self.push("conv2d", t, Op::Conv { x, w, geom }, &[x, w])
    }

    /// Max pooling with `-inf` padding; the gradient goes to the first maximum.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("maxpool2d")?;
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(arg_err("maxpool2d", format!("window {} stride {} pad {} on {}×{}", k, stride, pad, h, w)));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * c * oh * ow];
        let arg = kernels::maxpool_forward(self.value(x).data(), b * c, h, w, k, stride, pad, &mut out);
        let t = Tensor::new(&[b, c, oh, ow], out)?;
        self.push("maxpool2d", t, Op::MaxPool { x, arg }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample2d(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(arg_err("upsample2d", format!("factor must be >= 1")));
        }
        let (b, c, h, w) = self.value(x).dims4("upsample2d")?;
        if f == 1 {
            return self.reshape(x, &[b, c, h, w]);
        }
        let mut out = vec![0.0; b * c * h * w * f * f];
        kernels::upsample_forward(self.value(x).data(), b * c, h, w, f, &mut out);
        let t = Tensor::new(&[b, c, h * f, w * f], out)?;
        self.push("upsample2d", t, Op::Upsample { x, planes: b * c, h, w, f }, &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| arg_err("concat", format!("no inputs")))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} along axis {}", s, base, axis)));
            }
            sizes.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(p).data()[o * sz..(o + 1) * sz]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        self.push("concat", t, Op::Concat { parts: parts.to_vec(), outer, sizes }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// `[b, m, n] -> [b, n, m]`
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (b, m, n) = match *self.shape(x) {
            [b, m, n] => (b, m, n),
            ref s => return Err(shape_err("transpose12", format!("expected rank 3, got {:?}", s))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            let (s, d) = (&src[bi * m * n..][..m * n], &mut out[bi * m * n..][..m * n]);
            for i in 0..m {
                for j in 0..n {
                    d[j * m + i] = s[i * n + j];
                }
            }
        }
        let t = Tensor::new(&[b, n, m], out)?;
        self.push("transpose12", t, Op::Transpose12 { x, b, m, n }, &[x])
    }

    /// Layer normalisation over the last axis with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("layer_norm", format!("rank-0 input")))?;
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err("layer_norm", format!("affine params must be [{}]", d)));
        }
        let xs = self.value(x).data();
        let rows = if d == 0 { 0 } else { xs.len() / d };
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, g, b, xhat, rstd, d }, &[x, g, b])
    }

    fn bn_dims(&self, x: Var, g: Var, b: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("expected at least rank 2, got {:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let inner = s[2..].iter().product();
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return Err(shape_err("batch_norm", format!("affine params must be [{}]", c)));
        }
        Ok((n, c, inner))
    }

    fn bn_apply(&mut self, x: Var, g: Var, b: Var, mean: &[f64], rstd: Vec<f64>, training: bool) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(x, g, b)?;
        let xs = self.value(x).data();
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xs[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * gv[ch] + bv[ch];
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let op = Op::BatchNorm { x, g, b, xhat, rstd, c, inner, training };
        self.push("batch_norm", t, op, &[x, g, b])
    }

    /// Batch normalisation with statistics of the current batch (axis 1 is channels).
    pub fn batch_norm_train(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.bn_dims(x, g, b)?;
        let m = n * inner;
        if m == 0 {
            return Err(shape_err("batch_norm", format!("empty batch")));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                s += xs[(bi * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut q = 0.0;
            for bi in 0..n {
                q += xs[(bi * c + ch) * inner..][..inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q;
        }
        let rstd = var.iter().map(|&q| 1.0 / math::sqrt(q / m as f64 + eps)).collect();
        let unbiased = var.iter().map(|&q| if m > 1 { q / (m - 1) as f64 } else { 0.0 }).collect();
        let y = self.bn_apply(x, g, b, &mean, rstd, true)?;
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, g: Var, b: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, g, b)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", format!("running stats must have {} entries", c)));
        }
        let rstd = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
        self.bn_apply(x, g, b, mean, rstd, false)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, c, inner) = split_axis("softmax", self.shape(x), axis)?;
        let out = softmax_raw(self.value(x).data(), outer, c, inner, false);
        let t = Tensor::new(self.shape(x), out)?;
        self.push("softmax", t, Op::Softmax { x, c, inner }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, c, inner) = split_axis("log_softmax", self.shape(x), axis)?;
        let out = softmax_raw(self.value(x).data(), outer, c, inner, true);
        let t = Tensor::new(self.shape(x), out)?;
        self.push("log_softmax", t, Op::LogSoftmax { x, c, inner }, &[x])
    }

    fn basis_op(&mut self, x: Var, grid: &SplineGrid, summed: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nb = grid.basis_count();
        let xs = self.value(x).data();
        let channels = if summed {
            match shape[..] {
                [_, c] => c,
                _ => return Err(shape_err("bspline_basis_sum", format!("expected N×C, got {:?}", shape))),
            }
        } else {
            1
        };
        let mut vals = vec![0.0; xs.len() * nb];
        let mut ders = vec![0.0; xs.len() * nb];
        let mut scratch = vec![0.0; grid.knots().len()];
        for (i, &v) in xs.iter().enumerate() {
            let (vs, ds) = (&mut vals[i * nb..(i + 1) * nb], &mut ders[i * nb..(i + 1) * nb]);
            grid.eval_into(v, vs, Some(ds), &mut scratch);
        }
        let (t, name) = if summed {
            let rows = shape[0];
            let mut out = vec![0.0; rows * nb];
            for r in 0..rows {
                let dst = &mut out[r * nb..(r + 1) * nb];
                for ch in 0..channels {
                    let src = &vals[(r * channels + ch) * nb..][..nb];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            (Tensor::new(&[rows, nb], out)?, "bspline_basis_sum")
        } else {
            let mut s = shape.clone();
            s.push(nb);
            (Tensor::new(&s, vals)?, "bspline_basis")
        };
        self.push(name, t, Op::Basis { x, ders, nb, channels, summed }, &[x])
    }

    /// B-spline basis of every element: output shape is `shape(x) + [G+O]`.
    pub fn bspline_basis(&mut self, x: Var, grid: &SplineGrid) -> Result<Var> {
        self.basis_op(x, grid, false)
    }

    /// Basis of an `N×C` input summed over the channel axis, giving `N×(G+O)`.
    pub fn bspline_basis_sum(&mut self, x: Var, grid: &SplineGrid) -> Result<Var> {
        self.basis_op(x, grid, true)
    }

    /// `Σ (x[j-1] − 2x[j] + x[j+1])²` within consecutive segments of length `seg`.
    pub fn second_diff_sq(&mut self, x: Var, seg: usize) -> Result<Var> {
        let xs = self.value(x).data();
        if seg == 0 || xs.len() % seg != 0 {
            return Err(shape_err("second_diff_sq", format!("{} values not divisible into segments of {}", xs.len(), seg)));
        }
        let mut s = 0.0;
        for chunk in xs.chunks(seg) {
            for w in chunk.windows(3) {
                let d = w[0] - 2.0 * w[1] + w[2];
                s += d * d;
            }
        }
        self.push("second_diff_sq", Tensor::scalar(s), Op::SecondDiffSq { x, seg }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(arg_err("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: (0..n).map(|_| None).collect() });
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                kept[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads: kept })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] * bv[j]));
                acc(*b, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] * av[j]));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                acc(*a, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] / bv[j]));
                acc(*b, &mut |s| (0..s.len()).for_each(|j| s[j] -= g[j] * y[j] / bv[j]));
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &v)| *d += c * v)),
            Op::AddScalar(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if *p != 0.0 {
                            s[j] += g[j] * p * math::pow(xv[j], p - 1.0);
                        }
                    }
                })
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if xv[j] > 0.0 {
                            s[j] += g[j];
                        } else if xv[j] < 0.0 {
                            s[j] -= g[j];
                        }
                    }
                })
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        let sg = math::sigmoid(xv[j]);
                        s[j] += g[j] * sg * (1.0 + xv[j] * (1.0 - sg));
                    }
                })
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| (0..s.len()).for_each(|j| if xv[j] > 0.0 { s[j] += g[j] }))
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::ChannelAdd { x, b, c, inner } => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| g.iter().enumerate().for_each(|(j, &v)| s[(j / inner) % c] += v));
            }
            Op::ChannelMul { x, s: sc, c, inner } => {
                let (xv, sv) = (self.value(*x).data(), self.value(*sc).data());
                acc(*x, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] * sv[(j / inner) % c]));
                acc(*sc, &mut |s| g.iter().enumerate().for_each(|(j, &v)| s[(j / inner) % c] += v * xv[j]));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |s| kernels::matmul_nt(g, bv, s, *m, *n, *k));
                acc(*b, &mut |s| kernels::matmul_tn(av, g, s, *m, *k, *n));
            }
            Op::MatMulNT { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // y = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |s| kernels::matmul(g, bv, s, *m, *n, *k));
                acc(*b, &mut |s| kernels::matmul_tn(g, av, s, *m, *n, *k));
            }
            Op::Conv { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = need_x.then(|| vec![0.0; xv.len()]);
                let mut gw = need_w.then(|| vec![0.0; wv.len()]);
                kernels::conv2d_backward(geom, xv, wv, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    acc(*x, &mut |s| add_into(s, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |s| add_into(s, &gw));
                }
            }
            Op::MaxPool { x, arg } => acc(*x, &mut |s| arg.iter().zip(g).for_each(|(&a, &v)| s[a] += v)),
            Op::Upsample { x, planes, h, w, f } => acc(*x, &mut |s| kernels::upsample_backward(g, *planes, *h, *w, *f, s)),
            Op::Concat { parts, outer, sizes } => {
                let row: usize = sizes.iter().sum();
                let mut off = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    acc(*p, &mut |s| {
                        for o in 0..*outer {
                            add_into(&mut s[o * sz..(o + 1) * sz], &g[o * row + off..][..sz]);
                        }
                    });
                    off += sz;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Transpose12 { x, b, m, n } => acc(*x, &mut |s| {
                for bi in 0..*b {
                    let (gs, d) = (&g[bi * m * n..][..m * n], &mut s[bi * m * n..][..m * n]);
                    for i in 0..*m {
                        for j in 0..*n {
                            d[i * n + j] += gs[j * m + i];
                        }
                    }
                }
            }),
            Op::LayerNorm { x, g: gam, b, xhat, rstd, d } => {
                let d = *d;
                let gv = self.value(*gam).data();
                acc(*x, &mut |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[r * d + j] += rs * (dh - inv * s1 - hr[j] * inv * s2);
                        }
                    }
                });
                acc(*gam, &mut |s| g.iter().zip(xhat).enumerate().for_each(|(j, (&v, &h))| s[j % d] += v * h));
                acc(*b, &mut |s| g.iter().enumerate().for_each(|(j, &v)| s[j % d] += v));
            }
            Op::BatchNorm { x, g: gam, b, xhat, rstd, c, inner, training } => {
                let (c, inner) = (*c, *inner);
                let gv = self.value(*gam).data();
                let n = if c * inner == 0 { 0 } else { g.len() / (c * inner) };
                let m = (n * inner) as f64;
                let mut sg = vec![0.0; c];
                let mut sgh = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * inner;
                        for j in off..off + inner {
                            sg[ch] += g[j];
                            sgh[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*x, &mut |s| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * inner;
                            let k = gv[ch] * rstd[ch];
                            for j in off..off + inner {
                                s[j] += if *training {
                                    k * (g[j] - sg[ch] / m - xhat[j] * sgh[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
                acc(*gam, &mut |s| add_into(s, &sgh));
                acc(*b, &mut |s| add_into(s, &sg));
            }
            Op::Softmax { x, c, inner } => {
                let (c, inner) = (*c, *inner);
                acc(*x, &mut |s| {
                    for_each_lane(y.len(), c, inner, |idx| {
                        let dotp: f64 = idx.clone().map(|j| g[j] * y[j]).sum();
                        idx.for_each(|j| s[j] += y[j] * (g[j] - dotp));
                    })
                })
            }
            Op::LogSoftmax { x, c, inner } => {
                let (c, inner) = (*c, *inner);
                acc(*x, &mut |s| {
                    for_each_lane(y.len(), c, inner, |idx| {
                        let gs: f64 = idx.clone().map(|j| g[j]).sum();
                        idx.for_each(|j| s[j] += g[j] - math::exp(y[j]) * gs);
                    })
                })
            }
            Op::Basis { x, ders, nb, channels, summed } => {
                let nb = *nb;
                acc(*x, &mut |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        let gi = if *summed { &g[(i / channels) * nb..][..nb] } else { &g[i * nb..][..nb] };
                        *sv += kernels::dot(gi, &ders[i * nb..(i + 1) * nb]);
                    }
                })
            }
            Op::SecondDiffSq { x, seg } => {
                let xv = self.value(*x).data();
                let seg = *seg;
                acc(*x, &mut |s| {
                    for (ci, chunk) in xv.chunks(seg).enumerate() {
                        for j in 1..seg.saturating_sub(1) {
                            let d = chunk[j - 1] - 2.0 * chunk[j] + chunk[j + 1];
                            let base = ci * seg;
                            s[base + j - 1] += 2.0 * d * g[0];
                            s[base + j] -= 4.0 * d * g[0];
                            s[base + j + 1] += 2.0 * d * g[0];
                        }
                    }
                })
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Calls `f` once per softmax lane with the flat indices of that lane.
fn for_each_lane(len: usize, c: usize, inner: usize, mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>)) {
    if c == 0 || inner == 0 {
        return;
    }
    let outer = len / (c * inner);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * c * inner + i;
            f((start..start + c * inner).step_by(inner));
        }
    }
}

fn softmax_raw(x: &[f64], outer: usize, c: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if c == 0 || inner == 0 {
        return out;
    }
    for_each_lane(outer * c * inner, c, inner, |idx| {
        let mx = idx.clone().map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.clone().map(|j| math::exp(x[j] - mx)).sum();
        let lz = math::ln(z);
        for j in idx {
            out[j] = if log { x[j] - mx - lz } else { math::exp(x[j] - mx) / z };
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tp.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[17.0, 39.0]);
        assert_eq!(tp.mults(), 4);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tp.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_and_square_grads() {
        let mut tp = Tape::new();
        let x = tp.var(t(&[2], &[1.0, 2.0]));
        let s = tp.sum(x).unwrap();
        assert_eq!(tp.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0]);
        let sq = tp.mul(x, x).unwrap();
        let l = tp.sum(sq).unwrap();
        assert_eq!(tp.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tp = Tape::new();
        let x = tp.var(Tensor::zeros(&[3]));
        assert!(matches!(tp.backward(x), Err(Error::Argument { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[1], &[1.0]));
        let z = tp.constant(t(&[1], &[0.0]));
        assert_eq!(tp.div(a, z), Err(Error::NonFinite("div")));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tp = Tape::new();
        let x = tp.var(t(&[2], &[1.0, 2.0]));
        let c = tp.constant(t(&[2], &[3.0, 4.0]));
        let p = tp.mul(x, c).unwrap();
        let l = tp.sum(p).unwrap();
        let g = tp.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn concat_along_channels() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f64));
        let b = tp.constant(Tensor::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f64));
        let c = tp.concat(&[a, b], 1).unwrap();
        assert_eq!(tp.shape(c), &[2, 3, 1, 2]);
        assert_eq!(tp.value(c).data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]);
    }

    #[test]
    fn transpose12_swaps() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::from_fn(&[1, 2, 3], |i| i as f64));
        let b = tp.transpose12(a).unwrap();
        assert_eq!(tp.value(b).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn second_diff_of_bump() {
        let mut tp = Tape::new();
        let a = tp.var(t(&[3], &[0.0, 1.0, 0.0]));
        let s = tp.second_diff_sq(a, 3).unwrap();
        assert_eq!(tp.value(s).item(), 4.0);
    }
}
