//! Convolution and normalisation layers shared by the backbone, the KAN
//! block and the decoder.

use crate::error::Result;
use crate::math;
use crate::param::{Builder, Ctx, ParamId, ParamKind};
use crate::tape::Var;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-10;

/// How a convolution mixes channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// One filter per channel (`groups = in_c`, `out_c = in_c`).
    Depthwise,
    /// 1×1 channel mixing.
    Pointwise,
    /// Dense `k×k` convolution over all input channels.
    Standard,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub mode: ConvMode,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded convolution; `k` is forced to 1 for pointwise mode.
    pub fn new(b: &mut Builder, name: &str, mode: ConvMode, in_c: usize, out_c: usize, k: usize, stride: usize, bias: bool) -> Self {
        let k = if mode == ConvMode::Pointwise { 1 } else { k };
        let out_c = if mode == ConvMode::Depthwise { in_c } else { out_c };
        let per_filter = if mode == ConvMode::Depthwise { 1 } else { in_c };
        let fan_in = per_filter * k * k;
        let bound = 1.0 / math::sqrt(fan_in as f64);
        b.scope(name, |b| {
            let weight = b.uniform("weight", ParamKind::Weight, &[out_c, per_filter, k, k], bound);
            let bias = bias.then(|| b.uniform("bias", ParamKind::Bias, &[out_c], bound));
            Self { weight, bias, mode, in_c, out_c, k, stride, pad: k / 2 }
        })
    }

    pub fn groups(&self) -> usize {
        if self.mode == ConvMode::Depthwise {
            self.in_c
        } else {
            1
        }
    }

    pub fn num_params(&self) -> usize {
        let per_filter = if self.mode == ConvMode::Depthwise { 1 } else { self.in_c };
        self.out_c * per_filter * self.k * self.k + if self.bias.is_some() { self.out_c } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad, self.groups())?;
        match self.bias {
            Some(b) => {
                let bv = ctx.param(b);
                ctx.tape.channel_add(y, bv, 1)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalisation over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("gamma", ParamKind::Norm, &[channels], 1.0),
            beta: b.constant("beta", ParamKind::Norm, &[channels], 0.0),
            running_mean: b.constant("running_mean", ParamKind::Buffer, &[channels], 0.0),
            running_var: b.constant("running_var", ParamKind::Buffer, &[channels], 1.0),
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.training() {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
            ctx.record_bn(self.running_mean, self.running_var, stats);
            Ok(y)
        } else {
            let store = ctx.store();
            let (m, v) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
            ctx.tape.batch_norm_eval(x, g, b, m, v, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("gamma", ParamKind::Norm, &[dim], 1.0),
            beta: b.constant("beta", ParamKind::Norm, &[dim], 0.0),
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Depthwise `k×k` (no bias) followed by pointwise 1×1.
#[derive(Clone, Debug)]
pub struct DwSep {
    pub dw: Conv2d,
    pub pw: Conv2d,
}

impl DwSep {
    pub fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, k: usize, pw_bias: bool) -> Self {
        b.scope(name, |b| Self {
            dw: Conv2d::new(b, "dw", ConvMode::Depthwise, in_c, in_c, k, 1, false),
            pw: Conv2d::new(b, "pw", ConvMode::Pointwise, in_c, out_c, 1, 1, pw_bias),
        })
    }

    pub fn num_params(&self) -> usize {
        self.dw.num_params() + self.pw.num_params()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.dw.forward(ctx, x)?;
        self.pw.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Silu,
    Relu,
}

pub fn activate(ctx: &mut Ctx, x: Var, act: Act) -> Result<Var> {
    match act {
        Act::Silu => ctx.tape.silu(x),
        Act::Relu => ctx.tape.relu(x),
    }
}
