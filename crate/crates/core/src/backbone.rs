//! Bottom-up encoder: a stride-2 stem and five three-branch separable
//! inception stages with 2×2 max pooling between them.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::layers::{activate, Act, BatchNorm, Conv2d, ConvMode, DwSep};
use crate::math;
use crate::param::{Builder, Ctx};
use crate::tape::Var;

/// Channels of the stem output, before the first stage.
pub const STEM_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool_before: bool,
    pub branch_widths: [usize; 3],
}

impl StageSpec {
    /// Branch split `(3/8, 3/8, rest)` of `out_channels`, rounded.
    pub fn new(in_channels: usize, out_channels: usize, pool_before: bool) -> Self {
        let third = math::round(out_channels as f64 * 3.0 / 8.0) as usize;
        let b3 = out_channels.saturating_sub(2 * third);
        Self { in_channels, out_channels, pool_before, branch_widths: [third, third, b3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_widths.iter().sum::<usize>() != self.out_channels || self.branch_widths.contains(&0) {
            return Err(shape_err(
                "inception_sepconv",
                format!("branch widths {:?} must be positive and sum to {}", self.branch_widths, self.out_channels),
            ));
        }
        Ok(())
    }
}

/// Stage specs for a channel progression, starting after the stem.
pub fn stage_specs(channels: &[usize; 5]) -> Vec<StageSpec> {
    let mut prev = STEM_CHANNELS;
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = StageSpec::new(prev, c, i > 0);
            prev = c;
            s
        })
        .collect()
}

/// Two separable convs of one kernel size, each followed by BN and SiLU.
#[derive(Clone, Debug)]
pub struct SepBranch {
    pub conv1: DwSep,
    pub bn1: BatchNorm,
    pub conv2: DwSep,
    pub bn2: BatchNorm,
}

impl SepBranch {
    fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        b.scope(name, |b| Self {
            conv1: DwSep::new(b, "conv1", in_c, out_c, k, false),
            bn1: BatchNorm::new(b, "bn1", out_c),
            conv2: DwSep::new(b, "conv2", out_c, out_c, k, false),
            bn2: BatchNorm::new(b, "bn2", out_c),
        })
    }

    fn num_params(&self) -> usize {
        self.conv1.num_params() + self.bn1.num_params() + self.conv2.num_params() + self.bn2.num_params()
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = activate(ctx, h, Act::Silu)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        activate(ctx, h, Act::Silu)
    }
}

#[derive(Clone, Debug)]
pub struct InceptionSepConv {
    pub spec: StageSpec,
    pub branch3x3: SepBranch,
    pub branch5x5: SepBranch,
    pub pool_proj: Conv2d,
    pub pool_bn: BatchNorm,
}

impl InceptionSepConv {
    pub fn new(b: &mut Builder, name: &str, spec: StageSpec) -> Result<Self> {
        spec.validate()?;
        let [w1, w2, w3] = spec.branch_widths;
        let i = spec.in_channels;
        Ok(b.scope(name, |b| Self {
            branch3x3: SepBranch::new(b, "branch3x3", i, w1, 3),
            branch5x5: SepBranch::new(b, "branch5x5", i, w2, 5),
            pool_proj: Conv2d::new(b, "pool_proj", ConvMode::Pointwise, i, w3, 1, 1, false),
            pool_bn: BatchNorm::new(b, "pool_bn", w3),
            spec,
        }))
    }

    pub fn num_params(&self) -> usize {
        self.branch3x3.num_params() + self.branch5x5.num_params() + self.pool_proj.num_params() + self.pool_bn.num_params()
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(shape_err("inception_sepconv", format!("expected {} channels, got {}", self.spec.in_channels, c)));
        }
        let a = self.branch3x3.forward(ctx, x)?;
        let bb = self.branch5x5.forward(ctx, x)?;
        let p = ctx.tape.maxpool2d(x, 3, 1, 1)?;
        let p = self.pool_proj.forward(ctx, p)?;
        let p = self.pool_bn.forward(ctx, p)?;
        let p = activate(ctx, p, Act::Silu)?;
        ctx.tape.concat(&[a, bb, p], 1)
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    pub stages: Vec<InceptionSepConv>,
}

impl Backbone {
    pub fn new(b: &mut Builder, channels: &[usize; 5]) -> Result<Self> {
        b.scope("backbone", |b| {
            let stem = b.scope("stem", |b| Stem {
                conv: Conv2d::new(b, "conv", ConvMode::Standard, 3, STEM_CHANNELS, 3, 2, false),
                bn: BatchNorm::new(b, "bn", STEM_CHANNELS),
            });
            let stages = stage_specs(channels)
                .into_iter()
                .enumerate()
                .map(|(i, s)| InceptionSepConv::new(b, &format!("stage{}", i + 1), s))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { stem, stages })
        })
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params() + self.stages.iter().map(|s| s.num_params()).sum::<usize>()
    }

    /// Returns `c1..c5` at strides 2, 4, 8, 16 and 32.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<[Var; 5]> {
        let (_, c, h, w) = ctx.tape.value(x).dims4("bottom_up")?;
        if c != 3 {
            return Err(shape_err("bottom_up", format!("expected 3 input channels, got {}", c)));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(arg_err("bottom_up", format!("input {}×{} is not a multiple of 32", h, w)));
        }
        let s = self.stem.conv.forward(ctx, x)?;
        let s = self.stem.bn.forward(ctx, s)?;
        let mut cur = activate(ctx, s, Act::Silu)?;
        let mut out = [cur; 5];
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.spec.pool_before {
                cur = ctx.tape.maxpool2d(cur, 2, 2, 0)?;
            }
            cur = stage.forward(ctx, cur)?;
            out[i] = cur;
        }
        Ok(out)
    }
}
