//! Kolmogorov–Arnold layers with low-rank base and spline factors.
//!
//! `KanLinear` computes
//! `s_base ⊙ silu(x·W_vᵀ·W_uᵀ + b) + s_spline ⊙ (g(x)·S_vᵀ·S_uᵀ)`
//! where `g(x)` is the B-spline basis expansion of the input. With shared
//! splines the basis is summed over input channels before the contraction,
//! so `S_v` has `G+O` columns; otherwise it has `C_in·(G+O)`.

use alloc::format;

use crate::error::{Error, Result};
use crate::hash;
use crate::layers::{BatchNorm, Conv2d, ConvMode, LayerNorm};
use crate::lowrank;
use crate::math;
use crate::param::{Builder, Ctx, ParamId, ParamKind};
use crate::spline::SplineGrid;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Rank settings for the factorised paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankConfig {
    pub r: usize,
    pub r_f: usize,
    /// Spectral energy kept by [`lowrank::select_rank`].
    pub energy_threshold: f64,
    /// Magnitude cutoff for pruning.
    pub prune_threshold: f64,
}

impl RankConfig {
    /// Ranks derived from the channel width: `r = max(8, C/4)`, `r_f = max(4, C/16)`.
    pub fn for_channels(c: usize) -> Self {
        Self { r: (c / 4).max(8), r_f: (c / 16).max(4), energy_threshold: 0.95, prune_threshold: 1e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r_f == 0 {
            return Err(Error::Config(format!("ranks must be >= 1 (r={}, r_f={})", self.r, self.r_f)));
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return Err(Error::Config(format!("energy threshold {} outside (0, 1]", self.energy_threshold)));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::Config(format!("prune threshold must be >= 0")));
        }
        Ok(())
    }
}

/// Initialisation of the base factor pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KanInit {
    /// Independent uniform factors.
    Random,
    /// Truncated SVD of a uniformly drawn dense matrix.
    Svd,
}

impl KanInit {
    pub fn as_str(self) -> &'static str {
        match self {
            KanInit::Random => "random",
            KanInit::Svd => "svd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(KanInit::Random),
            "svd" => Some(KanInit::Svd),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KanLinear {
    pub w_u: ParamId,
    pub w_v: ParamId,
    pub bias: ParamId,
    pub s_u: ParamId,
    pub s_v: ParamId,
    pub s_base: ParamId,
    pub s_spline: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub r: usize,
    pub r_f: usize,
    pub grid: SplineGrid,
    pub shared: bool,
}

impl KanLinear {
    /// Ranks are clipped to the dimensions they factorise.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        ranks: RankConfig,
        grid: SplineGrid,
        shared: bool,
        init: KanInit,
    ) -> Result<Self> {
        let nb = grid.basis_count();
        let cols = if shared { nb } else { in_dim * nb };
        let r = ranks.r.min(in_dim).min(out_dim).max(1);
        let r_f = ranks.r_f.min(out_dim).min(cols).max(1);
        let fan = 1.0 / math::sqrt(in_dim as f64);
        b.scope(name, |b| {
            let (w_u, w_v) = if init == KanInit::Svd && !b.is_skeleton() {
                let dense = {
                    let rng = b.rng();
                    use rand::Rng;
                    Tensor::from_fn(&[out_dim, in_dim], |_| rng.gen_range(-fan..fan))
                };
                let (u, v) = lowrank::svd_init(&dense, r)?;
                (b.tensor("w_u", ParamKind::Weight, u), b.tensor("w_v", ParamKind::Weight, v))
            } else {
                let wu = b.uniform("w_u", ParamKind::Weight, &[out_dim, r], 1.0 / math::sqrt(r as f64));
                let wv = b.uniform("w_v", ParamKind::Weight, &[r, in_dim], fan);
                (wu, wv)
            };
            let bias = b.uniform("bias", ParamKind::Bias, &[out_dim], fan);
            let sv_bound = if shared {
                math::sqrt(3.0 * nb as f64) / in_dim as f64
            } else {
                math::sqrt(3.0 / in_dim as f64)
            };
            let s_u = b.uniform("s_u", ParamKind::Weight, &[out_dim, r_f], 1.0 / math::sqrt(r_f as f64));
            let s_v = b.uniform("s_v", ParamKind::Weight, &[r_f, cols], sv_bound);
            let s_base = b.constant("s_base", ParamKind::Scale, &[out_dim], 1.0);
            let s_spline = b.constant("s_spline", ParamKind::Scale, &[out_dim], 1.0);
            Ok(Self { w_u, w_v, bias, s_u, s_v, s_base, s_spline, in_dim, out_dim, r, r_f, grid, shared })
        })
    }

    pub fn basis_cols(&self) -> usize {
        if self.shared {
            self.grid.basis_count()
        } else {
            self.in_dim * self.grid.basis_count()
        }
    }

    pub fn num_params(&self) -> usize {
        self.r * (self.in_dim + self.out_dim) + self.out_dim + self.r_f * (self.out_dim + self.basis_cols()) + 2 * self.out_dim
    }

    /// Base-path parameter count, `r·(C_in + C_out)` plus bias.
    pub fn base_params(&self) -> usize {
        self.r * (self.in_dim + self.out_dim) + self.out_dim
    }

    fn check_input(&self, ctx: &Ctx, x: Var) -> Result<usize> {
        match *ctx.tape.shape(x) {
            [n, c] if c == self.in_dim => Ok(n),
            ref s => Err(crate::error::shape_err("kan_linear", format!("expected N×{}, got {:?}", self.in_dim, s))),
        }
    }

    /// `silu(x·W_vᵀ·W_uᵀ + b)`
    pub fn base_transform(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx, x)?;
        let (wu, wv, b) = (ctx.param(self.w_u), ctx.param(self.w_v), ctx.param(self.bias));
        let h = ctx.tape.matmul_nt(x, wv)?;
        let z = ctx.tape.matmul_nt(h, wu)?;
        let z = ctx.tape.channel_add(z, b, 1)?;
        ctx.tape.silu(z)
    }

    fn active_grid(&self, ctx: &Ctx) -> SplineGrid {
        if ctx.training() && self.grid.noise_scale() > 0.0 {
            self.grid.jittered(hash::hash(&[ctx.noise_seed(), self.w_u.index() as u64]))
        } else {
            self.grid.clone()
        }
    }

    /// `g(x)·S_vᵀ·S_uᵀ`
    pub fn spline_transform(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = self.check_input(ctx, x)?;
        let grid = self.active_grid(ctx);
        let basis = if self.shared {
            ctx.tape.bspline_basis_sum(x, &grid)?
        } else {
            let b = ctx.tape.bspline_basis(x, &grid)?;
            ctx.tape.reshape(b, &[n, self.basis_cols()])?
        };
        let (su, sv) = (ctx.param(self.s_u), ctx.param(self.s_v));
        let t = ctx.tape.matmul_nt(basis, sv)?;
        ctx.tape.matmul_nt(t, su)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let base = self.base_transform(ctx, x)?;
        let spline = self.spline_transform(ctx, x)?;
        let (sb, ss) = (ctx.param(self.s_base), ctx.param(self.s_spline));
        let a = ctx.tape.channel_mul(base, sb, 1)?;
        let c = ctx.tape.channel_mul(spline, ss, 1)?;
        ctx.tape.add(a, c)
    }

    /// `‖Δ²S_v‖²` along the grid axis.
    pub fn smoothness(&self, ctx: &mut Ctx) -> Result<Var> {
        let sv = ctx.param(self.s_v);
        ctx.tape.second_diff_sq(sv, self.grid.basis_count())
    }

    /// Prunable weight tensors of this layer.
    pub fn weights(&self) -> [ParamId; 4] {
        [self.w_u, self.w_v, self.s_u, self.s_v]
    }
}

/// Two KAN linears, each followed by depthwise 3×3 conv, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub fc1: KanLinear,
    pub dw1: Conv2d,
    pub bn1: BatchNorm,
    pub fc2: KanLinear,
    pub dw2: Conv2d,
    pub bn2: BatchNorm,
    pub dim: usize,
    pub hidden: usize,
}

impl KanLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        hidden: usize,
        ranks: RankConfig,
        grid: &SplineGrid,
        shared: bool,
        init: KanInit,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                fc1: KanLinear::new(b, "fc1", dim, hidden, ranks, grid.clone(), shared, init)?,
                dw1: Conv2d::new(b, "dw1", ConvMode::Depthwise, hidden, hidden, 3, 1, false),
                bn1: BatchNorm::new(b, "bn1", hidden),
                fc2: KanLinear::new(b, "fc2", hidden, dim, ranks, grid.clone(), shared, init)?,
                dw2: Conv2d::new(b, "dw2", ConvMode::Depthwise, dim, dim, 3, 1, false),
                bn2: BatchNorm::new(b, "bn2", dim),
                dim,
                hidden,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params()
            + self.dw1.num_params()
            + self.bn1.num_params()
            + self.fc2.num_params()
            + self.dw2.num_params()
            + self.bn2.num_params()
    }

    /// `tokens` is `B×N×D` with `N = h·w`.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var, hw: (usize, usize)) -> Result<Var> {
        let (bsz, n) = token_dims(ctx, tokens, self.dim, hw)?;
        let x = ctx.tape.reshape(tokens, &[bsz * n, self.dim])?;
        let x = self.fc1.forward(ctx, x)?;
        let x = spatial_mix(ctx, x, bsz, hw, self.hidden, &self.dw1, &self.bn1)?;
        let x = self.fc2.forward(ctx, x)?;
        let x = spatial_mix(ctx, x, bsz, hw, self.dim, &self.dw2, &self.bn2)?;
        ctx.tape.reshape(x, &[bsz, n, self.dim])
    }
}

fn token_dims(ctx: &Ctx, tokens: Var, dim: usize, hw: (usize, usize)) -> Result<(usize, usize)> {
    match *ctx.tape.shape(tokens) {
        [b, n, d] if d == dim && n == hw.0 * hw.1 => Ok((b, n)),
        ref s => Err(crate::error::shape_err(
            "kan_layer",
            format!("tokens {:?} do not match D={} on a {}×{} map", s, dim, hw.0, hw.1),
        )),
    }
}

/// `(B·N)×C` rows → NCHW → dw conv → BN → ReLU → rows again.
fn spatial_mix(ctx: &mut Ctx, x: Var, bsz: usize, hw: (usize, usize), c: usize, dw: &Conv2d, bn: &BatchNorm) -> Result<Var> {
    let n = hw.0 * hw.1;
    let t = ctx.tape.reshape(x, &[bsz, n, c])?;
    let t = ctx.tape.transpose12(t)?;
    let t = ctx.tape.reshape(t, &[bsz, c, hw.0, hw.1])?;
    let t = dw.forward(ctx, t)?;
    let t = bn.forward(ctx, t)?;
    let t = ctx.tape.relu(t)?;
    let t = ctx.tape.reshape(t, &[bsz, c, n])?;
    let t = ctx.tape.transpose12(t)?;
    ctx.tape.reshape(t, &[bsz * n, c])
}

/// `tokens + KanLayer(LayerNorm(tokens))`
#[derive(Clone, Debug)]
pub struct KanBlock {
    pub norm: LayerNorm,
    pub layer: KanLayer,
}

impl KanBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        hidden: usize,
        ranks: RankConfig,
        grid: &SplineGrid,
        shared: bool,
        init: KanInit,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                norm: LayerNorm::new(b, "norm", dim),
                layer: KanLayer::new(b, "layer", dim, hidden, ranks, grid, shared, init)?,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params() + self.layer.num_params()
    }

    pub fn forward(&self, ctx: &mut Ctx, tokens: Var, hw: (usize, usize)) -> Result<Var> {
        let normed = self.norm.forward(ctx, tokens)?;
        let y = self.layer.forward(ctx, normed, hw)?;
        ctx.tape.add(tokens, y)
    }

    pub fn linears(&self) -> [&KanLinear; 2] {
        [&self.layer.fc1, &self.layer.fc2]
    }
}
