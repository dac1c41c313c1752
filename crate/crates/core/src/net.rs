//! Full segmentation network: encoder, KAN enhancement of the deepest map,
//! top-down fusion, per-level heads and summed multi-scale logits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::Backbone;
use crate::error::{shape_err, Error, Result};
use crate::kan::{KanBlock, KanInit, KanLinear, RankConfig};
use crate::layers::{Conv2d, ConvMode, DwSep};
use crate::param::{Builder, Ctx, ParamId, ParamKind, ParamStore};
use crate::spline::SplineGrid;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Karma,
    High,
    Flash,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Flash, Variant::Karma, Variant::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Karma => "karma",
            Variant::High => "high",
            Variant::Flash => "flash",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "karma" => Some(Variant::Karma),
            "high" => Some(Variant::High),
            "flash" => Some(Variant::Flash),
            _ => None,
        }
    }
}

/// Lateral connection type in the top-down pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpnConv {
    DwSep,
    Standard,
}

impl FpnConv {
    pub fn as_str(self) -> &'static str {
        match self {
            FpnConv::DwSep => "dwsep",
            FpnConv::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dwsep" => Some(FpnConv::DwSep),
            "standard" => Some(FpnConv::Standard),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_channels: [usize; 5],
    pub fpn_width: usize,
    /// Token width inside the KAN block.
    pub kan_channels: usize,
    /// 1×1 projection applied to `c5` before tokenisation.
    pub pre_kan_projection: Option<usize>,
    pub ranks: RankConfig,
    pub grid_size: usize,
    pub spline_order: usize,
    pub grid_range: (f64, f64),
    pub noise_scale: f64,
    pub num_classes: usize,
    pub fpn_conv: FpnConv,
    pub kan_hidden_ratio: f64,
    pub share_splines: bool,
    /// Learnable per-level weights on the fused logits.
    pub fusion_weights: bool,
    pub kan_init: KanInit,
    pub seed: u64,
}

impl ModelConfig {
    pub fn karma(num_classes: usize) -> Self {
        Self {
            variant: Variant::Karma,
            stage_channels: [48, 96, 192, 384, 576],
            fpn_width: 64,
            kan_channels: 576,
            pre_kan_projection: None,
            ranks: RankConfig::for_channels(576),
            grid_size: 5,
            spline_order: 3,
            grid_range: (-1.0, 1.0),
            noise_scale: 0.0,
            num_classes,
            fpn_conv: FpnConv::DwSep,
            kan_hidden_ratio: 1.0,
            share_splines: true,
            fusion_weights: false,
            kan_init: KanInit::Svd,
            seed: 0,
        }
    }

    pub fn flash(num_classes: usize) -> Self {
        Self {
            variant: Variant::Flash,
            stage_channels: [48, 96, 192, 288, 384],
            fpn_width: 32,
            kan_channels: 256,
            pre_kan_projection: Some(256),
            ranks: RankConfig::for_channels(256),
            kan_hidden_ratio: 0.5,
            ..Self::karma(num_classes)
        }
    }

    pub fn high(num_classes: usize) -> Self {
        Self {
            variant: Variant::High,
            stage_channels: [64, 128, 256, 512, 1024],
            fpn_width: 128,
            kan_channels: 1024,
            pre_kan_projection: None,
            ranks: RankConfig { r: 256, r_f: 128, ..RankConfig::for_channels(1024) },
            fpn_conv: FpnConv::Standard,
            kan_hidden_ratio: 4.0,
            share_splines: false,
            ..Self::karma(num_classes)
        }
    }

    pub fn for_variant(v: Variant, num_classes: usize) -> Self {
        match v {
            Variant::Karma => Self::karma(num_classes),
            Variant::High => Self::high(num_classes),
            Variant::Flash => Self::flash(num_classes),
        }
    }

    pub fn kan_hidden(&self) -> usize {
        ((self.kan_channels as f64 * self.kan_hidden_ratio) as usize).max(1)
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        Ok(SplineGrid::new(self.grid_size, self.spline_order, self.grid_range.0, self.grid_range.1)?
            .with_noise_scale(self.noise_scale))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.contains(&0) || self.fpn_width == 0 || self.kan_channels == 0 {
            return bad(format!("channel widths must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c < 3) {
            return bad(format!("stage channels must be >= 3 to fill three branches"));
        }
        let expect = self.pre_kan_projection.unwrap_or(self.stage_channels[4]);
        if self.kan_channels != expect {
            return bad(format!(
                "kan_channels {} must equal {} (c5 width or pre-KAN projection)",
                self.kan_channels, expect
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.kan_hidden_ratio > 0.0) {
            return bad(format!("kan_hidden_ratio must be positive"));
        }
        if !(self.noise_scale >= 0.0) {
            return bad(format!("noise_scale must be >= 0"));
        }
        self.ranks.validate()?;
        self.grid()?;
        Ok(())
    }
}

/// Lateral 1×1 map from a backbone stage to the pyramid width.
#[derive(Clone, Debug)]
pub enum Lateral {
    DwSep(DwSep),
    Standard(Conv2d),
}

impl Lateral {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Lateral::DwSep(d) => d.forward(ctx, x),
            Lateral::Standard(c) => c.forward(ctx, x),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Lateral::DwSep(d) => d.num_params(),
            Lateral::Standard(c) => c.num_params(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tikan {
    pub pre_kan: Option<Conv2d>,
    pub block: KanBlock,
    pub proj: Conv2d,
}

impl Tikan {
    pub fn num_params(&self) -> usize {
        self.pre_kan.as_ref().map_or(0, |c| c.num_params()) + self.block.num_params() + self.proj.num_params()
    }
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `c1..c5`
    pub c: [Var; 5],
    /// `p2..p5`
    pub p: [Var; 4],
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub tikan: Tikan,
    /// Laterals for `c2, c3, c4`.
    pub laterals: Vec<Lateral>,
    /// Heads for `p2..p5`.
    pub heads: Vec<Conv2d>,
    pub fusion: Option<[ParamId; 4]>,
}

impl Model {
    /// Randomly initialised network, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let parts = build(&mut Builder::new(&mut store, seed), &config)?;
        Ok(Self::assemble(config, store, parts))
    }

    /// Same structure with all-zero tensors; fast for counting and shape work.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let parts = build(&mut Builder::skeleton(&mut store), &config)?;
        Ok(Self::assemble(config, store, parts))
    }

    fn assemble(config: ModelConfig, store: ParamStore, p: Parts) -> Self {
        Self { config, store, backbone: p.0, tikan: p.1, laterals: p.2, heads: p.3, fusion: p.4 }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn kan_linears(&self) -> [&KanLinear; 2] {
        self.tikan.block.linears()
    }

    /// `B×D×h×w → B×(h·w)×D`
    pub fn patch_embed(ctx: &mut Ctx, x: Var) -> Result<(Var, (usize, usize))> {
        let (b, d, h, w) = ctx.tape.value(x).dims4("patch_embed")?;
        let t = ctx.tape.reshape(x, &[b, d, h * w])?;
        Ok((ctx.tape.transpose12(t)?, (h, w)))
    }

    /// Inverse of [`Model::patch_embed`].
    pub fn unpatchify(ctx: &mut Ctx, tokens: Var, hw: (usize, usize)) -> Result<Var> {
        let (b, n, d) = match *ctx.tape.shape(tokens) {
            [b, n, d] if n == hw.0 * hw.1 => (b, n, d),
            ref s => return Err(shape_err("unpatchify", format!("{:?} does not hold a {}×{} map", s, hw.0, hw.1))),
        };
        let t = ctx.tape.transpose12(tokens)?;
        let _ = n;
        ctx.tape.reshape(t, &[b, d, hw.0, hw.1])
    }

    /// `p5` from `c5`: optional projection, tokens, KAN block, back to a map, 1×1 to the pyramid width.
    pub fn tikan_enhance(&self, ctx: &mut Ctx, c5: Var) -> Result<Var> {
        let x = match &self.tikan.pre_kan {
            Some(c) => c.forward(ctx, c5)?,
            None => c5,
        };
        let (tokens, hw) = Self::patch_embed(ctx, x)?;
        let y = self.tikan.block.forward(ctx, tokens, hw)?;
        let m = Self::unpatchify(ctx, y, hw)?;
        self.tikan.proj.forward(ctx, m)
    }

    /// `p_i = D(c_i) + U₂(p_{i+1})` for `i = 4, 3, 2`.
    pub fn top_down(&self, ctx: &mut Ctx, c: &[Var; 5], p5: Var) -> Result<[Var; 4]> {
        let mut p = [p5; 4];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(ctx, c[i + 1])?;
            let up = ctx.tape.upsample2d(p[i + 1], 2)?;
            if ctx.tape.shape(lat) != ctx.tape.shape(up) {
                return Err(shape_err(
                    "top_down",
                    format!("lateral {:?} vs upsampled {:?}", ctx.tape.shape(lat), ctx.tape.shape(up)),
                ));
            }
            p[i] = ctx.tape.add(lat, up)?;
        }
        Ok(p)
    }

    /// Per-level heads, each upsampled by `2^l` to input resolution and summed.
    pub fn predict_and_fuse(&self, ctx: &mut Ctx, p: &[Var; 4]) -> Result<Var> {
        let mut fused: Option<Var> = None;
        for (i, (&pl, head)) in p.iter().zip(&self.heads).enumerate() {
            let o = head.forward(ctx, pl)?;
            let mut o = ctx.tape.upsample2d(o, 1 << (i + 2))?;
            if let Some(ws) = &self.fusion {
                let shape = ctx.tape.shape(o).to_vec();
                let n = shape.iter().product();
                let a = ctx.param(ws[i]);
                let flat = ctx.tape.reshape(o, &[1, n])?;
                let scaled = ctx.tape.channel_mul(flat, a, 0)?;
                o = ctx.tape.reshape(scaled, &shape)?;
            }
            fused = Some(match fused {
                Some(f) => ctx.tape.add(f, o)?,
                None => o,
            });
        }
        Ok(fused.expect("four heads"))
    }

    pub fn features(&self, ctx: &mut Ctx, x: Var) -> Result<Features> {
        let c = self.backbone.forward(ctx, x)?;
        let p5 = self.tikan_enhance(ctx, c[4])?;
        let p = self.top_down(ctx, &c, p5)?;
        Ok(Features { c, p })
    }

    /// Logits `B×K×H×W` for images `B×3×H×W`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let f = self.features(ctx, x)?;
        self.predict_and_fuse(ctx, &f.p)
    }

    /// Trainable parameter count grouped by top-level module.
    pub fn params_by_module(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            if !p.kind.trainable() {
                continue;
            }
            let key = module_key(&p.name);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some(e) => e.1 += p.value.numel(),
                None => out.push((key, p.value.numel())),
            }
        }
        out
    }
}

/// `backbone.stage3.x` → `backbone.stage3`, `heads.2.weight` → `heads`.
fn module_key(name: &str) -> String {
    let mut it = name.split('.');
    let first = it.next().unwrap_or("");
    if first == "backbone" {
        if let Some(second) = it.next() {
            return format!("{}.{}", first, second);
        }
    }
    String::from(first)
}

type Parts = (Backbone, Tikan, Vec<Lateral>, Vec<Conv2d>, Option<[ParamId; 4]>);

fn build(b: &mut Builder, cfg: &ModelConfig) -> Result<Parts> {
    let backbone = Backbone::new(b, &cfg.stage_channels)?;
    let grid = cfg.grid()?;
    let c5 = cfg.stage_channels[4];
    let d = cfg.kan_channels;
    let tikan = b.scope("tikan", |b| -> Result<Tikan> {
        let pre_kan = cfg
            .pre_kan_projection
            .map(|p| Conv2d::new(b, "pre_kan", ConvMode::Pointwise, c5, p, 1, 1, true));
        let block = KanBlock::new(b, "block", d, cfg.kan_hidden(), cfg.ranks, &grid, cfg.share_splines, cfg.kan_init)?;
        let proj = Conv2d::new(b, "proj", ConvMode::Pointwise, d, cfg.fpn_width, 1, 1, true);
        Ok(Tikan { pre_kan, block, proj })
    })?;
    let laterals = b.scope("laterals", |b| {
        (0..3)
            .map(|i| {
                let c = cfg.stage_channels[i + 1];
                let name = format!("{}", i + 2);
                match cfg.fpn_conv {
                    FpnConv::DwSep => Lateral::DwSep(DwSep::new(b, &name, c, cfg.fpn_width, 1, true)),
                    FpnConv::Standard => {
                        Lateral::Standard(Conv2d::new(b, &name, ConvMode::Pointwise, c, cfg.fpn_width, 1, 1, true))
                    }
                }
            })
            .collect()
    });
    let heads = b.scope("heads", |b| {
        (0..4)
            .map(|i| {
                Conv2d::new(b, &format!("{}", i + 2), ConvMode::Standard, cfg.fpn_width, cfg.num_classes, 3, 1, true)
            })
            .collect()
    });
    let fusion = cfg.fusion_weights.then(|| {
        b.scope("fusion", |b| {
            [0, 1, 2, 3].map(|i| b.constant(&format!("alpha{}", i + 2), ParamKind::Scale, &[1], 1.0))
        })
    });
    Ok((backbone, tikan, laterals, heads, fusion))
}
