//! Static cost accounting derived from a [`ModelConfig`] alone.
//!
//! Parameter and operation counts are computed from closed-form layer
//! formulas, independently of the parameter store a built [`Model`] holds,
//! so the two can be checked against each other.
//!
//! FLOP convention: one multiply-accumulate counts as `mac_cost` FLOPs
//! (default 1), plus elementwise work at fixed per-element costs:
//! batch norm 4, SiLU 4, ReLU 1, bias or residual add 1, layer norm 8,
//! max pool `k²−1` comparisons per output. B-spline evaluation costs
//! `(G+O)·(O+1)·2` per input scalar.
//!
//! [`Model`]: crate::net::Model

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::backbone::{stage_specs, STEM_CHANNELS};
use crate::error::{arg_err, Result};
use crate::net::{FpnConv, ModelConfig};

pub const BN_COST: u64 = 4;
pub const SILU_COST: u64 = 4;
pub const RELU_COST: u64 = 1;
pub const ADD_COST: u64 = 1;
pub const LN_COST: u64 = 8;
pub const SPLINE_EVAL_FACTOR: u64 = 2;

/// Costs of one module.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Elementwise FLOPs outside multiply-accumulates.
    pub elementwise: u64,
}

impl ModuleCost {
    pub fn flops(&self, mac_cost: u64) -> u64 {
        self.macs * mac_cost + self.elementwise
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub mac_cost: u64,
    pub modules: Vec<ModuleCost>,
    pub params_total: u64,
    pub macs_total: u64,
    pub flops_total: u64,
    pub bytes_per_elem: usize,
    pub activation_bytes_peak: u64,
}

impl CostReport {
    pub fn params_by_module(&self) -> impl Iterator<Item = (&str, u64)> {
        self.modules.iter().map(|m| (m.name.as_str(), m.params))
    }

    pub fn gflops(&self) -> f64 {
        self.flops_total as f64 / 1e9
    }

    /// FLOPs under a different MAC weighting.
    pub fn flops_with_mac_cost(&self, mac_cost: u64) -> u64 {
        self.modules.iter().map(|m| m.flops(mac_cost)).sum()
    }
}

/// Accumulates costs module by module and records activation sizes.
struct Walker {
    batch: u64,
    modules: Vec<ModuleCost>,
    cur: ModuleCost,
}

impl Walker {
    fn begin(&mut self, name: &str) {
        let done = core::mem::replace(&mut self.cur, ModuleCost { name: name.to_string(), ..Default::default() });
        if !done.name.is_empty() {
            self.modules.push(done);
        }
    }

    fn finish(mut self) -> Vec<ModuleCost> {
        self.begin("");
        self.modules
    }

    /// Convolution over an `h×w` output.
    fn conv(&mut self, in_c: u64, out_c: u64, k: u64, groups: u64, hw: u64, bias: bool) {
        self.cur.params += out_c * (in_c / groups) * k * k + if bias { out_c } else { 0 };
        self.cur.macs += self.batch * hw * out_c * (in_c / groups) * k * k;
        if bias {
            self.cur.elementwise += self.batch * hw * out_c * ADD_COST;
        }
    }

    fn dwsep(&mut self, in_c: u64, out_c: u64, k: u64, hw: u64, pw_bias: bool) {
        self.conv(in_c, in_c, k, in_c, hw, false);
        self.conv(in_c, out_c, 1, 1, hw, pw_bias);
    }

    fn bn(&mut self, c: u64, elems: u64) {
        self.cur.params += 2 * c;
        self.cur.elementwise += self.batch * elems * BN_COST;
    }

    fn elementwise(&mut self, elems: u64, cost: u64) {
        self.cur.elementwise += self.batch * elems * cost;
    }

    fn matmul(&mut self, m: u64, k: u64, n: u64) {
        self.cur.macs += self.batch * m * k * n;
    }

    fn kan_linear(&mut self, cfg: &ModelConfig, i: u64, o: u64, tokens: u64) {
        let nb = (cfg.grid_size + cfg.spline_order) as u64;
        let cols = if cfg.share_splines { nb } else { i * nb };
        let r = (cfg.ranks.r as u64).min(i).min(o).max(1);
        let rf = (cfg.ranks.r_f as u64).min(o).min(cols).max(1);
        self.cur.params += r * (i + o) + o + rf * (o + cols) + 2 * o;
        // base path
        self.matmul(tokens, i, r);
        self.matmul(tokens, r, o);
        self.elementwise(tokens * o, ADD_COST + SILU_COST);
        // spline path
        let order = cfg.spline_order as u64;
        self.elementwise(tokens * i, nb * (order + 1) * SPLINE_EVAL_FACTOR);
        if cfg.share_splines {
            self.elementwise(tokens * i * nb, ADD_COST);
        }
        self.matmul(tokens, cols, rf);
        self.matmul(tokens, rf, o);
        // two scales and the sum
        self.elementwise(tokens * o, 3);
    }
}

fn check_res(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(arg_err("count_flops", format!("resolution {}×{} is not a multiple of 32", h, w)));
    }
    Ok(())
}

fn walk(cfg: &ModelConfig, h: usize, w: usize, batch: usize) -> Result<Vec<ModuleCost>> {
    cfg.validate()?;
    check_res(h, w)?;
    let mut wk = Walker { batch: batch as u64, modules: Vec::new(), cur: ModuleCost::default() };
    let area = |l: u32| ((h >> l) * (w >> l)) as u64;

    wk.begin("backbone.stem");
    let s = STEM_CHANNELS as u64;
    wk.conv(3, s, 3, 1, area(1), false);
    wk.bn(s, s * area(1));
    wk.elementwise(s * area(1), SILU_COST);

    for (l, spec) in stage_specs(&cfg.stage_channels).iter().enumerate() {
        wk.begin(&format!("backbone.stage{}", l + 1));
        let hw = area(l as u32 + 1);
        let i = spec.in_channels as u64;
        if spec.pool_before {
            wk.elementwise(i * hw, 3);
        }
        let [w1, w2, w3] = spec.branch_widths.map(|x| x as u64);
        for (k, bw) in [(3, w1), (5, w2)] {
            wk.dwsep(i, bw, k, hw, false);
            wk.bn(bw, bw * hw);
            wk.elementwise(bw * hw, SILU_COST);
            wk.dwsep(bw, bw, k, hw, false);
            wk.bn(bw, bw * hw);
            wk.elementwise(bw * hw, SILU_COST);
        }
        wk.elementwise(i * hw, 8);
        wk.conv(i, w3, 1, 1, hw, false);
        wk.bn(w3, w3 * hw);
        wk.elementwise(w3 * hw, SILU_COST);
    }

    wk.begin("tikan");
    let n5 = area(5);
    let c5 = cfg.stage_channels[4] as u64;
    if let Some(p) = cfg.pre_kan_projection {
        wk.conv(c5, p as u64, 1, 1, n5, true);
    }
    let d = cfg.kan_channels as u64;
    let hid = cfg.kan_hidden() as u64;
    wk.cur.params += 2 * d;
    wk.elementwise(n5 * d, LN_COST);
    for (a, b) in [(d, hid), (hid, d)] {
        wk.kan_linear(cfg, a, b, n5);
        wk.conv(b, b, 3, b, n5, false);
        wk.bn(b, b * n5);
        wk.elementwise(b * n5, RELU_COST);
    }
    wk.elementwise(n5 * d, ADD_COST);
    let fpn = cfg.fpn_width as u64;
    wk.conv(d, fpn, 1, 1, n5, true);

    wk.begin("laterals");
    for l in 2..=4u32 {
        let c = cfg.stage_channels[l as usize - 1] as u64;
        match cfg.fpn_conv {
            FpnConv::DwSep => wk.dwsep(c, fpn, 1, area(l), true),
            FpnConv::Standard => wk.conv(c, fpn, 1, 1, area(l), true),
        }
        wk.elementwise(fpn * area(l), ADD_COST);
    }

    wk.begin("heads");
    let k = cfg.num_classes as u64;
    for l in 2..=5u32 {
        wk.conv(fpn, k, 3, 1, area(l), true);
    }
    // summing four full-resolution maps
    wk.elementwise(3 * k * area(0), ADD_COST);
    if cfg.fusion_weights {
        wk.begin("fusion");
        wk.cur.params += 4;
        wk.elementwise(4 * k * area(0), 1);
    }
    Ok(wk.finish())
}

/// Trainable parameter count from closed-form layer formulas.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(walk(cfg, 32, 32, 1)?.iter().map(|m| m.params).sum())
}

/// Full report at `h×w`, batch `batch`, with `mac_cost` FLOPs per MAC.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize, batch: usize, mac_cost: u64) -> Result<CostReport> {
    let modules = walk(cfg, h, w, batch)?;
    let bytes_per_elem = 4;
    Ok(CostReport {
        height: h,
        width: w,
        batch,
        mac_cost,
        params_total: modules.iter().map(|m| m.params).sum(),
        macs_total: modules.iter().map(|m| m.macs).sum(),
        flops_total: modules.iter().map(|m| m.flops(mac_cost)).sum(),
        modules,
        bytes_per_elem,
        activation_bytes_peak: estimate_activation_memory(cfg, h, w, bytes_per_elem)?,
    })
}

/// Default report: batch 1, one FLOP per MAC.
pub fn report(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    count_flops(cfg, h, w, 1, 1)
}

/// One produced activation in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Activation {
    pub name: String,
    pub elems: u64,
    /// Index of the activation consumed as input, if any.
    pub input: Option<usize>,
    /// Kept alive until the top-down pass.
    pub keep: bool,
}

/// Peak of `kept + input + output` over a forward schedule.
pub fn peak_elems(plan: &[Activation]) -> u64 {
    let mut kept = 0u64;
    let mut peak = 0u64;
    for a in plan {
        let input = a.input.filter(|&i| !plan[i].keep).map_or(0, |i| plan[i].elems);
        peak = peak.max(kept + input + a.elems);
        if a.keep {
            kept += a.elems;
        }
    }
    peak
}

/// Forward schedule of the main activations (batch 1).
pub fn activation_plan(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<Activation>> {
    cfg.validate()?;
    check_res(h, w)?;
    let area = |l: u32| ((h >> l) * (w >> l)) as u64;
    let mut plan: Vec<Activation> = Vec::new();
    let push = |plan: &mut Vec<Activation>, name: String, elems: u64, keep: bool| {
        let input = plan.len().checked_sub(1);
        plan.push(Activation { name, elems, input, keep });
    };
    push(&mut plan, "stem".into(), STEM_CHANNELS as u64 * area(1), false);
    for (l, spec) in stage_specs(&cfg.stage_channels).iter().enumerate() {
        let hw = area(l as u32 + 1);
        if spec.pool_before {
            push(&mut plan, format!("pool{}", l + 1), spec.in_channels as u64 * hw, false);
        }
        let widest = *spec.branch_widths.iter().max().unwrap_or(&0) as u64;
        push(&mut plan, format!("stage{}.branch", l + 1), widest * hw, false);
        push(&mut plan, format!("c{}", l + 1), spec.out_channels as u64 * hw, l >= 1);
    }
    let n5 = area(5);
    let d = cfg.kan_channels as u64;
    let hid = cfg.kan_hidden() as u64;
    push(&mut plan, "tokens".into(), d * n5, false);
    push(&mut plan, "kan.hidden".into(), hid * n5, false);
    push(&mut plan, "kan.out".into(), d * n5, false);
    let fpn = cfg.fpn_width as u64;
    push(&mut plan, "p5".into(), fpn * n5, false);
    for l in (2..=4u32).rev() {
        push(&mut plan, format!("p{}", l), fpn * area(l), false);
    }
    push(&mut plan, "logits".into(), cfg.num_classes as u64 * area(0), false);
    Ok(plan)
}

/// Activation memory estimate in bytes under keep-all-laterals liveness.
pub fn estimate_activation_memory(cfg: &ModelConfig, h: usize, w: usize, bytes_per_elem: usize) -> Result<u64> {
    Ok(peak_elems(&activation_plan(cfg, h, w)?) * bytes_per_elem as u64)
}

/// Plain-text report, one `key=value` record per line.
pub fn render(cfg: &ModelConfig, r: &CostReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "# flop convention: 1 MAC = {} FLOP(s) plus elementwise work\nvariant={} res={}x{} batch={}\n",
        r.mac_cost,
        cfg.variant.as_str(),
        r.height,
        r.width,
        r.batch
    ));
    for m in &r.modules {
        s.push_str(&format!(
            "module={} params={} macs={} flops={}\n",
            m.name,
            m.params,
            m.macs,
            m.flops(r.mac_cost)
        ));
    }
    s.push_str(&format!("params={} params_m={:.4}\n", r.params_total, r.params_total as f64 / 1e6));
    s.push_str(&format!(
        "macs={} flops={} gflops={:.4} gflops_mac2={:.4}\n",
        r.macs_total,
        r.flops_total,
        r.gflops(),
        r.flops_with_mac_cost(2) as f64 / 1e9
    ));
    s.push_str(&format!(
        "activation_bytes_peak={} bytes_per_elem={} activation_mb={:.3}\n",
        r.activation_bytes_peak,
        r.bytes_per_elem,
        r.activation_bytes_peak as f64 / (1024.0 * 1024.0)
    ));
    s
}

/// Parameter count of a `k×k` separable conv versus the dense equivalent.
pub fn dwsep_vs_standard(in_c: u64, out_c: u64, k: u64) -> (u64, u64) {
    (in_c * k * k + in_c * out_c + out_c, in_c * out_c * k * k + out_c)
}

/// Every separable conv of the encoder as `(in_c, out_c, k)`.
pub fn backbone_sep_convs(cfg: &ModelConfig) -> Vec<(u64, u64, u64)> {
    let mut v = vec![];
    for spec in stage_specs(&cfg.stage_channels) {
        let i = spec.in_channels as u64;
        let [w1, w2, _] = spec.branch_widths.map(|x| x as u64);
        v.extend([(i, w1, 3), (w1, w1, 3), (i, w2, 5), (w2, w2, 5)]);
    }
    v
}
