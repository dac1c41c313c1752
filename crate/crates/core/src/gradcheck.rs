//! Central finite-difference checks of every differentiable tape operation,
//! the KAN layers, the loss terms and sampled parameters of a full model.
//!
//! Scalar functions are checked directly. Tensor outputs are reduced as
//! `Σ out·R` with a fixed random `R`. The error of one coordinate is
//! `|a − n| / max(|a|, |n|, 1e-4)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hash::{self, SplitMix};
use crate::kan::{KanInit, KanLayer, KanLinear, RankConfig};
use crate::loss::{class_weights, dice_loss, focal_loss, total_loss, weighted_ce, LossConfig};
use crate::net::{Model, ModelConfig};
use crate::param::{Builder, Ctx, ParamId, ParamStore};
use crate::spline::SplineGrid;
use crate::synth::{generate_sample, SynthSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step for operations and layers.
pub const STEP: f64 = 1e-5;
/// Step for whole networks. Early weights move thousands of max-pool
/// inputs at once, so a larger step crosses window ties.
pub const MODEL_STEP: f64 = 1e-6;
/// Tolerance for single operations and layers.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for sampled parameters of a whole network.
pub const MODEL_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-4;
/// Relative gap between one-sided slopes above which a step counts as
/// crossing a kink and is retried ten times smaller.
pub const KINK_RATIO: f64 = 1e-3;
pub const KINK_RETRIES: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

impl core::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "event=gradcheck name={} checked={} max_rel={:e} tol={:e} pass={}",
            self.name,
            self.checked,
            self.max_rel,
            self.tol,
            self.passed()
        )
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn seed_of(name: &str) -> u64 {
    let words: Vec<u64> = name.bytes().map(u64::from).collect();
    hash::hash(&words)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = SplitMix::new(seed);
    Tensor::from_fn(shape, |_| r.range(lo, hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = SplitMix::new(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.range(0.1, 1.0);
        if r.below(2) == 0 {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced by at least 0.01, so max-pool never ties.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = SplitMix::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.below(i as u64 + 1) as usize);
    }
    Tensor::from_fn(shape, |i| perm[i] as f64 * 0.02 - n as f64 * 0.01)
}

/// Scalar reduction `Σ out·R` (identity for scalar outputs).
fn reduce(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.shape(out).is_empty() {
        return Ok(out);
    }
    let r = uniform(tape.shape(out), -1.0, 1.0, seed);
    let rv = tape.constant(r);
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

/// Checks every coordinate of every input of `f`.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let seed = seed_of(name);
    let eval = |xs: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let l = reduce(&mut tape, out, seed)?;
        Ok((tape, vars, l))
    };
    let (tape, vars, loss) = eval(inputs, true)?;
    let grads = tape.backward(loss)?;
    let mut xs = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let (t, _, lp) = eval(&xs, false)?;
            let fp = t.value(lp).item();
            xs[i].data_mut()[j] = x0 - STEP;
            let (t, _, lm) = eval(&xs, false)?;
            let fm = t.value(lm).item();
            xs[i].data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * STEP);
            max_rel = max_rel.max(rel_err(g.data()[j], num));
            checked += 1;
        }
    }
    Ok(CheckResult { name: String::from(name), max_rel, checked, tol: OP_TOL })
}

/// Checks the listed `(parameter, element)` coordinates of a store-driven loss.
pub fn check_params<F>(
    name: &str,
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    tol: f64,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let analytic = {
        let mut ctx = Ctx::train(store);
        let l = f(&mut ctx)?;
        ctx.param_grads(l)?
    };
    let value = |store: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(store, true, false);
        let l = f(&mut ctx)?;
        Ok(ctx.tape.value(l).item())
    };
    let mut max_rel = 0.0f64;
    for &(id, j) in coords {
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
        let x0 = store.get(id).data()[j];
        let f0 = value(store)?;
        let mut h = step;
        let mut rel;
        let mut tries = 0;
        loop {
            store.get_mut(id).data_mut()[j] = x0 + h;
            let fp = value(store)?;
            store.get_mut(id).data_mut()[j] = x0 - h;
            let fm = value(store)?;
            store.get_mut(id).data_mut()[j] = x0;
            rel = rel_err(a, (fp - fm) / (2.0 * h));
            // One-sided slopes that disagree mean the step straddles a ReLU
            // or max-pool kink; the central difference there is meaningless.
            let (sp, sm) = ((fp - f0) / h, (f0 - fm) / h);
            if rel_err(sp, sm) <= KINK_RATIO || tries == KINK_RETRIES {
                break;
            }
            h /= 10.0;
            tries += 1;
        }
        max_rel = max_rel.max(rel);
    }
    Ok(CheckResult { name: String::from(name), max_rel, checked: coords.len(), tol })
}

/// Every element of every trainable parameter.
fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |j| (id, j)))
        .collect()
}

/// Elementwise, reduction, linear-algebra, spatial, shape and normalisation ops.
pub fn op_suite() -> Result<Vec<CheckResult>> {
    let u = |s: &[usize], k: u64| uniform(s, -1.0, 1.0, k);
    let mut out = Vec::new();
    let a = u(&[2, 3], 1);
    let b = u(&[2, 3], 2);
    out.push(check_fn("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?);
    out.push(check_fn("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?);
    out.push(check_fn("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?);
    out.push(check_fn("div", &[a.clone(), uniform(&[2, 3], 0.5, 2.0, 3)], |t, v| t.div(v[0], v[1]))?);
    out.push(check_fn("scale", &[a.clone()], |t, v| t.scale(v[0], -1.7))?);
    out.push(check_fn("add_scalar", &[a.clone()], |t, v| t.add_scalar(v[0], 0.3))?);
    out.push(check_fn("pow", &[uniform(&[2, 3], 0.5, 1.5, 4)], |t, v| t.pow(v[0], 2.5))?);
    out.push(check_fn("abs", &[away_from_zero(&[2, 3], 5)], |t, v| t.abs(v[0]))?);
    out.push(check_fn("silu", &[u(&[2, 3], 6)], |t, v| t.silu(v[0]))?);
    out.push(check_fn("relu", &[away_from_zero(&[2, 3], 7)], |t, v| t.relu(v[0]))?);
    out.push(check_fn("sum", &[a.clone()], |t, v| t.sum(v[0]))?);
    out.push(check_fn("mean", &[a.clone()], |t, v| t.mean(v[0]))?);

    let x4 = u(&[2, 3, 2, 2], 8);
    out.push(check_fn("channel_add", &[x4.clone(), u(&[3], 9)], |t, v| t.channel_add(v[0], v[1], 1))?);
    out.push(check_fn("channel_mul", &[x4.clone(), u(&[3], 10)], |t, v| t.channel_mul(v[0], v[1], 1))?);
    out.push(check_fn("matmul", &[u(&[3, 4], 11), u(&[4, 2], 12)], |t, v| t.matmul(v[0], v[1]))?);
    out.push(check_fn("matmul_nt", &[u(&[3, 4], 13), u(&[2, 4], 14)], |t, v| t.matmul_nt(v[0], v[1]))?);

    let img = u(&[2, 2, 5, 5], 15);
    out.push(check_fn("conv2d_standard", &[img.clone(), u(&[3, 2, 3, 3], 16)], |t, v| t.conv2d(v[0], v[1], 1, 1, 1))?);
    out.push(check_fn("conv2d_strided", &[img.clone(), u(&[3, 2, 3, 3], 17)], |t, v| t.conv2d(v[0], v[1], 2, 1, 1))?);
    out.push(check_fn("conv2d_depthwise", &[img.clone(), u(&[2, 1, 5, 5], 18)], |t, v| t.conv2d(v[0], v[1], 1, 2, 2))?);
    out.push(check_fn("conv2d_pointwise", &[img.clone(), u(&[4, 2, 1, 1], 19)], |t, v| t.conv2d(v[0], v[1], 1, 0, 1))?);
    out.push(check_fn("maxpool2d_3s1", &[distinct(&[1, 2, 4, 4], 20)], |t, v| t.maxpool2d(v[0], 3, 1, 1))?);
    out.push(check_fn("maxpool2d_2s2", &[distinct(&[1, 2, 4, 4], 21)], |t, v| t.maxpool2d(v[0], 2, 2, 0))?);
    out.push(check_fn("upsample2d_2", &[u(&[1, 2, 2, 3], 22)], |t, v| t.upsample2d(v[0], 2))?);
    out.push(check_fn("upsample2d_4", &[u(&[1, 1, 2, 2], 23)], |t, v| t.upsample2d(v[0], 4))?);

    out.push(check_fn("concat_axis1", &[u(&[2, 2, 2, 2], 24), u(&[2, 1, 2, 2], 25)], |t, v| t.concat(&[v[0], v[1]], 1))?);
    out.push(check_fn("concat_axis0", &[u(&[1, 3], 26), u(&[2, 3], 27)], |t, v| t.concat(&[v[0], v[1]], 0))?);
    out.push(check_fn("reshape", &[u(&[2, 6], 28)], |t, v| t.reshape(v[0], &[3, 4]))?);
    out.push(check_fn("transpose12", &[u(&[2, 3, 4], 29)], |t, v| t.transpose12(v[0]))?);

    out.push(check_fn("layer_norm", &[u(&[2, 3, 4], 30), uniform(&[4], 0.5, 1.5, 31), u(&[4], 32)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], crate::layers::LN_EPS)
    })?);
    out.push(check_fn("batch_norm_train", &[u(&[3, 2, 2, 2], 33), uniform(&[2], 0.5, 1.5, 34), u(&[2], 35)], |t, v| {
        Ok(t.batch_norm_train(v[0], v[1], v[2], crate::layers::BN_EPS)?.0)
    })?);
    out.push(check_fn("batch_norm_eval", &[u(&[3, 2, 2, 2], 36), uniform(&[2], 0.5, 1.5, 37), u(&[2], 38)], |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], crate::layers::BN_EPS)
    })?);
    out.push(check_fn("softmax", &[u(&[2, 3, 2], 39)], |t, v| t.softmax(v[0], 1))?);
    out.push(check_fn("log_softmax", &[u(&[2, 3, 2], 40)], |t, v| t.log_softmax(v[0], 1))?);
    out.push(check_fn("second_diff_sq", &[u(&[2, 8], 41)], |t, v| t.second_diff_sq(v[0], 4))?);
    Ok(out)
}

/// Basis evaluation and its channel-summed form over several grids and orders.
pub fn spline_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for g in [3usize, 5, 7] {
        for o in 1..=3usize {
            let grid = SplineGrid::new(g, o, -1.0, 1.0)?;
            let x = uniform(&[3, 2], -1.2, 1.2, (g * 10 + o) as u64);
            let name = format!("bspline_basis_g{}_o{}", g, o);
            out.push(check_fn(&name, &[x.clone()], |t, v| t.bspline_basis(v[0], &grid))?);
            let name = format!("bspline_basis_sum_g{}_o{}", g, o);
            out.push(check_fn(&name, &[x], |t, v| t.bspline_basis_sum(v[0], &grid))?);
        }
    }
    Ok(out)
}

/// KAN linear (shared and per-input splines) and the full KAN layer, with
/// respect to inputs and every parameter.
pub fn kan_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let grid = SplineGrid::new(5, 3, -1.0, 1.0)?;
    let ranks = RankConfig { r: 2, r_f: 2, ..RankConfig::for_channels(8) };
    for (shared, init) in [(true, KanInit::Svd), (false, KanInit::Random)] {
        let mut store = ParamStore::new();
        let lin = KanLinear::new(&mut Builder::new(&mut store, 7), "kan", 4, 3, ranks, grid.clone(), shared, init)?;
        let x = uniform(&[5, 4], -0.9, 0.9, 50);
        let tag = if shared { "shared" } else { "unshared" };
        let rs = seed_of(tag);
        out.push(check_fn(&format!("kan_linear_{}_input", tag), &[x.clone()], |t, v| {
            let mut ctx = Ctx::eval(&store);
            ctx.tape = core::mem::take(t);
            let y = lin.forward(&mut ctx, v[0]);
            *t = core::mem::take(&mut ctx.tape);
            y
        })?);
        let coords = all_coords(&store);
        let f = |ctx: &mut Ctx| {
            let xv = ctx.tape.constant(x.clone());
            let y = lin.forward(ctx, xv)?;
            reduce(&mut ctx.tape, y, rs)
        };
        out.push(check_params(&format!("kan_linear_{}_params", tag), &mut store, &coords, STEP, OP_TOL, f)?);
    }
    let mut store = ParamStore::new();
    let layer = KanLayer::new(&mut Builder::new(&mut store, 9), "layer", 4, 6, ranks, &grid, true, KanInit::Svd)?;
    let tokens = uniform(&[2, 9, 4], -0.9, 0.9, 51);
    let coords = all_coords(&store);
    let f = |ctx: &mut Ctx| {
        let xv = ctx.tape.constant(tokens.clone());
        let y = layer.forward(ctx, xv, (3, 3))?;
        reduce(&mut ctx.tape, y, 52)
    };
    out.push(check_params("kan_layer_params", &mut store, &coords, STEP, OP_TOL, f)?);
    Ok(out)
}

/// Cross-entropy, focal and Dice terms with respect to the logits.
pub fn loss_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for k in [2usize, 3] {
        let logits = uniform(&[2, k, 3, 3], -2.0, 2.0, 60 + k as u64);
        let mut r = SplitMix::new(70 + k as u64);
        let y: Vec<u8> = (0..18).map(|_| r.below(k as u64) as u8).collect();
        let w: Vec<f64> = (0..k).map(|c| 0.5 + c as f64 * 0.3).collect();
        out.push(check_fn(&format!("weighted_ce_k{}", k), &[logits.clone()], |t, v| weighted_ce(t, v[0], &y, &w))?);
        out.push(check_fn(&format!("focal_k{}", k), &[logits.clone()], |t, v| focal_loss(t, v[0], &y, &w, 2.0))?);
        out.push(check_fn(&format!("dice_k{}", k), &[logits.clone()], |t, v| dice_loss(t, v[0], &y, 1e-6))?);
    }
    Ok(out)
}

/// `samples` coordinates of a full model under the complete training loss
/// with batch statistics, on a seeded synthetic batch of two images.
pub fn model_suite(cfg: &ModelConfig, size: usize, samples: usize) -> Result<CheckResult> {
    let mut model = Model::new(cfg.clone())?;
    let k = cfg.num_classes;
    let spec = SynthSpec::imbalanced(size, size, k, 0.4, cfg.seed);
    let s: Vec<_> = (0..2).map(|i| generate_sample(&spec, i)).collect::<Result<_>>()?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for smp in &s {
        x.extend_from_slice(smp.image.data());
        y.extend_from_slice(&smp.mask);
    }
    let x = Tensor::new(&[2, 3, size, size], x)?;
    let weights = class_weights(s.iter().map(|v| v.mask.as_slice()), k)?;
    let trainable: Vec<ParamId> =
        model.store.iter().filter(|(_, p)| p.kind.trainable()).map(|(id, _)| id).collect();
    if trainable.is_empty() || samples == 0 {
        return Err(Error::Config(String::from("nothing to check")));
    }
    // Evenly spaced tensors across the network plus the KAN factors.
    let kan: Vec<ParamId> = {
        let [a, b] = model.kan_linears();
        vec![a.w_u, a.s_v, b.w_v, b.s_u]
    };
    let spread = samples.saturating_sub(kan.len()).max(1);
    let mut ids: Vec<ParamId> =
        (0..spread).map(|i| trainable[i * (trainable.len() - 1) / (spread - 1).max(1)]).collect();
    ids.extend(kan.into_iter().take(samples.saturating_sub(spread)));
    let mut r = SplitMix::from_words(&[cfg.seed, 0x6C]);
    let coords: Vec<(ParamId, usize)> =
        ids.into_iter().map(|id| (id, r.below(model.store.get(id).numel() as u64) as usize)).collect();
    let loss_cfg = LossConfig::default();
    let mut store = core::mem::take(&mut model.store);
    let f = |ctx: &mut Ctx| {
        let xv = ctx.tape.constant(x.clone());
        let logits = model.forward(ctx, xv)?;
        Ok(total_loss(ctx, logits, &y, &model, &weights.w, &loss_cfg)?.total)
    };
    let name = format!("model_{}_{}", cfg.variant.as_str(), size);
    check_params(&name, &mut store, &coords, MODEL_STEP, MODEL_TOL, f)
}

/// Runs a named suite: `ops`, `spline`, `kan`, `loss`, `model` or `all`.
pub fn run(module: &str) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let all = module == "all";
    let mut hit = false;
    if all || module == "ops" {
        out.extend(op_suite()?);
        hit = true;
    }
    if all || module == "spline" {
        out.extend(spline_suite()?);
        hit = true;
    }
    if all || module == "kan" {
        out.extend(kan_suite()?);
        hit = true;
    }
    if all || module == "loss" {
        out.extend(loss_suite()?);
        hit = true;
    }
    if all || module == "model" {
        out.push(model_suite(&ModelConfig::karma(3), 64, 10)?);
        hit = true;
    }
    if !hit {
        return Err(Error::Config(format!("unknown gradcheck module `{}` (ops, spline, kan, loss, model, all)", module)));
    }
    Ok(out)
}
