//! Segmentation objective: median-frequency weighted cross-entropy, soft
//! Dice, spline smoothness and L1 sparsity.
//!
//! `total = α·CE + β·Dice + γ·(λ₁·smooth + λ₂·L1)`

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::net::Model;
use crate::param::{Ctx, ParamId, ParamKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    /// Dice smoothing term.
    pub eps: f64,
    /// Replace cross-entropy with focal loss of this exponent.
    pub focal: Option<f64>,
    /// Which tensors the L1 term covers.
    pub l1_scope: L1Scope,
}

/// Coverage of the sparsity term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum L1Scope {
    /// Factor matrices of the KAN linears only.
    Kan,
    /// Every weight tensor; biases, norm affines and scales excluded.
    #[default]
    Weights,
    /// Every trainable tensor.
    All,
}

impl L1Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            L1Scope::Kan => "kan",
            L1Scope::Weights => "weights",
            L1Scope::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kan" => Some(L1Scope::Kan),
            "weights" => Some(L1Scope::Weights),
            "all" => Some(L1Scope::All),
            _ => None,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            lambda_smooth: 0.1,
            lambda_sparse: 0.01,
            eps: 1e-6,
            focal: None,
            l1_scope: L1Scope::Weights,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.alpha, self.beta, self.gamma, self.lambda_smooth, self.lambda_sparse, self.eps];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative")));
        }
        if let Some(g) = self.focal {
            if !(g >= 0.0) {
                return Err(Error::Config(format!("focal exponent must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-class pixel frequencies and their median-frequency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub f: Vec<f64>,
    /// Classes with no pixels; they get the largest present weight.
    pub absent: Vec<usize>,
}

/// `w_k = median(f)/f_k`, the median taken over classes that occur.
pub fn class_weights_from_counts(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Argument { op: "class_weights", detail: format!("no labelled pixels") });
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = f.iter().copied().filter(|&x| x > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 { present[n / 2] } else { 0.5 * (present[n / 2 - 1] + present[n / 2]) };
    let mut w: Vec<f64> = f.iter().map(|&fk| if fk > 0.0 { median / fk } else { 0.0 }).collect();
    let wmax = w.iter().copied().fold(0.0, f64::max);
    let absent: Vec<usize> = (0..f.len()).filter(|&k| f[k] == 0.0).collect();
    for &k in &absent {
        w[k] = wmax;
    }
    Ok(ClassWeights { w, f, absent })
}

/// Tallies labels over all masks, then applies [`class_weights_from_counts`].
pub fn class_weights<'a>(masks: impl IntoIterator<Item = &'a [u8]>, k: usize) -> Result<ClassWeights> {
    let mut counts = vec![0u64; k];
    for m in masks {
        for &l in m {
            let l = l as usize;
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            counts[l] += 1;
        }
    }
    class_weights_from_counts(&counts)
}

fn logits_dims(tape: &Tape, logits: Var, targets: &[u8]) -> Result<(usize, usize, usize)> {
    let s = tape.shape(logits);
    if s.len() < 2 {
        return Err(shape_err("loss", format!("logits need a class axis, got {:?}", s)));
    }
    let (b, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if targets.len() != b * inner {
        return Err(shape_err("loss", format!("{} targets for logits {:?}", targets.len(), s)));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Label { label: bad as usize, classes: k });
    }
    Ok((b, k, inner))
}

/// Constant tensor shaped like the logits holding `scale[t]` at the target class.
fn target_map(tape: &mut Tape, logits: Var, targets: &[u8], scale: &[f64]) -> Result<Var> {
    let (b, k, inner) = logits_dims(tape, logits, targets)?;
    let mut m = vec![0.0; b * k * inner];
    for bi in 0..b {
        for i in 0..inner {
            let t = targets[bi * inner + i] as usize;
            m[(bi * k + t) * inner + i] = scale[t];
        }
    }
    let t = Tensor::new(tape.shape(logits), m)?;
    Ok(tape.constant(t))
}

/// `−(1/N)·Σ_i w_{t_i}·log softmax(logits)_{i,t_i}` with `N` the pixel count.
pub fn weighted_ce(tape: &mut Tape, logits: Var, targets: &[u8], w: &[f64]) -> Result<Var> {
    let (_, k, _) = logits_dims(tape, logits, targets)?;
    if w.len() != k {
        return Err(shape_err("weighted_ce", format!("{} weights for {} classes", w.len(), k)));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let m = target_map(tape, logits, targets, w)?;
    let prod = tape.mul(lsm, m)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / targets.len() as f64)
}

/// Focal variant: `−(1/N)·Σ w·(1−p)^γ·log p` at the target class.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[u8], w: &[f64], gamma: f64) -> Result<Var> {
    let (_, k, _) = logits_dims(tape, logits, targets)?;
    if w.len() != k {
        return Err(shape_err("focal_loss", format!("{} weights for {} classes", w.len(), k)));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let p = tape.softmax(logits, 1)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q = tape.pow(q, gamma)?;
    let term = tape.mul(q, lsm)?;
    let m = target_map(tape, logits, targets, w)?;
    let prod = tape.mul(term, m)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / targets.len() as f64)
}

/// `1 − (2·Σ M·P + ε)/(Σ(M + P) + ε)` over all pixels and classes, `P` the softmax.
pub fn dice_loss(tape: &mut Tape, logits: Var, targets: &[u8], eps: f64) -> Result<Var> {
    let (_, k, _) = logits_dims(tape, logits, targets)?;
    let p = tape.softmax(logits, 1)?;
    let m = target_map(tape, logits, targets, &vec![1.0; k])?;
    let inter = tape.mul(p, m)?;
    let inter = tape.sum(inter)?;
    let sp = tape.sum(p)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add_scalar(sp, targets.len() as f64 + eps)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `Σ ‖Δ²S_v‖²` over the inner and outer KAN linears.
pub fn smoothness_reg(ctx: &mut Ctx, model: &Model) -> Result<Var> {
    let [a, b] = model.kan_linears();
    let sa = a.smoothness(ctx)?;
    let sb = b.smoothness(ctx)?;
    ctx.tape.add(sa, sb)
}

/// `Σ |w|` over the tensors selected by `scope`.
pub fn sparsity_reg(ctx: &mut Ctx, model: &Model, scope: L1Scope) -> Result<Var> {
    let store = ctx.store();
    let kan: Vec<ParamId> = model.kan_linears().iter().flat_map(|l| l.weights()).collect();
    let mut acc: Option<Var> = None;
    for (id, p) in store.iter() {
        let take = match scope {
            L1Scope::Kan => kan.contains(&id),
            L1Scope::Weights => p.kind == ParamKind::Weight,
            L1Scope::All => p.kind.trainable(),
        };
        if !take {
            continue;
        }
        let v = ctx.param(id);
        let a = ctx.tape.abs(v)?;
        let s = ctx.tape.sum(a)?;
        acc = Some(match acc {
            Some(x) => ctx.tape.add(x, s)?,
            None => s,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(ctx.tape.constant(Tensor::scalar(0.0))),
    }
}

/// Individual terms of the objective, all scalars on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
    pub smooth: Var,
    pub sparse: Var,
}

pub fn total_loss(
    ctx: &mut Ctx,
    logits: Var,
    targets: &[u8],
    model: &Model,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let ce = match cfg.focal {
        Some(g) => focal_loss(&mut ctx.tape, logits, targets, weights, g)?,
        None => weighted_ce(&mut ctx.tape, logits, targets, weights)?,
    };
    let dice = dice_loss(&mut ctx.tape, logits, targets, cfg.eps)?;
    let smooth = smoothness_reg(ctx, model)?;
    let sparse = sparsity_reg(ctx, model, cfg.l1_scope)?;
    let t = &mut ctx.tape;
    let a = t.scale(ce, cfg.alpha)?;
    let b = t.scale(dice, cfg.beta)?;
    let s = t.scale(smooth, cfg.gamma * cfg.lambda_smooth)?;
    let l = t.scale(sparse, cfg.gamma * cfg.lambda_sparse)?;
    let ab = t.add(a, b)?;
    let sl = t.add(s, l)?;
    let total = t.add(ab, sl)?;
    Ok(LossParts { total, ce, dice, smooth, sparse })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        let w = class_weights_from_counts(&[2, 1, 1]).unwrap();
        assert_eq!(w.w, vec![0.5, 1.0, 1.0]);
        let u = class_weights_from_counts(&[5, 5, 5, 5]).unwrap();
        assert!(u.w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn absent_class_gets_max_weight() {
        let w = class_weights_from_counts(&[6, 2, 0]).unwrap();
        assert_eq!(w.absent, vec![2]);
        assert_eq!(w.w[2], w.w[1]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tp = Tape::new();
        let lg = tp.var(Tensor::zeros(&[1, 3, 2, 2]));
        let l = weighted_ce(&mut tp, lg, &[0, 1, 2, 0], &[1.0; 3]).unwrap();
        assert!((tp.value(l).item() - libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn bad_label_rejected() {
        let mut tp = Tape::new();
        let lg = tp.var(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(weighted_ce(&mut tp, lg, &[2], &[1.0; 2]), Err(Error::Label { .. })));
    }
}
