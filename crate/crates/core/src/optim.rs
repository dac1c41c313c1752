//! AdamW with decoupled weight decay, cosine learning-rate schedule and
//! global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{arg_err, Error, Result};
use crate::math;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, `None` until first touched.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        Self { m: (0..n).map(|_| None).collect(), v: (0..n).map(|_| None).collect(), step: 0 }
    }
}

/// One AdamW update over every trainable parameter that has a gradient.
///
/// Decay is applied to the parameter first, `p ← p·(1 − lr·wd)`, then the
/// bias-corrected Adam step. A non-finite gradient aborts before anything
/// is modified.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(arg_err(
            "adamw_step",
            format!("{} grads and {} moments for {} params", grads.len(), state.m.len(), store.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                let name = &store.param(store.ids().nth(i).expect("index in range")).name;
                return Err(Error::Config(format!("non-finite gradient in {}", name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::pow(cfg.beta1, t);
    let bc2 = 1.0 - math::pow(cfg.beta2, t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if !store.param(id).kind.trainable() {
            continue;
        }
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let p = store.get_mut(id).data_mut();
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *p *= decay;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= cfg.lr * mh / (math::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, `lr_min` past the end.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let x = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math::cos(core::f64::consts::PI * x))
}

/// Cosine schedule restarted every `period` steps.
pub fn cosine_restart_lr(step: u64, period: u64, lr0: f64, lr_min: f64) -> f64 {
    if period == 0 {
        return lr_min;
    }
    cosine_lr(step % period, period, lr0, lr_min)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = math::sqrt(sq);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let s = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    s
}

pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    math::sqrt(grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum())
}
