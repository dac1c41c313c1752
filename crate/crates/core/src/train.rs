//! Training loop: shuffled minibatches, optional flip/rotation augmentation,
//! AdamW under a cosine schedule, clipping, magnitude pruning at epoch
//! boundaries and best-validation tracking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::hash::{self, SplitMix};
use crate::loss::{class_weights, total_loss, ClassWeights, LossConfig};
use crate::lowrank;
use crate::metrics::{compute_metrics, ConfusionMatrix, SegMetrics, ZeroSupport};
use crate::net::Model;
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, cosine_restart_lr, AdamWConfig, OptimState};
use crate::param::{Ctx, ParamId, ParamStore};
use crate::synth::{augment, generate_sample, SynthSpec};
use crate::tensor::Tensor;

/// Images `3×H×W` with row-major label masks, all of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<Vec<u8>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, masks: Vec<Vec<u8>>, classes: usize) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(shape_err("dataset", format!("{} images vs {} masks", images.len(), masks.len())));
        }
        if images.is_empty() {
            return Err(Error::Config(String::from("dataset is empty")));
        }
        let s0 = images[0].shape().to_vec();
        if s0.len() != 3 || s0[0] != 3 {
            return Err(shape_err("dataset", format!("images must be 3×H×W, got {:?}", s0)));
        }
        for (i, (im, m)) in images.iter().zip(&masks).enumerate() {
            if im.shape() != s0.as_slice() {
                return Err(shape_err("dataset", format!("image {} is {:?}, expected {:?}", i, im.shape(), s0)));
            }
            if m.len() != s0[1] * s0[2] {
                return Err(shape_err("dataset", format!("mask {} has {} labels for {}×{}", i, m.len(), s0[1], s0[2])));
            }
            if let Some(&l) = m.iter().find(|&&l| l as usize >= classes) {
                return Err(Error::Label { label: l as usize, classes });
            }
        }
        Ok(Self { images, masks, classes })
    }

    /// Samples `0..n` of a synthetic spec.
    pub fn synthetic(spec: &SynthSpec, n: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let s = generate_sample(spec, i as u64)?;
            images.push(s.image);
            masks.push(s.mask);
        }
        Self::new(images, masks, spec.classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[1], s[2])
    }

    /// Every fifth sample (`index % 5 == 4`) is held out for validation.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|i| i % 5 != 4)
    }

    /// Stacks samples into `B×3×H×W` plus concatenated masks.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<u8>) {
        let (h, w) = self.size();
        let mut x = Vec::with_capacity(idx.len() * 3 * h * w);
        let mut y = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            x.extend_from_slice(self.images[i].data());
            y.extend_from_slice(&self.masks[i]);
        }
        (Tensor::new(&[idx.len(), 3, h, w], x).expect("sizes checked"), y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub optim: AdamWConfig,
    pub lr_min: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Random horizontal flips and quarter turns.
    pub augment: bool,
    pub bn_momentum: f64,
    /// Prune the KAN weights every this many epochs (0 disables).
    pub prune_every: usize,
    /// Restart the cosine schedule every this many epochs.
    pub warm_restarts: Option<usize>,
    /// Hold out `index % 5 == 4`; otherwise validate on the training set.
    pub holdout: bool,
    /// Stop once validation mIoU (without background) exceeds this.
    pub stop_above: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            clip_norm: 1.0,
            optim: AdamWConfig::default(),
            lr_min: 1e-6,
            seed: 0,
            loss: LossConfig::default(),
            augment: true,
            bn_momentum: 0.1,
            prune_every: 10,
            warm_restarts: None,
            holdout: true,
            stop_above: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(String::from("epochs and batch_size must be >= 1")));
        }
        if !(self.clip_norm > 0.0) || !(self.optim.lr > 0.0) || !(self.lr_min >= 0.0) {
            return Err(Error::Config(String::from("clip_norm and lr must be > 0, lr_min >= 0")));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(String::from("bn_momentum must lie in [0, 1]")));
        }
        if self.warm_restarts == Some(0) {
            return Err(Error::Config(String::from("warm restart period must be >= 1")));
        }
        self.loss.validate()
    }
}

/// Per-epoch record; `Display` renders one `key=value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub smooth: f64,
    pub sparse: f64,
    pub grad_norm: f64,
    pub val_miou: f64,
    pub val_miou_bg: f64,
    pub val_pixel_acc: f64,
    pub pruned: usize,
    pub best: bool,
}

impl core::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "event=epoch epoch={} lr={} loss={} ce={} dice={} smooth={} sparse={} grad_norm={} \
             val_miou={} val_miou_bg={} val_pixel_acc={} pruned={} best={}",
            self.epoch,
            self.lr,
            self.loss,
            self.ce,
            self.dice,
            self.smooth,
            self.sparse,
            self.grad_norm,
            self.val_miou,
            self.val_miou_bg,
            self.val_pixel_acc,
            self.pruned,
            self.best
        )
    }
}

pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_miou: f64,
    /// Parameters at the best validation epoch.
    pub best: ParamStore,
    pub weights: ClassWeights,
}

/// Argmax labels for a `B×3×H×W` batch using running statistics.
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<u8>> {
    let mut ctx = Ctx::eval(&model.store);
    let xv = ctx.tape.constant(x.clone());
    let logits = model.forward(&mut ctx, xv)?;
    Ok(argmax_classes(ctx.tape.value(logits)))
}

/// Argmax over axis 1 of a `B×K×…` tensor.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (b, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(b * inner);
    for bi in 0..b {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * inner + i] > d[(bi * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Confusion matrix of the model over `idx`, evaluated in chunks of `batch`.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize], batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(data.classes);
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let pred = predict(model, &x)?;
        cm.add(&pred, &y)?;
    }
    Ok(cm)
}

pub fn evaluate_metrics(model: &Model, data: &Dataset, idx: &[usize], batch: usize) -> Result<SegMetrics> {
    let cm = evaluate(model, data, idx, batch)?;
    compute_metrics(&cm, Some(0), ZeroSupport::default())
}

/// Zeroes `|w| <= τ` in the KAN weights and extends the kept-entry masks.
fn prune_kan(model: &mut Model, masks: &mut Vec<(ParamId, Vec<bool>)>) -> usize {
    let tau = model.config.ranks.prune_threshold;
    let ids: Vec<ParamId> = model.kan_linears().iter().flat_map(|l| l.weights()).collect();
    let mut n = 0;
    for id in ids {
        n += lowrank::prune_in_place(model.store.get_mut(id), tau);
        let keep: Vec<bool> = model.store.get(id).data().iter().map(|&v| v != 0.0).collect();
        match masks.iter_mut().find(|(m, _)| *m == id) {
            Some((_, k)) => k.iter_mut().zip(&keep).for_each(|(a, &b)| *a = *a && b),
            None => masks.push((id, keep)),
        }
    }
    n
}

fn apply_masks(store: &mut ParamStore, masks: &[(ParamId, Vec<bool>)]) {
    for (id, keep) in masks {
        for (v, &k) in store.get_mut(*id).data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// Trains `model` in place, calling `on_epoch` after each epoch.
/// On return `model.store` holds the final parameters; the best ones are in the report.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            data.classes, model.config.num_classes
        )));
    }
    let (train_idx, val_idx) = if cfg.holdout && data.len() >= 5 {
        data.split()
    } else {
        ((0..data.len()).collect(), (0..data.len()).collect())
    };
    let weights = class_weights(train_idx.iter().map(|&i| data.masks[i].as_slice()), data.classes)?;
    let (h, w) = data.size();
    let batches = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches) as u64;
    let mut state = OptimState::new(model.store.len());
    let mut masks: Vec<(ParamId, Vec<bool>)> = Vec::new();
    let mut logs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.store.clone());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(hash::hash(&[cfg.seed, epoch as u64])));
        let mut sums = [0.0f64; 6];
        let mut lr = cfg.optim.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, mut y) = data.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut y, chunk.len(), h, w, cfg.seed, step)?;
            }
            let (grads, bn, vals) = {
                let mut ctx = Ctx::train(&model.store).with_noise_seed(hash::hash(&[cfg.seed, 0x9015E, step]));
                let xv = ctx.tape.constant(x);
                let logits = model.forward(&mut ctx, xv)?;
                let parts = total_loss(&mut ctx, logits, &y, model, &weights.w, &cfg.loss)?;
                let t = &ctx.tape;
                let vals = [parts.total, parts.ce, parts.dice, parts.smooth, parts.sparse].map(|v| t.value(v).item());
                let grads = ctx.param_grads(parts.total)?;
                (grads, ctx.take_bn_updates(), vals)
            };
            let mut grads = grads;
            let gn = crate::optim::grad_norm(&grads);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            lr = match cfg.warm_restarts {
                Some(p) => cosine_restart_lr(step, (p * batches) as u64, cfg.optim.lr, cfg.lr_min),
                None => cosine_lr(step, total_steps, cfg.optim.lr, cfg.lr_min),
            };
            let opt = AdamWConfig { lr, ..cfg.optim };
            adamw_step(&mut model.store, &grads, &mut state, &opt)?;
            model.store.apply_bn_updates(&bn, cfg.bn_momentum);
            apply_masks(&mut model.store, &masks);
            for (s, v) in sums.iter_mut().zip(vals.iter().chain(core::iter::once(&gn))) {
                *s += v;
            }
            step += 1;
        }
        let pruned = if cfg.prune_every > 0 && (epoch + 1) % cfg.prune_every == 0 {
            prune_kan(model, &mut masks)
        } else {
            0
        };
        let m = evaluate_metrics(model, data, &val_idx, cfg.batch_size)?;
        let improved = m.miou_wo_bg > best.1;
        if improved {
            best = (epoch, m.miou_wo_bg, model.store.clone());
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: sums[0] / n,
            ce: sums[1] / n,
            dice: sums[2] / n,
            smooth: sums[3] / n,
            sparse: sums[4] / n,
            grad_norm: sums[5] / n,
            val_miou: m.miou_wo_bg,
            val_miou_bg: m.miou_with_bg,
            val_pixel_acc: m.pixel_acc,
            pruned,
            best: improved,
        };
        on_epoch(&log);
        logs.push(log);
        if cfg.stop_above.is_some_and(|t| m.miou_wo_bg > t) {
            break;
        }
    }
    Ok(TrainReport { logs, best_epoch: best.0, best_miou: best.1, best: best.2, weights })
}

/// Per-sample random flip and quarter turns (turns only for square frames).
fn augment_batch(x: &mut Tensor, y: &mut [u8], b: usize, h: usize, w: usize, seed: u64, step: u64) -> Result<()> {
    let n = 3 * h * w;
    for i in 0..b {
        let mut r = SplitMix::from_words(&[seed, 0xA06, step, i as u64]);
        let flip = r.below(2) == 1;
        let turns = if h == w { r.below(4) as u8 } else { 2 * r.below(2) as u8 };
        if !flip && turns == 0 {
            continue;
        }
        let img = Tensor::new(&[3, h, w], x.data()[i * n..(i + 1) * n].to_vec())?;
        let (im, m) = augment(&img, &y[i * h * w..(i + 1) * h * w], flip, turns)?;
        x.data_mut()[i * n..(i + 1) * n].copy_from_slice(im.data());
        y[i * h * w..(i + 1) * h * w].copy_from_slice(&m);
    }
    Ok(())
}

/// Loss terms for one batch without updating anything.
pub fn batch_loss(model: &Model, x: &Tensor, y: &[u8], weights: &[f64], cfg: &LossConfig) -> Result<[f64; 5]> {
    let mut ctx = Ctx::new(&model.store, true, false);
    let xv = ctx.tape.constant(x.clone());
    let logits = model.forward(&mut ctx, xv)?;
    let p = total_loss(&mut ctx, logits, y, model, weights, cfg)?;
    let t = &ctx.tape;
    Ok([p.total, p.ce, p.dice, p.smooth, p.sparse].map(|v| t.value(v).item()))
}
