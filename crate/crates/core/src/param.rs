//! Named parameter storage and the per-pass binding of parameters to a tape.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor; decides regularisation and counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalisation affine parameters.
    Norm,
    /// Per-channel path scales of a KAN linear layer.
    Scale,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Scale => "scale",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "scale" => ParamKind::Scale,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Folds batch statistics into running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            for (id, src) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let dst = self.params[id.0].value.data_mut();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (1.0 - momentum) * *d + momentum * s;
                }
            }
        }
    }
}

/// Creates parameters under a dotted name prefix with seeded initialisation.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    zero: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new(), zero: false }
    }

    /// Builder that allocates every tensor as zeros (shapes only).
    pub fn skeleton(store: &'a mut ParamStore) -> Self {
        Self { zero: true, ..Self::new(store, 0) }
    }

    pub fn is_skeleton(&self) -> bool {
        self.zero
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = String::new();
        for p in &self.prefix {
            s.push_str(p);
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn tensor(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, kind, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: &[usize], v: f64) -> ParamId {
        let t = if self.zero { Tensor::zeros(shape) } else { Tensor::full(shape, v) };
        self.tensor(name, kind, t)
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, kind: ParamKind, shape: &[usize], bound: f64) -> ParamId {
        let t = if self.zero || bound == 0.0 {
            Tensor::zeros(shape)
        } else {
            let rng = &mut self.rng;
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        self.tensor(name, kind, t)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Pending running-statistics update recorded during a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// State of one forward pass: the tape, parameter bindings and mode flags.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    track_grads: bool,
    noise_seed: u64,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Training pass: batch statistics, gradients tracked for parameters.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, true, true)
    }

    /// Inference pass: running statistics, no gradient bookkeeping.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    pub fn new(store: &'a ParamStore, training: bool, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            track_grads,
            noise_seed: 0,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape handle for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self.tape.leaf(p.value.clone(), self.track_grads && p.kind.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn record_bn(&mut self, mean: ParamId, var: ParamId, stats: BatchStats) {
        self.bn_updates.push(BnUpdate { mean, var, stats });
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    /// Backward from `loss`, returning one gradient slot per stored parameter.
    /// Parameters the pass never touched get `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut g: Gradients = self.tape.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| g.take(v))).collect())
    }
}
