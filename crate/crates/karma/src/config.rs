//! `key = value` configuration with `[section]` headers and `#` comments.
//!
//! Sections: `model`, `train`, `loss`, `synth`. Command-line flags and
//! `--set section.key=value` overrides are layered on top, then the
//! `TIKAN_SEED` environment variable replaces every seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ini::Ini;
use karma_core::kan::{KanInit, RankConfig};
use karma_core::loss::{L1Scope, LossConfig};
use karma_core::net::FpnConv;
use karma_core::optim::AdamWConfig;
use karma_core::synth::{ShapeKind, SynthSpec};
use karma_core::train::TrainConfig;
use karma_core::{ModelConfig, Variant};

pub const SEED_ENV: &str = "TIKAN_SEED";

pub const MODEL_KEYS: &[&str] = &[
    "variant",
    "classes",
    "seed",
    "stage_channels",
    "fpn_width",
    "kan_channels",
    "pre_kan",
    "rank",
    "rank_spline",
    "energy_threshold",
    "prune_threshold",
    "grid_size",
    "spline_order",
    "grid_lo",
    "grid_hi",
    "noise_scale",
    "fpn_conv",
    "hidden_ratio",
    "share_splines",
    "fusion_weights",
    "kan_init",
];
pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "lr_min",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "seed",
    "augment",
    "bn_momentum",
    "prune_every",
    "warm_restarts",
    "holdout",
    "stop_above",
    "threads",
];
pub const LOSS_KEYS: &[&str] =
    &["alpha", "beta", "gamma", "lambda_smooth", "lambda_sparse", "eps", "focal", "l1_scope"];
pub const SYNTH_KEYS: &[&str] =
    &["height", "width", "classes", "count", "seed", "cell", "texture", "coverage", "kinds", "frequencies"];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(MODEL_KEYS),
        "train" => Some(TRAIN_KEYS),
        "loss" => Some(LOSS_KEYS),
        "synth" => Some(SYNTH_KEYS),
        _ => None,
    }
}

fn all_keys() -> String {
    ["model", "train", "loss", "synth"]
        .iter()
        .flat_map(|s| section_keys(s).unwrap().iter().map(move |k| format!("{}.{}", s, k)))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] karma_core::Error),
}

/// Parsed settings, keyed by section then key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = Config::default();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let Some(section) = section else {
                    return Err(ConfigError::UnknownKey { key: k.to_string(), valid: all_keys() });
                };
                // trailing `# ...` after whitespace is a comment
                let v = v.find(" #").or_else(|| v.find("\t#")).map_or(v, |i| &v[..i]);
                cfg.set(section, k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let known = section_keys(section).is_some_and(|keys| keys.contains(&key));
        if !known {
            return Err(ConfigError::UnknownKey { key: format!("{}.{}", section, key), valid: all_keys() });
        }
        self.values.entry(section.to_string()).or_default().insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// `section.key=value`
    pub fn set_dotted(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Syntax(format!("expected section.key=value, got `{}`", assignment));
        let (lhs, value) = assignment.split_once('=').ok_or_else(bad)?;
        let (section, key) = lhs.trim().split_once('.').ok_or_else(bad)?;
        self.set(section, key, value)
    }

    /// Applies `TIKAN_SEED` to the model, train and synth seeds.
    pub fn apply_seed_env(&mut self, value: Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            v.trim().parse::<u64>().map_err(|e| ConfigError::BadValue {
                key: SEED_ENV.to_string(),
                value: v.clone(),
                reason: e.to_string(),
            })?;
            for s in ["model", "train", "synth"] {
                self.set(s, "seed", &v)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(section).and_then(|m| m.get(key)).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| ConfigError::BadValue {
                key: format!("{}.{}", section, key),
                value: v.to_string(),
                reason: e.to_string(),
            }),
        }
    }

    fn choice<T>(&self, section: &str, key: &str, parse: impl Fn(&str) -> Option<T>, options: &str) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).ok_or_else(|| ConfigError::BadValue {
                key: format!("{}.{}", section, key),
                value: v.to_string(),
                reason: format!("expected one of {}", options),
            }),
        }
    }

    /// `none` clears an optional value.
    fn optional<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Option<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            Some("none") => Ok(Some(None)),
            _ => Ok(self.parsed::<T>(section, key)?.map(Some)),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get(section, key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                p.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
                    key: format!("{}.{}", section, key),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Variant defaults overlaid with `[model]` keys.
    pub fn model(&self, default_classes: usize) -> Result<ModelConfig, ConfigError> {
        let s = "model";
        let variant = self.choice(s, "variant", Variant::parse, "karma, flash, high")?.unwrap_or(Variant::Karma);
        let classes = self.parsed(s, "classes")?.unwrap_or(default_classes);
        let mut m = ModelConfig::for_variant(variant, classes);
        if let Some(v) = self.parsed(s, "seed")? {
            m.seed = v;
        }
        if let Some(v) = self.list::<usize>(s, "stage_channels")? {
            m.stage_channels = v.try_into().map_err(|v: Vec<usize>| ConfigError::BadValue {
                key: "model.stage_channels".into(),
                value: format!("{:?}", v),
                reason: "need exactly five widths".into(),
            })?;
            if m.pre_kan_projection.is_none() {
                m.kan_channels = m.stage_channels[4];
            }
        }
        if let Some(v) = self.optional::<usize>(s, "pre_kan")? {
            m.pre_kan_projection = v;
            m.kan_channels = v.unwrap_or(m.stage_channels[4]);
        }
        if let Some(v) = self.parsed(s, "kan_channels")? {
            m.kan_channels = v;
        }
        if let Some(v) = self.parsed(s, "fpn_width")? {
            m.fpn_width = v;
        }
        let kan_changed = self.get(s, "stage_channels").is_some() || self.get(s, "pre_kan").is_some();
        if kan_changed && variant != Variant::High {
            m.ranks = RankConfig { ..RankConfig::for_channels(m.kan_channels) };
        }
        if let Some(v) = self.parsed(s, "rank")? {
            m.ranks.r = v;
        }
        if let Some(v) = self.parsed(s, "rank_spline")? {
            m.ranks.r_f = v;
        }
        if let Some(v) = self.parsed(s, "energy_threshold")? {
            m.ranks.energy_threshold = v;
        }
        if let Some(v) = self.parsed(s, "prune_threshold")? {
            m.ranks.prune_threshold = v;
        }
        if let Some(v) = self.parsed(s, "grid_size")? {
            m.grid_size = v;
        }
        if let Some(v) = self.parsed(s, "spline_order")? {
            m.spline_order = v;
        }
        if let Some(v) = self.parsed(s, "grid_lo")? {
            m.grid_range.0 = v;
        }
        if let Some(v) = self.parsed(s, "grid_hi")? {
            m.grid_range.1 = v;
        }
        if let Some(v) = self.parsed(s, "noise_scale")? {
            m.noise_scale = v;
        }
        if let Some(v) = self.choice(s, "fpn_conv", FpnConv::parse, "dwsep, standard")? {
            m.fpn_conv = v;
        }
        if let Some(v) = self.parsed(s, "hidden_ratio")? {
            m.kan_hidden_ratio = v;
        }
        if let Some(v) = self.parsed(s, "share_splines")? {
            m.share_splines = v;
        }
        if let Some(v) = self.parsed(s, "fusion_weights")? {
            m.fusion_weights = v;
        }
        if let Some(v) = self.choice(s, "kan_init", KanInit::parse, "svd, random")? {
            m.kan_init = v;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn loss(&self) -> Result<LossConfig, ConfigError> {
        let s = "loss";
        let mut l = LossConfig::default();
        let fields: [(&str, &mut f64); 6] = [
            ("alpha", &mut l.alpha),
            ("beta", &mut l.beta),
            ("gamma", &mut l.gamma),
            ("lambda_smooth", &mut l.lambda_smooth),
            ("lambda_sparse", &mut l.lambda_sparse),
            ("eps", &mut l.eps),
        ];
        for (k, dst) in fields {
            if let Some(v) = self.parsed(s, k)? {
                *dst = v;
            }
        }
        if let Some(v) = self.optional::<f64>(s, "focal")? {
            l.focal = v;
        }
        if let Some(v) = self.choice(s, "l1_scope", L1Scope::parse, "kan, weights, all")? {
            l.l1_scope = v;
        }
        l.validate()?;
        Ok(l)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let s = "train";
        let mut t = TrainConfig { loss: self.loss()?, ..TrainConfig::default() };
        let o: &mut AdamWConfig = &mut t.optim;
        let fields: [(&str, &mut f64); 5] = [
            ("lr", &mut o.lr),
            ("weight_decay", &mut o.weight_decay),
            ("beta1", &mut o.beta1),
            ("beta2", &mut o.beta2),
            ("eps", &mut o.eps),
        ];
        for (k, dst) in fields {
            if let Some(v) = self.parsed(s, k)? {
                *dst = v;
            }
        }
        if let Some(v) = self.parsed(s, "epochs")? {
            t.epochs = v;
        }
        if let Some(v) = self.parsed(s, "batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = self.parsed(s, "lr_min")? {
            t.lr_min = v;
        }
        if let Some(v) = self.parsed(s, "clip_norm")? {
            t.clip_norm = v;
        }
        if let Some(v) = self.parsed(s, "seed")? {
            t.seed = v;
        }
        if let Some(v) = self.parsed(s, "augment")? {
            t.augment = v;
        }
        if let Some(v) = self.parsed(s, "bn_momentum")? {
            t.bn_momentum = v;
        }
        if let Some(v) = self.parsed(s, "prune_every")? {
            t.prune_every = v;
        }
        if let Some(v) = self.optional::<usize>(s, "warm_restarts")? {
            t.warm_restarts = v;
        }
        if let Some(v) = self.parsed(s, "holdout")? {
            t.holdout = v;
        }
        if let Some(v) = self.optional::<f64>(s, "stop_above")? {
            t.stop_above = v;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn threads(&self) -> Result<usize, ConfigError> {
        Ok(self.parsed("train", "threads")?.unwrap_or(1usize).max(1))
    }

    /// Generator spec and sample count from `[synth]`.
    pub fn synth(&self) -> Result<(SynthSpec, usize), ConfigError> {
        let s = "synth";
        let h = self.parsed(s, "height")?.unwrap_or(64);
        let w = self.parsed(s, "width")?.unwrap_or(h);
        let k = self.parsed(s, "classes")?.unwrap_or(4);
        let coverage = self.parsed(s, "coverage")?.unwrap_or(0.3);
        let seed = self.parsed(s, "seed")?.unwrap_or(0);
        let mut spec = SynthSpec::imbalanced(h, w, k, coverage, seed);
        if let Some(v) = self.parsed(s, "cell")? {
            spec.cell = v;
        }
        if let Some(v) = self.parsed(s, "texture")? {
            spec.texture = v;
        }
        if let Some(v) = self.list::<f64>(s, "frequencies")? {
            spec.frequencies = v;
        }
        if let Some(v) = self.get(s, "kinds") {
            spec.kinds = v
                .split(',')
                .map(|p| {
                    ShapeKind::parse(p.trim()).ok_or_else(|| ConfigError::BadValue {
                        key: "synth.kinds".into(),
                        value: v.to_string(),
                        reason: "expected line, blob or ring".into(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        spec.validate()?;
        let count = self.parsed(s, "count")?.unwrap_or(8);
        Ok((spec, count))
    }
}

/// `[model]` section reproducing `m` exactly.
pub fn model_section(m: &ModelConfig) -> String {
    let mut s = String::from("[model]\n");
    let sc = m.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let pre = m.pre_kan_projection.map_or("none".to_string(), |p| p.to_string());
    let rows: Vec<(&str, String)> = vec![
        ("variant", m.variant.as_str().into()),
        ("classes", m.num_classes.to_string()),
        ("seed", m.seed.to_string()),
        ("stage_channels", sc),
        ("fpn_width", m.fpn_width.to_string()),
        ("pre_kan", pre),
        ("kan_channels", m.kan_channels.to_string()),
        ("rank", m.ranks.r.to_string()),
        ("rank_spline", m.ranks.r_f.to_string()),
        ("energy_threshold", m.ranks.energy_threshold.to_string()),
        ("prune_threshold", m.ranks.prune_threshold.to_string()),
        ("grid_size", m.grid_size.to_string()),
        ("spline_order", m.spline_order.to_string()),
        ("grid_lo", m.grid_range.0.to_string()),
        ("grid_hi", m.grid_range.1.to_string()),
        ("noise_scale", m.noise_scale.to_string()),
        ("fpn_conv", m.fpn_conv.as_str().into()),
        ("hidden_ratio", m.kan_hidden_ratio.to_string()),
        ("share_splines", m.share_splines.to_string()),
        ("fusion_weights", m.fusion_weights.to_string()),
        ("kan_init", m.kan_init.as_str().into()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{} = {}", k, v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_lists_valid_ones() {
        let e = Config::parse("[train]\nepochz = 3\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("train.epochz") && msg.contains("train.epochs"));
    }

    #[test]
    fn comments_and_sections() {
        let c = Config::parse("# run\n[train]\nepochs = 3 # short\n[loss]\nfocal = 2\n").unwrap();
        assert_eq!(c.train().unwrap().epochs, 3);
        assert_eq!(c.loss().unwrap().focal, Some(2.0));
    }

    #[test]
    fn model_section_round_trips() {
        for v in Variant::ALL {
            let m = ModelConfig::for_variant(v, 5);
            let back = Config::parse(&model_section(&m)).unwrap().model(2).unwrap();
            assert_eq!(back, m);
        }
    }
}
