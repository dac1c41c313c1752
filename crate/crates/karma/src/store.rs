//! Dataset and checkpoint directories.
//!
//! Dataset: `images/NNNN.tnsr` (f64, 3×H×W), `masks/NNNN.tnsr` (u8, H×W)
//! and `manifest.txt`. Checkpoint: `params/NNNN.tnsr` (f64) plus
//! `manifest.txt` holding a `[model]` section and a `[params]` section
//! mapping each parameter name to `kind file`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ini::Ini;
use karma_core::param::ParamKind;
use karma_core::synth::SynthSpec;
use karma_core::train::Dataset;
use karma_core::Model;

use crate::config::{model_section, Config, ConfigError};
use crate::tensor_file::{read_f64, read_tensor, write_f64, write_tensor, FormatError, TensorData};

pub const DATASET_FORMAT: &str = "karma-dataset-1";
pub const CHECKPOINT_FORMAT: &str = "karma-checkpoint-1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] karma_core::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path) -> impl FnOnce(FormatError) -> StoreError + '_ {
    move |source| StoreError::Format { path: path.display().to_string(), source }
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> StoreError {
    StoreError::Manifest { path: path.display().to_string(), detail: detail.into() }
}

fn file_name(i: usize) -> String {
    format!("{:04}.tnsr", i)
}

fn load_manifest(path: &Path) -> Result<Ini, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ini::load_from_str(&text).map_err(|e| manifest_err(path, e.to_string()))
}

fn manifest_value<'a>(ini: &'a Ini, path: &Path, section: Option<&str>, key: &str) -> Result<&'a str, StoreError> {
    ini.get_from(section, key).ok_or_else(|| manifest_err(path, format!("missing `{}`", key)))
}

/// Writes `data` under `dir`; `spec` is recorded in the manifest when given.
pub fn write_dataset(dir: &Path, data: &Dataset, spec: Option<&SynthSpec>) -> Result<(), StoreError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let (h, w) = data.size();
    for (i, (img, mask)) in data.images.iter().zip(&data.masks).enumerate() {
        let p = dir.join("images").join(file_name(i));
        write_f64(&p, img).map_err(fmt_err(&p))?;
        let p = dir.join("masks").join(file_name(i));
        write_tensor(&p, &TensorData::U8 { shape: vec![h, w], data: mask.clone() }).map_err(fmt_err(&p))?;
    }
    let mut m = String::new();
    let _ = writeln!(m, "format = {}", DATASET_FORMAT);
    let _ = writeln!(m, "count = {}", data.len());
    let _ = writeln!(m, "height = {}", h);
    let _ = writeln!(m, "width = {}", w);
    let _ = writeln!(m, "classes = {}", data.classes);
    if let Some(s) = spec {
        let kinds: Vec<&str> = s.kinds.iter().map(|k| k.as_str()).collect();
        let freqs: Vec<String> = s.frequencies.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(m, "\n[synth]");
        let _ = writeln!(m, "seed = {}", s.seed);
        let _ = writeln!(m, "cell = {}", s.cell);
        let _ = writeln!(m, "texture = {}", s.texture);
        let _ = writeln!(m, "kinds = {}", kinds.join(","));
        let _ = writeln!(m, "frequencies = {}", freqs.join(","));
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, m).map_err(io_err(&p))
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset, StoreError> {
    let mp = dir.join("manifest.txt");
    let ini = load_manifest(&mp)?;
    let format = manifest_value(&ini, &mp, None, "format")?;
    if format != DATASET_FORMAT {
        return Err(manifest_err(&mp, format!("format `{}`, expected `{}`", format, DATASET_FORMAT)));
    }
    let num = |key: &str| -> Result<usize, StoreError> {
        let v = manifest_value(&ini, &mp, None, key)?;
        v.parse().map_err(|_| manifest_err(&mp, format!("`{}` is not a count: `{}`", key, v)))
    };
    let (count, h, w, classes) = (num("count")?, num("height")?, num("width")?, num("classes")?);
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for i in 0..count {
        let p = dir.join("images").join(file_name(i));
        let img = read_f64(&p).map_err(fmt_err(&p))?;
        if img.shape() != [3, h, w] {
            return Err(manifest_err(&p, format!("shape {:?}, manifest says [3, {}, {}]", img.shape(), h, w)));
        }
        images.push(img);
        let p = dir.join("masks").join(file_name(i));
        let (shape, mask) = read_tensor(&p).and_then(TensorData::into_u8).map_err(fmt_err(&p))?;
        if shape != [h, w] {
            return Err(manifest_err(&p, format!("shape {:?}, manifest says [{}, {}]", shape, h, w)));
        }
        masks.push(mask);
    }
    Ok(Dataset::new(images, masks, classes)?)
}

/// Saves every parameter and buffer of `model`.
pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<(), StoreError> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
    let mut m = format!("format = {}\n\n", CHECKPOINT_FORMAT);
    m.push_str(&model_section(&model.config));
    m.push_str("\n[params]\n");
    for (i, (_, p)) in model.store.iter().enumerate() {
        let f = pdir.join(file_name(i));
        write_f64(&f, &p.value).map_err(fmt_err(&f))?;
        let _ = writeln!(m, "{} = {} params/{}", p.name, p.kind.as_str(), file_name(i));
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, m).map_err(io_err(&p))
}

/// Rebuilds the model from the manifest and loads every tensor bit-exactly.
pub fn load_checkpoint(dir: &Path) -> Result<Model, StoreError> {
    let mp = dir.join("manifest.txt");
    let ini = load_manifest(&mp)?;
    let format = manifest_value(&ini, &mp, None, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(manifest_err(&mp, format!("format `{}`, expected `{}`", format, CHECKPOINT_FORMAT)));
    }
    let mut cfg = Config::default();
    let section = ini.section(Some("model")).ok_or_else(|| manifest_err(&mp, "missing [model] section"))?;
    for (k, v) in section.iter() {
        cfg.set("model", k, v)?;
    }
    let mut model = Model::skeleton(cfg.model(2)?)?;
    let params = ini.section(Some("params")).ok_or_else(|| manifest_err(&mp, "missing [params] section"))?;
    let mut seen = 0;
    for (name, entry) in params.iter() {
        let id = model.store.find(name).ok_or_else(|| manifest_err(&mp, format!("unknown parameter `{}`", name)))?;
        let (kind, file) = entry.split_once(' ').ok_or_else(|| manifest_err(&mp, format!("bad entry for `{}`", name)))?;
        if ParamKind::parse(kind) != Some(model.store.param(id).kind) {
            return Err(manifest_err(&mp, format!("`{}` has kind `{}`", name, kind)));
        }
        let f: PathBuf = dir.join(file.trim());
        let t = read_f64(&f).map_err(fmt_err(&f))?;
        model.store.set(id, t)?;
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(manifest_err(&mp, format!("{} of {} parameters present", seen, model.store.len())));
    }
    Ok(model)
}
