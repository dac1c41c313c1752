//! Procedural defect-like segmentation data: thin lines, blobs and rings
//! painted over a textured background with controlled class frequencies.
//!
//! All randomness comes from integer hashing of `(seed, index, ...)`, so a
//! sample is byte-identical on every platform.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hash::{self, SplitMix};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Line,
    Blob,
    Ring,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Line => "line",
            ShapeKind::Blob => "blob",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "line" => Some(ShapeKind::Line),
            "blob" => Some(ShapeKind::Blob),
            "ring" => Some(ShapeKind::Ring),
            _ => None,
        }
    }
}

/// Generator settings. Class 0 is background; `kinds` and `frequencies`
/// describe classes `1..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Target pixel fraction per foreground class; the rest is background.
    pub frequencies: Vec<f64>,
    pub seed: u64,
    /// Labels are constant over `cell×cell` blocks.
    pub cell: usize,
    /// Amplitude of per-pixel texture noise.
    pub texture: f64,
}

impl SynthSpec {
    /// `classes − 1` foreground classes with geometrically decaying
    /// frequencies totalling `coverage`, kinds cycling line, blob, ring.
    pub fn imbalanced(height: usize, width: usize, classes: usize, coverage: f64, seed: u64) -> Self {
        let fg = classes.saturating_sub(1);
        let raw: Vec<f64> = (0..fg).map(|i| math::pow(0.6, i as f64)).collect();
        let s: f64 = raw.iter().sum();
        let kinds = [ShapeKind::Line, ShapeKind::Blob, ShapeKind::Ring];
        Self {
            height,
            width,
            classes,
            kinds: (0..fg).map(|i| kinds[i % 3]).collect(),
            frequencies: raw.iter().map(|r| coverage * r / s).collect(),
            seed,
            cell: 1,
            texture: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("size {}×{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.classes < 2 || self.classes > 256 {
            return bad(format!("classes must be in 2..=256, got {}", self.classes));
        }
        let fg = self.classes - 1;
        if self.kinds.len() != fg || self.frequencies.len() != fg {
            return bad(format!("need {} shape kinds and frequencies, got {} and {}", fg, self.kinds.len(), self.frequencies.len()));
        }
        if self.frequencies.iter().any(|f| !(*f >= 0.0 && *f <= 1.0)) {
            return bad(format!("frequencies must lie in [0, 1]"));
        }
        if self.frequencies.iter().sum::<f64>() > 1.0 + 1e-12 {
            return bad(format!("frequencies sum above 1"));
        }
        if self.cell == 0 || self.height % self.cell != 0 || self.width % self.cell != 0 {
            return bad(format!("cell {} must divide {}×{}", self.cell, self.height, self.width));
        }
        if !(self.texture >= 0.0) {
            return bad(format!("texture must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H×W` labels.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn mask_tensor(&self) -> Tensor {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        Tensor::from_fn(&[h, w], |i| self.mask[i] as f64)
    }
}

const PALETTE: [[f64; 3]; 9] = [
    [0.45, 0.45, 0.42],
    [0.10, 0.10, 0.12],
    [0.85, 0.30, 0.20],
    [0.25, 0.60, 0.85],
    [0.90, 0.80, 0.25],
    [0.35, 0.75, 0.35],
    [0.70, 0.35, 0.75],
    [0.95, 0.60, 0.70],
    [0.20, 0.35, 0.30],
];

fn color(class: usize, seed: u64) -> [f64; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let mut r = SplitMix::from_words(&[seed, 0xC01 ^ class as u64]);
    [r.next_f64(), r.next_f64(), r.next_f64()]
}

/// Cells covered by one shape on a `gh×gw` lattice.
fn shape_cells(kind: ShapeKind, rng: &mut SplitMix, gh: usize, gw: usize, out: &mut Vec<usize>) {
    out.clear();
    let (fh, fw) = (gh as f64, gw as f64);
    let span = fh.max(fw);
    let (cy, cx) = (rng.range(0.0, fh), rng.range(0.0, fw));
    match kind {
        ShapeKind::Line => {
            let theta = rng.range(0.0, core::f64::consts::PI);
            let len = rng.range(0.3, 0.9) * span;
            let half = rng.range(0.5, 1.0 + span / 48.0);
            let (dy, dx) = (math::sin(theta), math::cos(theta));
            for y in 0..gh {
                for x in 0..gw {
                    let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let along = py * dy + px * dx;
                    let across = (py * dx - px * dy).abs();
                    if along.abs() <= len / 2.0 && across <= half {
                        out.push(y * gw + x);
                    }
                }
            }
        }
        ShapeKind::Blob | ShapeKind::Ring => {
            let r0 = rng.range(0.08, 0.22) * span;
            let ecc = rng.range(0.7, 1.3);
            let (a1, p1) = (rng.range(0.0, 0.25), rng.range(0.0, 6.283));
            let thick = rng.range(0.25, 0.45) * r0;
            for y in 0..gh {
                for x in 0..gw {
                    let (py, px) = ((y as f64 + 0.5 - cy) * ecc, x as f64 + 0.5 - cx);
                    let d = math::sqrt(py * py + px * px);
                    let theta = libm::atan2(py, px);
                    let r = r0 * (1.0 + a1 * math::sin(3.0 * theta + p1));
                    let inside = match kind {
                        ShapeKind::Blob => d <= r,
                        _ => d <= r && d >= r - thick,
                    };
                    if inside {
                        out.push(y * gw + x);
                    }
                }
            }
        }
    }
}

/// Deterministic sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w, cell) = (spec.height, spec.width, spec.cell);
    let (gh, gw) = (h / cell, w / cell);
    let ncell = gh * gw;
    let mut labels = vec![0u8; ncell];
    let mut order: Vec<usize> = (0..spec.frequencies.len()).collect();
    order.sort_by(|&a, &b| spec.frequencies[b].total_cmp(&spec.frequencies[a]).then(a.cmp(&b)));
    let mut cells = Vec::new();
    for &fi in &order {
        let class = (fi + 1) as u8;
        let f = spec.frequencies[fi];
        let mut free: usize = labels.iter().filter(|&&l| l == 0).count();
        if f >= 1.0 {
            labels.iter_mut().filter(|l| **l == 0).for_each(|l| *l = class);
            continue;
        }
        let target = math::round(f * ncell as f64) as usize;
        let mut painted = 0usize;
        let mut attempt = 0u64;
        while painted < target && free > 0 && attempt < 256 {
            let mut rng = SplitMix::from_words(&[spec.seed, index, fi as u64, attempt]);
            attempt += 1;
            shape_cells(spec.kinds[fi], &mut rng, gh, gw, &mut cells);
            for &c in &cells {
                if painted >= target {
                    break;
                }
                if labels[c] == 0 {
                    labels[c] = class;
                    painted += 1;
                    free -= 1;
                }
            }
        }
    }
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = labels[(y / cell) * gw + x / cell];
        }
    }
    let mut img = vec![0.0; 3 * h * w];
    let shade = SplitMix::from_words(&[spec.seed, index, 0x5AD]).range(-0.08, 0.08);
    for y in 0..h {
        for x in 0..w {
            let c = mask[y * w + x] as usize;
            let col = color(c, spec.seed);
            for ch in 0..3 {
                let n = hash::unit(hash::hash(&[spec.seed, index, y as u64, x as u64, ch as u64]));
                let v = col[ch] + shade + spec.texture * (n - 0.5);
                img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Sample { image: Tensor::new(&[3, h, w], img)?, mask })
}

/// Horizontal flip followed by `quarter_turns` clockwise 90° rotations.
/// Rotations by an odd number of quarter turns need a square image.
pub fn augment(image: &Tensor, mask: &[u8], flip: bool, quarter_turns: u8) -> Result<(Tensor, Vec<u8>)> {
    let s = image.shape();
    let (c, h, w) = match *s {
        [c, h, w] => (c, h, w),
        _ => return Err(crate::error::shape_err("augment", format!("expected C×H×W, got {:?}", s))),
    };
    if quarter_turns % 2 == 1 && h != w {
        return Err(crate::error::arg_err("augment", format!("odd rotation of non-square {}×{}", h, w)));
    }
    // source (y, x) for output (y, x)
    let src = |y: usize, x: usize| -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        for _ in 0..quarter_turns % 4 {
            // inverse of clockwise turn: out(y, x) = in(n-1-x, y)
            let n = h;
            let (ny, nx) = (n - 1 - x, y);
            y = ny;
            x = nx;
        }
        if flip {
            x = w - 1 - x;
        }
        (y, x)
    };
    let d = image.data();
    let mut out = vec![0.0; c * h * w];
    let mut m = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            m[y * w + x] = mask[sy * w + sx];
            for ch in 0..c {
                out[(ch * h + y) * w + x] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Ok((Tensor::new(s, out)?, m))
}
