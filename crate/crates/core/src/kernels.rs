//! Raw slice kernels behind the tracked tensor ops. Everything is row-major
//! NCHW; callers validate shapes before reaching these functions.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the reduction order fixed and vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of a grouped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= w-1
        let hi_num = self.w as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(ow as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Forward convolution without bias. Returns the number of multiplies executed.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) -> u64 {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ipg, opg, k) = (g.in_per_group(), g.out_per_group(), g.k);
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut mults = 0u64;
    let fast_pointwise = k == 1 && g.stride == 1 && g.pad == 0;
    for b in 0..g.batch {
        for oc in 0..g.out_c {
            let grp = oc / opg;
            let out_plane = &mut out[(b * g.out_c + oc) * plane_out..][..plane_out];
            for icl in 0..ipg {
                let ic = grp * ipg + icl;
                let in_plane = &x[(b * g.in_c + ic) * plane_in..][..plane_in];
                let wbase = (oc * ipg + icl) * k * k;
                if fast_pointwise {
                    let wv = w[wbase];
                    axpy(wv, in_plane, out_plane);
                    mults += plane_out as u64;
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (lo, hi) = g.col_range(kx, ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            mults += (hi - lo) as u64;
                            if g.stride == 1 {
                                let ix0 = (lo + kx) - g.pad;
                                axpy(wv, &in_row[ix0..ix0 + (hi - lo)], &mut out_row[lo..hi]);
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    mults
}

/// Accumulates input and weight gradients of a bias-free convolution.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ipg, opg, k) = (g.in_per_group(), g.out_per_group(), g.k);
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut gx = gx;
    let mut gw = gw;
    for b in 0..g.batch {
        for oc in 0..g.out_c {
            let grp = oc / opg;
            let gplane = &gout[(b * g.out_c + oc) * plane_out..][..plane_out];
            for icl in 0..ipg {
                let ic = grp * ipg + icl;
                let in_off = (b * g.in_c + ic) * plane_in;
                let wbase = (oc * ipg + icl) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (lo, hi) = g.col_range(kx, ow);
                        if lo >= hi {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row_off = in_off + iy as usize * g.w;
                            let grow = &gplane[oy * ow..][..ow];
                            if g.stride == 1 {
                                let ix0 = (lo + kx) - g.pad;
                                let n = hi - lo;
                                if gw.is_some() {
                                    wacc += dot(&grow[lo..hi], &x[row_off + ix0..row_off + ix0 + n]);
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    axpy(wv, &grow[lo..hi], &mut gx[row_off + ix0..row_off + ix0 + n]);
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = row_off + ox * g.stride + kx - g.pad;
                                    wacc += grow[ox] * x[ix];
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wbase + ky * k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling with `-inf` padding. Returns the flat argmax per output element.
pub fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) -> alloc::vec::Vec<usize> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut arg = alloc::vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        // first maximum wins ties
                        if x[i] > best || best_i == usize::MAX {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    arg
}

/// Nearest-neighbour upsampling of `planes` h×w planes by an integer factor.
pub fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        for oy in 0..oh {
            let src = &x[p * h * w + (oy / f) * w..][..w];
            let dst = &mut out[p * oh * ow + oy * ow..][..ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
}

pub fn upsample_backward(g: &[f64], planes: usize, h: usize, w: usize, f: usize, gx: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        for oy in 0..oh {
            let src = &g[p * oh * ow + oy * ow..][..ow];
            let dst = &mut gx[p * h * w + (oy / f) * w..][..w];
            for (ox, &v) in src.iter().enumerate() {
                dst[ox / f] += v;
            }
        }
    }
}
