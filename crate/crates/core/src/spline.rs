//! Uniform B-spline grids and Cox–de Boor basis evaluation.
//!
//! A grid with `G` intervals on `[lo, hi]` and order `O` carries `G + 2·O + 1`
//! knots (the base interval extended by `O` spans on each side) and spans
//! `G + O` basis functions. Inputs outside `[lo, hi]` are not clamped: the
//! extended knots give them partial support that fades to zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::hash;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    grid_size: usize,
    order: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
    noise_scale: f64,
}

impl SplineGrid {
    /// Uniform grid of `grid_size` intervals over `[lo, hi]`.
    pub fn new(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size == 0 {
            return Err(arg_err("make_grid", format!("grid size must be >= 1")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(arg_err("make_grid", format!("need lo < hi, got [{}, {}]", lo, hi)));
        }
        let h = (hi - lo) / grid_size as f64;
        let n = grid_size + 2 * order + 1;
        let knots = (0..n)
            .map(|i| {
                let j = i as isize - order as isize;
                if j == 0 {
                    lo
                } else if j == grid_size as isize {
                    hi
                } else {
                    lo + j as f64 * h
                }
            })
            .collect();
        Ok(Self { grid_size, order, lo, hi, knots, noise_scale: 0.0 })
    }

    pub fn with_noise_scale(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale.max(0.0);
        self
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.grid_size as f64
    }

    /// Number of basis functions, `G + O`.
    pub fn basis_count(&self) -> usize {
        self.grid_size + self.order
    }

    /// Copy of the grid whose interior knots are jittered by
    /// `±noise_scale·spacing`, deterministically from `seed`.
    ///
    /// The base-interval endpoints and the extension knots stay put, so the
    /// partition of unity on `[lo, hi]` survives the jitter.
    pub fn jittered(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if self.noise_scale == 0.0 {
            return out;
        }
        let amp = self.noise_scale * self.spacing();
        let first = self.order + 1;
        let last = self.order + self.grid_size; // index of `hi`, exclusive
        for i in first..last {
            let u = hash::unit(hash::hash(&[seed, i as u64]));
            out.knots[i] += amp * (2.0 * u - 1.0);
        }
        for i in 1..out.knots.len() {
            if out.knots[i] < out.knots[i - 1] {
                out.knots[i] = out.knots[i - 1];
            }
        }
        // endpoints of later spans must not be pushed past the fixed `hi`
        for i in (first..last).rev() {
            if out.knots[i] > out.knots[i + 1] {
                out.knots[i] = out.knots[i + 1];
            }
        }
        out
    }

    /// Basis values at `x` written into `out[..G+O]`.
    pub fn eval(&self, x: f64, out: &mut [f64]) {
        let mut scratch = vec![0.0; self.knots.len()];
        self.eval_into(x, out, None, &mut scratch);
    }

    /// Basis values and their derivatives with respect to `x`.
    pub fn eval_with_deriv(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) {
        let mut scratch = vec![0.0; self.knots.len()];
        self.eval_into(x, vals, Some(ders), &mut scratch);
    }

    /// Cox–de Boor recursion. `scratch` needs `knots.len()` slots.
    pub(crate) fn eval_into(
        &self,
        x: f64,
        vals: &mut [f64],
        ders: Option<&mut [f64]>,
        scratch: &mut [f64],
    ) {
        let t = &self.knots;
        let nb = self.basis_count();
        let m = t.len() - 1; // number of order-0 pieces
        let n = &mut scratch[..m];
        for i in 0..m {
            n[i] = if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let order = self.order;
        let mut ders = ders;
        for p in 1..=order {
            if p == order {
                if let Some(d) = ders.as_deref_mut() {
                    let pf = p as f64;
                    for i in 0..nb {
                        let l = ratio(pf, t[i + p] - t[i]) * n[i];
                        let r = ratio(pf, t[i + p + 1] - t[i + 1]) * n[i + 1];
                        d[i] = l - r;
                    }
                }
            }
            for i in 0..(m - p) {
                let left = ratio(x - t[i], t[i + p] - t[i]) * n[i];
                let right = ratio(t[i + p + 1] - x, t[i + p + 1] - t[i + 1]) * n[i + 1];
                n[i] = left + right;
            }
        }
        if order == 0 {
            if let Some(d) = ders {
                d[..nb].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        vals[..nb].copy_from_slice(&n[..nb]);
    }
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(g: &SplineGrid, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; g.basis_count()];
        g.eval(x, &mut v);
        v
    }

    /// Textbook recursive definition, written independently of `eval_into`.
    fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 != 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(t, i, p - 1, x);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 != 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(t, i + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn default_grid_has_g_plus_o_bases() {
        let g = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        assert_eq!(g.basis_count(), 8);
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
    }

    #[test]
    fn order_zero_single_box() {
        let g = SplineGrid::new(1, 0, 0.0, 1.0).unwrap();
        assert_eq!(basis(&g, 0.0), vec![1.0]);
        assert_eq!(basis(&g, 0.5), vec![1.0]);
        assert_eq!(basis(&g, 1.0), vec![0.0]);
    }

    #[test]
    fn spacing_is_range_over_g() {
        let g = SplineGrid::new(4, 2, -1.0, 1.0).unwrap();
        assert_eq!(g.spacing(), 0.5);
        let k = g.knots();
        for w in k.windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_range() {
        assert!(SplineGrid::new(5, 3, 1.0, 1.0).is_err());
        assert!(SplineGrid::new(5, 3, 2.0, 1.0).is_err());
        assert!(SplineGrid::new(0, 3, 0.0, 1.0).is_err());
    }

    #[test]
    fn linear_basis_is_hat_at_knots() {
        let g = SplineGrid::new(4, 1, -1.0, 1.0).unwrap();
        for j in 0..=3 {
            let x = -1.0 + 0.5 * j as f64;
            let v = basis(&g, x);
            assert_eq!(v.iter().filter(|&&b| b == 1.0).count(), 1, "x={x} {v:?}");
            assert_eq!(v.iter().filter(|&&b| b == 0.0).count(), v.len() - 1);
        }
    }

    #[test]
    fn cubic_matches_recursive_oracle() {
        let g = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        for s in 0..41 {
            let x = -1.6 + s as f64 * 0.08;
            let v = basis(&g, x);
            for (j, &b) in v.iter().enumerate() {
                let want = cox_de_boor(g.knots(), j, 3, x);
                assert!((b - want).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let g = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        let nb = g.basis_count();
        let (mut v, mut d) = (vec![0.0; nb], vec![0.0; nb]);
        for &x in &[-0.93, -0.31, 0.05, 0.77, 1.3] {
            g.eval_with_deriv(x, &mut v, &mut d);
            let h = 1e-6;
            let (p, m) = (basis(&g, x + h), basis(&g, x - h));
            for j in 0..nb {
                let fd = (p[j] - m[j]) / (2.0 * h);
                assert!((fd - d[j]).abs() < 1e-6, "x={x} j={j} fd={fd} ad={}", d[j]);
            }
        }
    }

    #[test]
    fn zero_noise_keeps_grid() {
        let g = SplineGrid::new(5, 3, -1.0, 1.0).unwrap();
        assert_eq!(g.jittered(17), g);
    }

    #[test]
    fn jitter_is_seeded_and_monotone() {
        let g = SplineGrid::new(7, 3, -1.0, 1.0).unwrap().with_noise_scale(0.1);
        let a = g.jittered(99);
        assert_eq!(a, g.jittered(99));
        assert_ne!(a, g);
        assert!(a.knots().windows(2).all(|w| w[0] <= w[1]));
        for s in 0..50 {
            let x = -1.0 + s as f64 * 0.04;
            let sum: f64 = basis(&a, x).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
