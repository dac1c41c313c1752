//! Singular value decomposition and the low-rank utilities built on it:
//! energy-based rank selection, SVD initialisation of factor pairs and
//! magnitude pruning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Thin SVD `A = U·diag(s)·Vᵀ` with `s` sorted in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m×k`
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `k×n`
    pub vt: Tensor,
}

const MAX_SWEEPS: usize = 60;

/// One-sided Jacobi SVD.
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.dims2("svd")?;
    if !a.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    if m < n {
        let t = svd(&a.transpose2()?)?;
        return Ok(Svd { u: t.vt.transpose2()?, s: t.s, vt: t.u.transpose2()? });
    }
    // columns of A stored as rows for contiguous access
    let mut cols: Vec<f64> = a.transpose2()?.into_data();
    let mut v: Vec<f64> = Tensor::eye(n).into_data();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (&cols[p * m..(p + 1) * m], &cols[q * m..(q + 1) * m]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + math::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> = (0..n)
        .map(|j| (math::sqrt(cols[j * m..(j + 1) * m].iter().map(|x| x * x).sum()), j))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = vec![0.0; m * n];
    let mut vt = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (r, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[i * n + r] = cols[j * m + i] / sigma;
            }
        }
        // V was accumulated with rotated rows, so row j of `v` is column j of V
        vt[r * n..(r + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
    }
    Ok(Svd { u: Tensor::new(&[m, n], u)?, s, vt: Tensor::new(&[n, n], vt)? })
}

fn rotate(rows: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = rows.split_at_mut(q * len);
    let rp = &mut head[p * len..(p + 1) * len];
    let rq = &mut tail[..len];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Smallest `r` keeping at least `tau` of the squared singular-value mass.
/// An all-zero matrix gets rank 1.
pub fn select_rank(w: &Tensor, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(arg_err("select_rank", format!("energy threshold {} outside (0, 1]", tau)));
    }
    let s = svd(w)?.s;
    let energy: Vec<f64> = s.iter().map(|x| x * x).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Ok(1);
    }
    let mut cum = 0.0;
    for (i, e) in energy.iter().enumerate() {
        cum += e;
        if cum / total >= tau {
            return Ok(i + 1);
        }
    }
    Ok(energy.len())
}

/// Factors `(W_u, W_v)` with `W_u = U_r·√Σ_r` and `W_v = √Σ_r·V_rᵀ`.
pub fn svd_init(w: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let (m, n) = w.dims2("svd_init")?;
    if r == 0 || r > m.min(n) {
        return Err(arg_err("svd_init", format!("rank {} outside 1..={}", r, m.min(n))));
    }
    let d = svd(w)?;
    let k = d.s.len();
    let root: Vec<f64> = d.s.iter().map(|&x| math::sqrt(x)).collect();
    let wu = Tensor::from_fn(&[m, r], |i| d.u.data()[(i / r) * k + i % r] * root[i % r]);
    let wv = Tensor::from_fn(&[r, n], |i| d.vt.data()[i] * root[i / n]);
    Ok((wu, wv))
}

/// Zeroes entries with `|w| <= tau`.
pub fn prune(w: &Tensor, tau: f64) -> Tensor {
    let mut out = w.clone();
    prune_in_place(&mut out, tau);
    out
}

/// In-place form of [`prune`]; returns how many entries became zero.
pub fn prune_in_place(w: &mut Tensor, tau: f64) -> usize {
    let mut n = 0;
    for v in w.data_mut() {
        if v.abs() <= tau && *v != 0.0 {
            n += 1;
        }
        if v.abs() <= tau {
            *v = 0.0;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_reconstructs() {
        let a = Tensor::from_fn(&[5, 3], |i| ((i * 7 + 3) % 11) as f64 - 4.0);
        let d = svd(&a).unwrap();
        let mut us = d.u.clone();
        for i in 0..5 {
            for j in 0..3 {
                us.set(&[i, j], us.at(&[i, j]) * d.s[j]);
            }
        }
        let back = us.matmul(&d.vt).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let a = Tensor::from_fn(&[2, 4], |i| (i as f64).sin());
        let (wu, wv) = svd_init(&a, 2).unwrap();
        assert!(wu.matmul(&wv).unwrap().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn prune_eval() {
        let w = Tensor::new(&[3], vec![0.5, -0.01, 0.2]).unwrap();
        assert_eq!(prune(&w, 0.1).data(), &[0.5, 0.0, 0.2]);
    }

    #[test]
    fn zero_matrix_rank_one() {
        assert_eq!(select_rank(&Tensor::zeros(&[3, 3]), 0.95).unwrap(), 1);
    }
}
