use karma_core::hash::SplitMix;
use karma_core::layers::DwSep;
use karma_core::lowrank::{prune, select_rank, svd, svd_init};
use karma_core::metrics::{compute_metrics, confusion, mean_ci, t_critical, ZeroSupport};
use karma_core::optim::{clip_grad_norm, cosine_lr, grad_norm};
use karma_core::param::{Builder, Ctx, ParamStore};
use karma_core::spline::SplineGrid;
use karma_core::synth::{augment, generate_sample, SynthSpec};
use karma_core::{Tape, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = SplitMix::new(seed);
    Tensor::from_fn(shape, |_| r.range(-1.0, 1.0))
}

/// Direct nested-loop convolution with zero padding and channel groups.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, cpg, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let opg = o / groups;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    for n in 0..b {
        for oc in 0..o {
            let g = oc / opg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..cpg {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += w.at(&[oc, ic, di, dj]) * x.at(&[n, g * cpg + ic, y as usize, xx as usize]);
                            }
                        }
                    }
                    out.set(&[n, oc, i, j], s);
                }
            }
        }
    }
    assert_eq!(c, cpg * groups);
    out
}

#[test]
fn matmul_examples() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    let m = rand_tensor(&[3, 4], 1);
    assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    assert!(rand_tensor(&[2, 3], 2).matmul(&rand_tensor(&[2, 3], 3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_loops(seed in any::<u64>(), groups_dw in any::<bool>(), k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, h in 3usize..8, w in 3usize..8) {
        let c = 4;
        let (o, groups) = if groups_dw { (4, 4) } else { (3, 1) };
        let x = rand_tensor(&[2, c, h, w], seed);
        let wt = rand_tensor(&[o, c / groups, k, k], seed ^ 0x55);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(wt.clone()));
        let y = t.conv2d(xv, wv, stride, k / 2, groups).unwrap();
        let want = naive_conv(&x, &wt, stride, k / 2, groups);
        prop_assert_eq!(t.value(y).shape(), want.shape());
        prop_assert!(t.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn partition_of_unity_on_any_range(g in 1usize..10, o in 0usize..5, lo in -5.0f64..0.0, span in 0.1f64..10.0, u in 0.0f64..1.0) {
        let grid = SplineGrid::new(g, o, lo, lo + span).unwrap();
        let mut v = vec![0.0; grid.basis_count()];
        let x = lo + u * span * (1.0 - 1e-12);
        grid.eval(x, &mut v);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(v.iter().all(|&b| b >= 0.0));
        prop_assert!(v.iter().filter(|&&b| b > 0.0).count() <= o + 1);
    }

    #[test]
    fn svd_reconstructs_and_orders(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
        let a = rand_tensor(&[m, n], seed);
        let d = svd(&a).unwrap();
        prop_assert!(d.s.windows(2).all(|p| p[0] >= p[1]) && d.s.iter().all(|&s| s >= 0.0));
        let k = d.s.len();
        let us = Tensor::from_fn(&[m, k], |i| d.u.data()[i] * d.s[i % k]);
        prop_assert!(us.matmul(&d.vt).unwrap().max_abs_diff(&a) < 1e-10);
        // full-rank factors reproduce the matrix
        let (wu, wv) = svd_init(&a, m.min(n)).unwrap();
        prop_assert!(wu.matmul(&wv).unwrap().max_abs_diff(&a) < 1e-10);
        let r = select_rank(&a, 1.0).unwrap();
        prop_assert!(r >= 1 && r <= m.min(n));
    }

    #[test]
    fn pruning_only_zeroes_small_entries(seed in any::<u64>(), tau in 0.0f64..0.8) {
        let w = rand_tensor(&[5, 5], seed);
        let p = prune(&w, tau);
        for (a, b) in w.data().iter().zip(p.data()) {
            let kept = if a.abs() <= tau { *b == 0.0 } else { a == b };
            prop_assert!(kept);
        }
    }

    #[test]
    fn metrics_bounded(seed in any::<u64>(), k in 2usize..6, n in 1usize..200) {
        let mut r = SplitMix::new(seed);
        let truth: Vec<u8> = (0..n).map(|_| r.below(k as u64) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| r.below(k as u64) as u8).collect();
        let cm = confusion(&pred, &truth, k).unwrap();
        prop_assert_eq!(cm.total(), n as u64);
        let m = compute_metrics(&cm, Some(0), ZeroSupport::IncludeAsZero).unwrap();
        for v in [m.miou_with_bg, m.miou_wo_bg, m.f1_with_bg, m.balanced_acc, m.fw_iou, m.pixel_acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((-1.0..=1.0).contains(&m.mean_mcc));
        let perfect = compute_metrics(&confusion(&truth, &truth, k).unwrap(), Some(0), ZeroSupport::Exclude).unwrap();
        prop_assert_eq!(perfect.miou_with_bg, 1.0);
        prop_assert_eq!(perfect.pixel_acc, 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm(seed in any::<u64>(), max in 0.01f64..5.0) {
        let mut g = vec![Some(rand_tensor(&[3, 4], seed)), None, Some(rand_tensor(&[2], seed + 1))];
        let before = grad_norm(&g);
        clip_grad_norm(&mut g, max);
        prop_assert!(grad_norm(&g) <= max.max(before.min(max)) * (1.0 + 1e-12));
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1u64..500, lr0 in 1e-5f64..1e-1) {
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, lr0, 1e-6)).collect();
        prop_assert!(lrs.windows(2).all(|p| p[1] <= p[0] + 1e-18));
        prop_assert!((lrs[0] - lr0).abs() < 1e-15);
        prop_assert_eq!(lrs[total as usize], 1e-6);
    }

    #[test]
    fn augment_turns_compose_to_identity(seed in any::<u64>(), flip in any::<bool>()) {
        let spec = SynthSpec::imbalanced(32, 32, 3, 0.4, seed);
        let s = generate_sample(&spec, 0).unwrap();
        let (mut img, mut mask) = augment(&s.image, &s.mask, flip, 1).unwrap();
        for _ in 0..3 {
            (img, mask) = augment(&img, &mask, false, 1).unwrap();
        }
        if flip {
            (img, mask) = augment(&img, &mask, true, 0).unwrap();
        }
        prop_assert_eq!(img, s.image);
        prop_assert_eq!(mask, s.mask);
    }
}

#[test]
fn dwsep_is_depthwise_then_pointwise() {
    let mut store = ParamStore::new();
    let layer = {
        let mut b = Builder::new(&mut store, 7);
        DwSep::new(&mut b, "sep", 4, 6, 3, true)
    };
    assert_eq!(layer.num_params(), 4 * 9 + 4 * 6 + 6);
    let (sep, std) = karma_core::audit::dwsep_vs_standard(4, 6, 3);
    // both counts carry the output bias
    assert_eq!(sep, layer.num_params() as u64);
    assert_eq!(std, 4 * 6 * 9 + 6);
    let x = rand_tensor(&[1, 4, 6, 5], 3);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x.clone());
    let y = layer.forward(&mut ctx, xv).unwrap();
    let h = naive_conv(&x, store.get(layer.dw.weight), 1, 1, 4);
    let mut want = naive_conv(&h, store.get(layer.pw.weight), 1, 0, 1);
    let bias = store.get(layer.pw.bias.unwrap()).data().to_vec();
    for (i, v) in want.data_mut().iter_mut().enumerate() {
        *v += bias[(i / 30) % 6];
    }
    assert!(ctx.tape.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn t_table_matches_student_distribution() {
    for conf in [0.90, 0.95, 0.99] {
        for df in 1..=30 {
            let d = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            let exact = d.inverse_cdf(1.0 - (1.0 - conf) / 2.0);
            let table = t_critical(df, conf).unwrap();
            assert!((table - exact).abs() < 6e-4, "df={} conf={} table={} exact={}", df, conf, table, exact);
        }
    }
    assert!(t_critical(3, 0.8).is_err());
    assert!(mean_ci(&[1.0], 0.95).is_err());
    let (m, lo, hi) = mean_ci(&[0.70, 0.72, 0.74], 0.95).unwrap();
    assert!((m - 0.72).abs() < 1e-12);
    // s = 0.02, half-width = 4.303·0.02/√3
    assert!((hi - m - 4.303 * 0.02 / 3f64.sqrt()).abs() < 1e-12 && (m - lo - (hi - m)).abs() < 1e-15);
}

#[test]
fn synthetic_class_frequencies_hit_their_targets() {
    let mut spec = SynthSpec::imbalanced(64, 64, 4, 0.3, 21);
    spec.cell = 2;
    let mut tally = [0u64; 4];
    let n = 100;
    for i in 0..n {
        for &l in &generate_sample(&spec, i).unwrap().mask {
            tally[l as usize] += 1;
        }
    }
    let total = (n as usize * 64 * 64) as f64;
    for (c, &f) in spec.frequencies.iter().enumerate() {
        let got = tally[c + 1] as f64 / total;
        assert!((got - f).abs() <= 0.3 * f, "class {} got {} target {}", c + 1, got, f);
    }
}

#[test]
fn synthesis_is_deterministic_per_seed_and_index() {
    let spec = SynthSpec::imbalanced(32, 64, 5, 0.5, 3);
    assert_eq!(generate_sample(&spec, 4).unwrap(), generate_sample(&spec, 4).unwrap());
    assert_ne!(generate_sample(&spec, 4).unwrap().mask, generate_sample(&spec, 5).unwrap().mask);
    let other = SynthSpec { seed: 4, ..spec.clone() };
    assert_ne!(generate_sample(&spec, 4).unwrap().mask, generate_sample(&other, 4).unwrap().mask);
    let bad = SynthSpec { height: 33, ..spec };
    assert!(generate_sample(&bad, 0).is_err());
}
