// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use salve::alphacrit::{alpha_crit, AlphaGrid, Estimate};
use salve::bundle::{read_bundle, write_bundle, Tensor, TensorBundle};
use salve::edits::{apply_steering, apply_weight_edit, edited_logit, rome_update, Direction, EditPlan, RomeEdit};
use salve::features::{class_conditional_means, dominant_feature};
use salve::gradfam::{avgpool_gradients, gradfam_avgpool_analytic, gradfam_from_gradients, FeatureMapStack};
use salve::tensor::{matmul, AdamConfig, AdamState};
use salve::{ActivationDataset, HeadWeights, Matrix};

fn matrix(rows: usize, cols: usize, lo: f32, hi: f32) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn single_sample(w_row: Vec<f32>, x: Vec<f32>) -> (HeadWeights, ActivationDataset) {
    let head = HeadWeights::new(Matrix::row_vector(&w_row).unwrap(), vec![0.0]).unwrap();
    let ds = ActivationDataset::new(Matrix::row_vector(&x).unwrap(), vec![0], vec!["k".into()]).unwrap();
    (head, ds)
}

/// First α on a 1e-3 grid where the edited logit is ≤ 0, by direct
/// evaluation of the clamped sum.
fn brute_force_root(w: &[f32], x: &[f32], c: &[f32], alpha_max: f64) -> Option<f64> {
    let z = |a: f64| -> f64 {
        w.iter()
            .zip(x)
            .zip(c)
            .map(|((w, x), c)| f64::from(*w) * f64::from(*x) * (1.0 - a * f64::from(c.abs())).max(0.0))
            .sum()
    };
    let steps = (alpha_max / 1e-3).round() as usize;
    (0..=steps).map(|s| s as f64 * 1e-3).find(|&a| z(a) <= 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, l, m)| {
            (matrix(n, k, -2.0, 2.0), matrix(k, l, -2.0, 2.0), matrix(l, m, -2.0, 2.0))
        })
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (p, q) in left.as_slice().iter().zip(right.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-4 * p.abs().max(q.abs()).max(1.0));
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params(
        p in matrix(3, 4, -5.0, 5.0),
        t in 0u64..50,
        lr in 1e-5f64..1.0,
    ) {
        let mut st = AdamState::new(3, 4, AdamConfig::with_lr(lr));
        st.t = t;
        let mut q = p.clone();
        st.step(&mut q, &Matrix::zeros(3, 4)).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn bundle_roundtrip(
        entries in prop::collection::vec(
            prop::collection::vec(1usize..5, 0..=4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), prop::collection::vec(-1e6f32..1e6, n))
            }),
            0..6,
        ),
        note in "[a-z ]{0,20}",
    ) {
        let mut b = TensorBundle::with_manifest(&serde_json::json!({"class_names": ["a"], "note": note}));
        for (i, (shape, data)) in entries.into_iter().enumerate() {
            b.insert(format!("t{i}"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let mut bytes = Vec::new();
        write_bundle(&b, &mut bytes).unwrap();
        prop_assert_eq!(read_bundle(bytes.as_slice()).unwrap(), b);
    }

    #[test]
    fn rome_hits_target_and_spares_orthogonal_inputs(
        (w, key, target, probe) in (1usize..6, 1usize..8).prop_flat_map(|(c, m)| (
            matrix(c, m, -2.0, 2.0),
            prop::collection::vec(-2.0f32..2.0, m),
            prop::collection::vec(-10.0f32..10.0, c),
            prop::collection::vec(-2.0f32..2.0, m),
        ))
    ) {
        prop_assume!(key.iter().map(|k| k * k).sum::<f32>() > 1e-2);
        let c = w.rows();
        let head = HeadWeights::new(w, vec![0.0; c]).unwrap();
        let edited = rome_update(&head, &RomeEdit::new(key.clone(), target.clone()).unwrap()).unwrap();
        for i in 0..c {
            let out: f64 = edited.w.row(i).iter().zip(&key).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            prop_assert!((out - f64::from(target[i])).abs() <= 1e-5 * f64::from(target[i].abs()).max(1.0), "{out} vs {}", target[i]);
        }
        // Project the probe onto the key's orthogonal complement.
        let kk: f64 = key.iter().map(|k| f64::from(*k) * f64::from(*k)).sum();
        let pk: f64 = probe.iter().zip(&key).map(|(p, k)| f64::from(*p) * f64::from(*k)).sum();
        let ortho: Vec<f32> = probe.iter().zip(&key).map(|(p, k)| (f64::from(*p) - pk / kk * f64::from(*k)) as f32).collect();
        for i in 0..c {
            let before: f64 = head.w.row(i).iter().zip(&ortho).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            let after: f64 = edited.w.row(i).iter().zip(&ortho).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            prop_assert!((before - after).abs() <= 1e-4);
        }
    }

    #[test]
    fn edit_matches_edited_logit(
        (w, x, c) in (1usize..5, 1usize..10).prop_flat_map(|(k, m)| (
            matrix(k, m, -2.0, 2.0),
            prop::collection::vec(-2.0f32..2.0, m),
            prop::collection::vec(-1.0f32..1.0, m),
        )),
        alpha in 0.0f64..5.0,
    ) {
        let k = w.rows();
        let head = HeadWeights::new(w, vec![0.5; k]).unwrap();
        let edited = apply_weight_edit(&head, &c, &EditPlan::suppress(0, alpha).unwrap()).unwrap();
        for i in 0..k {
            let via_edit: f64 = edited.w.row(i).iter().zip(&x).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            let direct = edited_logit(&head, &x, &c, i, alpha).unwrap();
            prop_assert!((via_edit - direct).abs() <= 1e-5 * direct.abs().max(1.0));
        }
        let same = apply_weight_edit(&head, &c, &EditPlan::new(0, Direction::Enhance, 0.0).unwrap()).unwrap();
        prop_assert_eq!(same, head);
    }

    #[test]
    fn suppression_is_monotone_for_nonnegative_products(
        (w, x, c) in (1usize..10).prop_flat_map(|m| (
            prop::collection::vec(0.0f32..2.0, m),
            prop::collection::vec(0.0f32..2.0, m),
            prop::collection::vec(-1.0f32..1.0, m),
        )),
        a in 0.0f64..5.0,
        da in 0.0f64..2.0,
    ) {
        let head = HeadWeights::new(Matrix::row_vector(&w).unwrap(), vec![0.0]).unwrap();
        let lo = edited_logit(&head, &x, &c, 0, a).unwrap();
        let hi = edited_logit(&head, &x, &c, 0, a + da).unwrap();
        prop_assert!(hi <= lo + 1e-12);
    }

    #[test]
    fn steering_is_additive(
        (x, v) in (1usize..10).prop_flat_map(|m| (
            prop::collection::vec(-3.0f32..3.0, m),
            prop::collection::vec(-1.0f32..1.0, m),
        )),
    ) {
        let once = apply_steering(&x, &v).unwrap();
        let twice_v: Vec<f32> = v.iter().map(|e| 2.0 * e).collect();
        let twice = apply_steering(&x, &twice_v).unwrap();
        let stepped = apply_steering(&once, &v).unwrap();
        for (a, b) in twice.iter().zip(&stepped) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn numerical_threshold_bounds_analytical_and_matches_scan(
        (w, x, c) in (1usize..8).prop_flat_map(|m| (
            prop::collection::vec(0.05f32..2.0, m),
            prop::collection::vec(0.0f32..2.0, m),
            prop::collection::vec(-1.0f32..1.0, m),
        )),
    ) {
        let grid = AlphaGrid::default();
        let (head, ds) = single_sample(w.clone(), x.clone());
        let r = &alpha_crit(&head, &ds, &c, 0, &grid).unwrap()[0];
        let (Some(Estimate::Included(ana)), Some(Estimate::Included(num))) = (r.analytical, r.numerical) else {
            return Ok(());
        };
        prop_assert!(num >= ana - 1e-6, "numerical {num} < analytical {ana}");
        let scan = brute_force_root(&w, &x, &c, grid.alpha_max).expect("numerical root implies a scan root");
        prop_assert!((num - scan).abs() <= 2e-3, "numerical {num} vs scan {scan}");
        let (lo, hi) = r.bracket.unwrap();
        prop_assert!(lo <= num && num <= hi);
        let residual = edited_logit(&head, &x, &c, 0, num).unwrap();
        prop_assert!(residual.abs() <= 1e-3 * r.logit.max(1.0));
    }

    #[test]
    fn numerical_threshold_matches_scan_with_mixed_signs(
        (w, x, c) in (1usize..8).prop_flat_map(|m| (
            prop::collection::vec(-2.0f32..2.0, m),
            prop::collection::vec(-2.0f32..2.0, m),
            prop::collection::vec(-1.0f32..1.0, m),
        )),
    ) {
        let grid = AlphaGrid { alpha_max: 10.0, step: 0.01 };
        let (head, ds) = single_sample(w.clone(), x.clone());
        let r = &alpha_crit(&head, &ds, &c, 0, &grid).unwrap()[0];
        if let Some(Estimate::Included(num)) = r.numerical {
            let scan = brute_force_root(&w, &x, &c, grid.alpha_max).expect("numerical root implies a scan root");
            prop_assert!((num - scan).abs() <= 2e-3, "numerical {num} vs scan {scan}");
        }
    }

    #[test]
    fn gradfam_paths_agree(
        (f, e) in (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(k, h, w)| (
            prop::collection::vec(-3.0f32..3.0, k * h * w).prop_map(move |d| FeatureMapStack::new(k, h, w, d).unwrap()),
            prop::collection::vec(-2.0f32..2.0, k),
        )),
        scale in 0.01f32..100.0,
    ) {
        let analytic = gradfam_avgpool_analytic(&f, &e).unwrap();
        let g = avgpool_gradients(&e, f.height(), f.width()).unwrap();
        let general = gradfam_from_gradients(&f, &g).unwrap();
        for (a, b) in analytic.as_slice().iter().zip(general.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        let scaled_vals: Vec<f32> = g.as_slice().iter().map(|v| v * scale).collect();
        let scaled = FeatureMapStack::new(f.channels(), f.height(), f.width(), scaled_vals).unwrap();
        let rescaled = gradfam_from_gradients(&f, &scaled).unwrap();
        for (a, b) in general.as_slice().iter().zip(rescaled.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        for v in analytic.as_slice() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn class_means_recombine_to_global_mean(
        (z, labels) in (1usize..30, 1usize..6).prop_flat_map(|(n, d)| (
            matrix(n + 3, d, -5.0, 5.0),
            prop::collection::vec(0usize..3, n).prop_map(|mut l| { l.extend([0, 1, 2]); l }),
        )),
    ) {
        let p = class_conditional_means(&z, &labels, 3).unwrap();
        let n = z.rows() as f64;
        let global = z.column_means();
        for (j, g) in global.iter().enumerate() {
            let recombined: f64 = (0..3).map(|k| p.counts[k] as f64 * f64::from(p.mean(k, j))).sum::<f64>() / n;
            prop_assert!((recombined - g).abs() <= 1e-5);
        }
    }

    #[test]
    fn dominant_feature_survives_positive_rescaling(
        (z, labels) in (1usize..20, 2usize..6).prop_flat_map(|(n, d)| (
            matrix(n + 2, d, -5.0, 5.0),
            prop::collection::vec(0usize..2, n).prop_map(|mut l| { l.extend([0, 1]); l }),
        )),
        s in 0.1f32..10.0,
        col_pick in 0usize..64,
        shrink in 0.1f32..1.0,
    ) {
        let p = class_conditional_means(&z, &labels, 2).unwrap();
        let scaled = Matrix::from_vec(z.rows(), z.cols(), z.as_slice().iter().map(|v| v * s).collect()).unwrap();
        let ps = class_conditional_means(&scaled, &labels, 2).unwrap();
        for k in 0..2 {
            let before = dominant_feature(&p, k).unwrap();
            prop_assert_eq!(before, dominant_feature(&ps, k).unwrap());
            // Shrinking a non-dominant latent column cannot promote it.
            let col = col_pick % z.cols();
            if col != before {
                let mut z2 = z.clone();
                for r in 0..z.rows() {
                    z2.set(r, col, z.get(r, col) * shrink).unwrap();
                }
                let p2 = class_conditional_means(&z2, &labels, 2).unwrap();
                prop_assert_eq!(before, dominant_feature(&p2, k).unwrap());
            }
        }
    }
}
