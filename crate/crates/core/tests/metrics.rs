mod common;

use common::*;
use gsp_core::metrics::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn psnr_analytic_cases() {
    // constant error 0.1 on a unit range: mse 0.01, psnr 20 dB
    let a = Array2::from_elem((8, 8), 0.5);
    let b = Array2::from_elem((8, 8), 0.6);
    assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-6);
    // constant error 0.5: mse 0.25, psnr 10 log10 4
    let c = Array2::from_elem((8, 8), 0.75);
    let d = Array2::from_elem((8, 8), 0.25);
    let v = psnr(c.view(), d.view(), 1.0).unwrap();
    assert!((v - 6.0206).abs() < 1e-6);
    assert!((v - 10.0 * 4f64.log10()).abs() < 1e-6);
    // 8-bit scale
    let e = Array2::from_elem((4, 4), 10.0);
    let f = Array2::from_elem((4, 4), 12.55);
    assert!((psnr(e.view(), f.view(), 255.0).unwrap() - 40.0).abs() < 1e-6);
}

#[test]
fn psnr_of_identical_images_is_an_error() {
    let a = Array2::from_elem((4, 4), 0.3);
    assert!(psnr(a.view(), a.view(), 1.0).is_err());
    assert!(mse(a.view(), Array2::zeros((3, 4)).view()).is_err());
}

#[test]
fn ssim_is_exactly_one_on_identical_images() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Array2::from_shape_fn((32, 32), |_| r.random::<f64>());
        assert_eq!(ssim(a.view(), a.view(), 1.0).unwrap(), 1.0);
    }
}

#[test]
fn ssim_matches_direct_window_reference() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let a = Array2::from_shape_fn((32, 32), |_| r.random::<f64>());
        let b = Array2::from_shape_fn((32, 32), |(i, j)| (a[[i, j]] + r.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let fast = ssim(a.view(), b.view(), 1.0).unwrap();
        let slow = ssim_windows(&rows(&a), &rows(&b), 1.0);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_rejects_images_smaller_than_the_window() {
    let a = Array2::zeros((10, 10));
    assert!(ssim(a.view(), a.view(), 1.0).is_err());
}

#[test]
fn aggregate_uses_population_std() {
    let (m, s) = aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    assert!(aggregate(&[]).is_err());
}

#[test]
fn synthesis_report_maps_to_unit_range() {
    let syn = Array2::from_elem((16, 16), 0.0f32);
    let real = Array2::from_elem((16, 16), 0.2f32);
    let r = SynthesisReport::from_pairs("T1->T2", [(syn.view(), real.view())], 1.0).unwrap();
    // [-1, 1] difference 0.2 is 0.1 on [0, 1]
    assert!((r.mse[0] - 0.01).abs() < 1e-9);
    assert!((r.psnr_summary.mean - 20.0).abs() < 1e-5);
    assert_eq!(r.psnr_summary.std, 0.0);
    let table = r.to_table();
    assert!(table.contains("PSNR") && table.contains("SSIM") && table.contains("T1->T2"));
    assert_eq!(r.to_csv().lines().count(), 2);
}

#[test]
fn weighted_metrics_match_brute_force_counts() {
    for seed in 0..10 {
        let k = 2 + (seed as usize % 3);
        let y_true = random_labels(40, k, seed);
        let y_pred = random_labels(40, k, seed + 1000);
        let got = classification_report(&y_true, &y_pred, k).unwrap();
        let want = weighted_brute(&y_true, &y_pred, k);
        assert_eq!(got.confusion, want.confusion);
        assert!((got.accuracy - want.accuracy).abs() < 1e-12);
        assert!((got.precision - want.precision).abs() < 1e-12);
        assert!((got.recall - want.recall).abs() < 1e-12);
        assert!((got.f1 - want.f1).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_confusion() {
    // class 0: tp 2 fp 1 fn 0; class 1: tp 1 fp 0 fn 1
    let r = classification_report(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap();
    assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
    assert_eq!(r.accuracy, 0.75);
    let p = (2.0 * (2.0 / 3.0) + 2.0 * 1.0) / 4.0;
    assert!((r.precision - p).abs() < 1e-12);
    assert!((r.recall - 0.75).abs() < 1e-12);
    let f0 = 2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0);
    let f1 = 2.0 * 0.5 / 1.5;
    assert!((r.f1 - (2.0 * f0 + 2.0 * f1) / 4.0).abs() < 1e-12);
    assert!(r.to_table("T1").contains("75.00"));
}

#[test]
fn bad_labels_are_rejected() {
    assert!(classification_report(&[0, 3], &[0, 1], 3).is_err());
    assert!(classification_report(&[0], &[0, 1], 3).is_err());
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = Array2::from_shape_fn((12, 12), |_| r.random::<f64>());
        let b = Array2::from_shape_fn((12, 12), |_| r.random::<f64>());
        let ab = ssim(a.view(), b.view(), 1.0).unwrap();
        let ba = ssim(b.view(), a.view(), 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 && ab >= -1.0);
    }

    #[test]
    fn perfect_predictions_score_one(seed in 0u64..10_000, k in 2usize..6) {
        let y = random_labels(30, k, seed);
        let r = classification_report(&y, &y, k).unwrap();
        prop_assert_eq!(r.accuracy, 1.0);
        prop_assert!((r.f1 - 1.0).abs() < 1e-12);
    }
}
