mod common;

use common::{derivative, focal_from_probability};
use mpstream_core::loss::{batch_loss, cross_entropy, focal_loss, focal_loss_grad, FocalParams};
use proptest::prelude::*;

fn params(alpha: f64, gamma: f64) -> FocalParams {
    FocalParams {
        alpha,
        gamma,
        class_weighted: false,
    }
}

#[test]
fn gradient_matches_five_point_difference_on_a_grid() {
    let mut worst: f64 = 0.0;
    for &gamma in &[0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
        for &alpha in &[0.25, 0.5, 1.0] {
            let p = params(alpha, gamma);
            for i in -40..=40 {
                let x = i as f64 * 0.25;
                for y in [1.0, -1.0] {
                    let a = focal_loss_grad(x, y, &p).unwrap();
                    let n = derivative(|t| focal_loss(t, y, &p).unwrap(), x, 1e-3);
                    worst = worst.max((a - n).abs() / a.abs().max(1.0));
                }
            }
        }
    }
    assert!(worst <= 1e-8, "worst relative error {worst:e}");
}

#[test]
fn agrees_with_the_probability_form() {
    for &gamma in &[0.0, 1.5, 2.0] {
        let p = params(0.5, gamma);
        for i in -60..=60 {
            let x = i as f64 * 0.25;
            for y in [1.0, -1.0] {
                let a = focal_loss(x, y, &p).unwrap();
                let b = focal_from_probability(x, y, 0.5, gamma);
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "x {x} y {y}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn gamma_zero_alpha_one_is_cross_entropy() {
    let p = params(1.0, 0.0);
    for i in 0..=6000 {
        let x = -30.0 + i as f64 * 0.01;
        for y in [1.0, -1.0] {
            let d = (focal_loss(x, y, &p).unwrap() - cross_entropy(x, y).unwrap()).abs();
            assert!(d <= 1e-12, "x {x}: {d:e}");
        }
    }
}

#[test]
fn dominance_and_focusing_on_ten_thousand_points() {
    let gammas = [0.0, 0.5, 1.0, 1.5, 2.0, 5.0];
    for i in 0..5000 {
        let x = -25.0 + i as f64 * 0.01;
        for y in [1.0, -1.0] {
            let ce = cross_entropy(x, y).unwrap();
            let mut prev = f64::INFINITY;
            for &g in &gammas {
                let fl = focal_loss(x, y, &params(0.5, g)).unwrap();
                assert!(fl <= 0.5 * ce, "dominance at x {x} gamma {g}");
                assert!(fl <= prev, "focusing at x {x} gamma {g}");
                prev = fl;
            }
        }
    }
}

#[test]
fn batch_gradient_is_mean_of_pointwise_gradients() {
    let p = FocalParams::default();
    let logits = [-3.0, -0.5, 0.0, 0.7, 4.0];
    let labels = [1.0, -1.0, 1.0, -1.0, 1.0];
    let (mean, grads) = batch_loss(&logits, &labels, &p).unwrap();
    let expect: f64 = logits.iter().zip(&labels).map(|(&x, &y)| focal_loss(x, y, &p).unwrap()).sum::<f64>() / 5.0;
    assert!((mean - expect).abs() < 1e-15);
    for i in 0..5 {
        let g = focal_loss_grad(logits[i], labels[i], &p).unwrap() / 5.0;
        assert!((grads[i] - g).abs() < 1e-16);
    }
}

proptest! {
    #[test]
    fn loss_is_finite_and_nonnegative(x in -700.0f64..700.0, pos in any::<bool>(), gamma in 0.0f64..5.0, alpha in 0.01f64..1.0) {
        let y = if pos { 1.0 } else { -1.0 };
        let p = params(alpha, gamma);
        let l = focal_loss(x, y, &p).unwrap();
        let g = focal_loss_grad(x, y, &p).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(g.is_finite());
        // The gradient always pushes the logit towards the label.
        prop_assert!(g * y <= 0.0);
    }

    #[test]
    fn non_finite_logits_are_rejected(pos in any::<bool>()) {
        let y = if pos { 1.0 } else { -1.0 };
        prop_assert!(focal_loss(f64::NAN, y, &FocalParams::default()).is_err());
        prop_assert!(focal_loss(f64::INFINITY, y, &FocalParams::default()).is_err());
    }
}
