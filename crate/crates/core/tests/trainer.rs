use mpstream_autodiff::{Parameter, Tensor};
use mpstream_core::trainer::{make_folds, sgd_nesterov_step, EarlyStopping, JobFilter, StreamJob, TrainConfig, Verdict};
use mpstream_core::patchgen::{Family, GEOMETRIES};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn cfg(lr: f64, momentum: f64, wd: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
        ..Default::default()
    }
}

#[test]
fn three_nesterov_steps_on_half_square() {
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let mut p = vec![Parameter::new("w", Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap())];
    // Hand-rolled reference: loss w^2 / 2 gives gradient w.
    let mut w = [1.0f64, -2.0];
    let mut v = [0.0f64; 2];
    for _ in 0..3 {
        let g = Some(p[0].value.clone());
        sgd_nesterov_step(&mut p, &[g], &cfg(lr, mu, wd)).unwrap();
        for i in 0..2 {
            let eff = w[i] + wd * w[i];
            v[i] = mu * v[i] - lr * eff;
            w[i] += mu * v[i] - lr * eff;
        }
    }
    for i in 0..2 {
        assert!((p[0].value.data()[i] - w[i]).abs() <= 1e-12);
    }
    // Closed form for the scalar recurrence, k = lr (1 + wd).
    let k = lr * (1.0 + wd);
    let (mut cw, mut cv) = (1.0f64, 0.0f64);
    for _ in 0..3 {
        let nv = mu * cv - k * cw;
        cw = cw + mu * nv - k * cw;
        cv = nv;
    }
    assert!((p[0].value.data()[0] - cw).abs() <= 1e-12);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let mut p = vec![Parameter::new("w", Tensor::new(vec![3], vec![0.5f64, 1.5, -1.0]).unwrap())];
    let before = p[0].value.clone();
    for _ in 0..5 {
        let g = Some(Tensor::new(vec![3], vec![3.0, -2.0, 1.0]).unwrap());
        sgd_nesterov_step(&mut p, &[g], &cfg(0.0, 0.9, 1e-5)).unwrap();
    }
    assert_eq!(p[0].value, before);
}

#[test]
fn patience_stops_after_twenty_flat_epochs() {
    let mut es = EarlyStopping::new(20);
    let mut stop = None;
    for epoch in 0..200 {
        let loss = if epoch < 10 { 1.0 - epoch as f64 * 0.05 } else { 0.56 };
        if es.observe(epoch, loss) == Verdict::Stop {
            stop = Some(epoch);
            break;
        }
    }
    assert_eq!(stop, Some(29));
    assert_eq!(es.best().unwrap().0, 9);
}

#[test]
fn folds_of_a_hundred_subjects() {
    let subjects: Vec<(String, bool)> = (0..100).map(|i| (format!("S{i:03}"), i % 100 < 23)).collect();
    let folds = make_folds(&subjects, 5, 42).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = BTreeSet::new();
    for f in &folds {
        assert_eq!(f.validation.len(), 20);
        assert_eq!(f.train.len(), 80);
        let pos = f.validation.iter().filter(|s| subjects.iter().any(|(id, p)| id == *s && *p)).count();
        assert!((4..=6).contains(&pos), "fold {} has {pos} positives", f.fold);
        for s in &f.validation {
            assert!(!f.train.contains(s));
            assert!(seen.insert(s.clone()));
        }
    }
    assert_eq!(seen.len(), 100);
    assert_eq!(make_folds(&subjects, 5, 42).unwrap(), folds);
}

#[test]
fn filter_picks_geometry_and_fold() {
    let f = JobFilter::parse("geometry=96,fold=2").unwrap();
    let jobs: Vec<StreamJob> = [Family::Composite]
        .iter()
        .flat_map(|&family| GEOMETRIES.iter().flat_map(move |&geometry| (0..5).map(move |fold| StreamJob { family, geometry, fold })))
        .filter(|j| f.matches(j))
        .collect();
    assert_eq!(jobs.len(), 1);
    assert_eq!(jobs[0].geometry, GEOMETRIES[3]);
    assert!(JobFilter::parse("fold=x").is_err());
    assert!(JobFilter::parse("colour=red").is_err());
}

proptest! {
    #[test]
    fn folds_partition_any_cohort(n in 5usize..80, k in 2usize..6, seed in any::<u64>(), rate in 0.05f64..0.6) {
        let subjects: Vec<(String, bool)> = (0..n).map(|i| (format!("S{i}"), (i as f64) < rate * n as f64)).collect();
        let folds = make_folds(&subjects, k, seed).unwrap();
        let mut all: Vec<String> = folds.iter().flat_map(|f| f.validation.clone()).collect();
        all.sort();
        let mut ids: Vec<String> = subjects.iter().map(|s| s.0.clone()).collect();
        ids.sort();
        prop_assert_eq!(all, ids);
        let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
