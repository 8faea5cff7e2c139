mod common;

use common::{auc_by_pairs, rng, tied_instance};
use mpstream_core::metrics::{confusion, evaluate, roc_auc, table_csv, write_table, MetricRow, TABLE_HEADER};
use proptest::prelude::*;

#[test]
fn grouped_trapezoid_equals_pair_counting_exactly() {
    let mut r = rng(11);
    for _ in 0..200 {
        let (s, y) = tied_instance(&mut r, 50);
        assert_eq!(roc_auc(&s, &y).unwrap().auc, auc_by_pairs(&s, &y), "{s:?} {y:?}");
    }
}

#[test]
fn all_tied_scores_give_one_half() {
    let y = [true, false, false, true, false];
    assert_eq!(roc_auc(&[0.3; 5], &y).unwrap().auc, 0.5);
}

#[test]
fn single_class_has_no_auc() {
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    let e = evaluate(&[0.1, 0.9], &[false, false]).unwrap();
    assert_eq!(e.auc, None);
    assert_eq!(e.accuracy, Some(0.5));
}

#[test]
fn threshold_is_inclusive() {
    let c = confusion(&[0.5, 0.49], &[true, false], 0.5).unwrap();
    assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
}

#[test]
fn table_has_one_line_per_row() {
    let e = evaluate(&[0.1, 0.9, 0.6], &[false, true, false]).unwrap();
    let row = |k| MetricRow {
        model: "42x42x1".into(),
        fold: Some(k),
        training: e.clone(),
        validation: e.clone(),
        findings: e.clone(),
    };
    let rows: Vec<MetricRow> = (0..5).map(row).collect();
    let csv = table_csv(&rows);
    assert!(csv.starts_with(TABLE_HEADER));
    assert_eq!(csv.lines().count(), 6);

    let dir = tempfile::tempdir().unwrap();
    write_table(dir.path(), "t", "title", &rows).unwrap();
    assert!(dir.path().join("t.csv").is_file());
    assert!(dir.path().join("t.svg").is_file());
    assert_eq!(std::fs::read_dir(dir.path().join("roc")).unwrap().count(), 5);
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60)
        .prop_flat_map(|n| (prop::collection::vec(0u8..10, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
        .prop_map(|(s, y)| (s.into_iter().map(|v| v as f64 / 10.0).collect(), y))
}

proptest! {
    #[test]
    fn equals_pair_counting((s, y) in instance()) {
        prop_assert_eq!(roc_auc(&s, &y).unwrap().auc, auc_by_pairs(&s, &y));
    }

    #[test]
    fn invariant_under_increasing_maps((s, y) in instance(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        let a = roc_auc(&s, &y).unwrap().auc;
        let t: Vec<f64> = s.iter().map(|v| (k * v + c).exp()).collect();
        prop_assert_eq!(roc_auc(&t, &y).unwrap().auc, a);
    }

    #[test]
    fn swapping_classes_complements((s, y) in instance()) {
        let a = roc_auc(&s, &y).unwrap().auc;
        let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
        prop_assert!((roc_auc(&s, &flipped).unwrap().auc - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn curve_is_monotone_from_origin_to_corner((s, y) in instance()) {
        let c = roc_auc(&s, &y).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        prop_assert_eq!((first.tpr, first.fpr), (0.0, 0.0));
        prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            prop_assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
        }
    }
}
