mod common;

use common::*;
use mosbench::metrics::{aggregate_by_system, evaluate, mse, srcc, Aggregation, Correlation};
use proptest::prelude::*;

#[test]
fn tied_ranks_match_counting_oracle() {
    let x = [1.0, 2.0, 2.0, 3.0];
    let y = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(oracle_ranks(&x), vec![1.0, 2.5, 2.5, 4.0]);
    let expected = oracle_srcc(&x, &y).unwrap();
    assert!((srcc(&x, &y).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.9486832980505138).abs() < 1e-12);
}

#[test]
fn constant_input_is_undefined() {
    let r = Correlation::from_result(srcc(&[3.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    assert_eq!(r, Correlation::Undefined);
}

#[test]
fn weighting_shifts_system_mse_toward_large_systems() {
    // A has 30 utterances off by 0.1, B has one utterance off by 2.
    let mut preds = vec![3.1; 30];
    let mut labels = vec![3.0; 30];
    let mut systems = vec!["A"; 30];
    preds.push(4.0);
    labels.push(2.0);
    systems.push("B");
    let u = evaluate(&preds, &labels, &systems, Aggregation::Unweighted).unwrap();
    let w = evaluate(&preds, &labels, &systems, Aggregation::Weighted).unwrap();
    let eu = (0.1f64.powi(2) + 4.0) / 2.0;
    let ew = (30.0 * 0.1f64.powi(2) + 4.0) / 31.0;
    assert!((u.system_mse - eu).abs() < 1e-12);
    assert!((w.system_mse - ew).abs() < 1e-12);
    assert!(u.system_mse > w.system_mse);
    assert_eq!(u.system_srcc, w.system_srcc);
    assert_eq!(u.utterance_mse, w.utterance_mse);
}

#[test]
fn three_system_aggregation_oracle() {
    let preds = [1.0, 2.0, 3.0, 4.0, 5.0, 2.5, 3.5];
    let labels = [1.5, 2.5, 2.0, 4.5, 4.0, 3.0, 1.0];
    let systems = ["c", "a", "b", "a", "c", "b", "b"];
    let agg = aggregate_by_system(&preds, &labels, &systems, Aggregation::Unweighted).unwrap();
    assert_eq!(agg.system_ids, ["a", "b", "c"]);
    let p = [3.0, 3.0, 3.0];
    let y = [3.5, 2.0, 2.75];
    for i in 0..3 {
        assert!((agg.preds[i] - p[i]).abs() < 1e-12);
        assert!((agg.labels[i] - y[i]).abs() < 1e-12);
    }
    assert_eq!(agg.counts, [2, 3, 2]);
    assert!((agg.mse() - oracle_mse(&p, &y)).abs() < 1e-12);
}

#[test]
fn mismatched_lengths_rejected() {
    assert!(mse(&[1.0, 2.0], &[1.0]).is_err());
    assert!(srcc(&[1.0], &[1.0]).is_err());
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(1i32..=5).prop_map(f64::from), -50.0..50.0f64], n),
            prop::collection::vec(prop_oneof![(1i32..=5).prop_map(f64::from), -50.0..50.0f64], n),
        )
    })
}

proptest! {
    #[test]
    fn srcc_matches_oracle((x, y) in pairs()) {
        let got = Correlation::from_result(srcc(&x, &y)).unwrap().value();
        match (got, oracle_srcc(&x, &y)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "definedness differs: {:?}", other),
        }
    }

    #[test]
    fn srcc_is_bounded_and_symmetric((x, y) in pairs()) {
        if let (Ok(a), Ok(b)) = (srcc(&x, &y), srcc(&y, &x)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn srcc_invariant_under_monotone_maps((x, y) in pairs()) {
        let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() * 3.0 - 1.0).collect();
        match (srcc(&x, &y), srcc(&tx, &y)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn mse_is_nonnegative_symmetric_and_zero_on_self((x, y) in pairs()) {
        let a = mse(&x, &y).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, mse(&y, &x).unwrap());
        prop_assert_eq!(mse(&x, &x).unwrap(), 0.0);
        prop_assert!((a - oracle_mse(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn weighting_never_changes_system_srcc(
        (x, y) in pairs(),
        ids in prop::collection::vec(0usize..5, 40),
    ) {
        let systems: Vec<String> = (0..x.len()).map(|i| format!("s{}", ids[i])).collect();
        let u = evaluate(&x, &y, &systems, Aggregation::Unweighted).unwrap();
        let w = evaluate(&x, &y, &systems, Aggregation::Weighted).unwrap();
        prop_assert_eq!(u.system_srcc, w.system_srcc);
        prop_assert_eq!(u.n_systems, w.n_systems);
    }
}
