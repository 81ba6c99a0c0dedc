//! Algebraic properties of the metrics.

use proptest::prelude::*;
use tokenhance::metrics::{cosine_similarity, edit_counts, word_error_rate, DecodeMode, EvalRecord, EvalReport};

fn words() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..5, 0..14)
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in words(), b in words(), c in words()) {
        let d = |x: &[u8], y: &[u8]| edit_counts(x, y).total();
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn edit_counts_account_for_both_lengths(a in words(), b in words()) {
        let e = edit_counts(&a, &b);
        // every reference word is kept, substituted or deleted
        prop_assert!(e.substitutions + e.deletions <= a.len());
        prop_assert_eq!(a.len() - e.deletions + e.insertions, b.len());
    }

    #[test]
    fn wer_is_zero_only_for_identical_sequences(a in words(), b in words()) {
        prop_assume!(!a.is_empty());
        let wer = word_error_rate(&a, &b).unwrap();
        prop_assert!(wer >= 0.0);
        prop_assert_eq!(wer == 0.0, a == b);
    }

    #[test]
    fn cosine_is_bounded_and_scale_invariant(
        (a, b) in (1usize..24).prop_flat_map(|n| (vector(n), vector(n))),
        s in 0.1f64..50.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - c).abs() < 1e-12);
        prop_assert!((cosine_similarity(&a, &b).unwrap() - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_are_order_invariant(
        accs in proptest::collection::vec((0usize..4, 0.0f64..1.0, proptest::bool::ANY), 1..30),
    ) {
        let records: Vec<EvalRecord> = accs
            .iter()
            .enumerate()
            .map(|(i, &(m, acc, exact))| EvalRecord {
                id: format!("u{i}"),
                mode: DecodeMode::ALL[m],
                dwer: 1.0 - acc,
                cossim: acc,
                token_acc: acc,
                exact_match: exact,
                dnsmos: None,
            })
            .collect();
        let forward = EvalReport::new(records.clone());
        let backward = EvalReport::new(records.into_iter().rev().collect());
        prop_assert_eq!(forward.aggregates.len(), backward.aggregates.len());
        for (x, y) in forward.aggregates.iter().zip(&backward.aggregates) {
            prop_assert_eq!(x.mode, y.mode);
            prop_assert_eq!(x.count, y.count);
            prop_assert!((x.token_acc - y.token_acc).abs() < 1e-12);
            prop_assert!((x.sequence_acc - y.sequence_acc).abs() < 1e-12);
            prop_assert!(x.dnsmos.is_none());
        }
    }
}
