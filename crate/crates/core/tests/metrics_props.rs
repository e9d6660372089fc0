mod common;

use std::collections::BTreeSet;

use common::*;
use privcheck::engine::RankedPrediction;
use privcheck::metrics::{
    accuracy_at_k, classification_report, macro_metrics, multilabel_accuracy, ranking_report,
    Granularity, RankedInstance, Universe,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_oracle(set in eval_set()) {
        prop_assert_eq!(check_eval_set(&set), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn acc_at_k_is_monotone(set in eval_set()) {
        let xs: Vec<_> = set.ranked.iter().map(|(p, g)| ranked(p, g)).collect();
        let r = ranking_report(&xs, Granularity::File).unwrap();
        let v: Vec<f64> = r.acc_at.values().copied().collect();
        prop_assert_eq!(v.len(), 5);
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]), "{:?}", v);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn acc_at_k_ignores_instance_order(set in eval_set(), seed in any::<u64>()) {
        let xs: Vec<_> = set.ranked.iter().map(|(p, g)| ranked(p, g)).collect();
        let mut shuffled = xs.clone();
        let len = shuffled.len();
        shuffled.rotate_left((seed as usize) % len);
        if seed % 2 == 0 {
            shuffled.reverse();
        }
        for k in 1..=5 {
            prop_assert_eq!(
                accuracy_at_k(&xs, k, Granularity::File).unwrap(),
                accuracy_at_k(&shuffled, k, Granularity::File).unwrap()
            );
        }
    }

    #[test]
    fn truth_first_scores_one(set in eval_set()) {
        let xs: Vec<RankedInstance> = set
            .ranked
            .iter()
            .map(|(p, g)| {
                let mut pred: Vec<u32> = g.iter().copied().collect();
                pred.extend(p.iter().copied());
                RankedInstance {
                    granularity: Granularity::Module,
                    prediction: RankedPrediction::from_ordered(pred),
                    ground_truth: g.clone(),
                }
            })
            .collect();
        prop_assert_eq!(accuracy_at_k(&xs, 1, Granularity::Module).unwrap(), 1.0);
    }

    #[test]
    fn macro_bounded_and_perfect(set in eval_set()) {
        let xs: Vec<_> = set.labeled.iter().map(|(p, g)| labeled(p, g)).collect();
        let (p, r, f) = macro_metrics(&xs, &set.universe).unwrap();
        for v in [p, r, f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let perfect: Vec<_> = set.labeled.iter().map(|(_, g)| labeled(g, g)).collect();
        prop_assert_eq!(multilabel_accuracy(&perfect, &set.universe).unwrap(), 1.0);
    }
}

#[test]
fn worked_fixtures() {
    let gt: BTreeSet<u32> = [5].into();
    let xs = [
        ranked(&[5], &gt),
        ranked(&[1, 2, 5], &gt),
        ranked(&[1], &gt),
    ];
    assert_eq!(accuracy_at_k(&xs, 1, Granularity::File).unwrap(), 1.0 / 3.0);
    assert_eq!(accuracy_at_k(&xs, 3, Granularity::File).unwrap(), 2.0 / 3.0);

    let u: BTreeSet<u32> = [5, 6].into();
    let ls = [
        labeled(&[5, 6].into(), &[5].into()),
        labeled(&[5].into(), &[5, 6].into()),
    ];
    assert_eq!(macro_metrics(&ls, &u).unwrap(), (0.5, 0.5, 0.5));
    assert_eq!(multilabel_accuracy(&ls, &u).unwrap(), 0.5);
    let report = classification_report(&ls, &Universe::GroundTruth).unwrap();
    assert_eq!(report.article_universe, vec![5, 6]);
    assert_eq!(report.macro_f1, 0.5);
}

#[test]
fn oracle_agrees_on_hand_computed_case() {
    // tp=1 fp=1 fn=0 for 5; tp=0 fp=0 fn=1 for 6
    let set = [
        (BTreeSet::from([5]), BTreeSet::from([5, 6])),
        (BTreeSet::from([5]), BTreeSet::new()),
    ];
    let (p, r, f) = oracle_macro(&set, &[5, 6].into());
    assert_eq!((p, r), (0.25, 0.5));
    assert!((f - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(oracle_multilabel(&set, &[5, 6].into()), 0.5);
}
