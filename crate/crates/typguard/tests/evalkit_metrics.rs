use proptest::prelude::*;
use typguard::evalkit::{auprc, auroc, evaluate, fpr_at_95_tpr, max_f1, LabeledScores};

/// Scores on a coarse grid so ties are frequent.
fn score_set(max: usize) -> impl Strategy<Value = LabeledScores> {
    let score = prop_oneof![(-20i32..20).prop_map(|x| x as f64 / 4.0), -1e3f64..1e3];
    (prop::collection::vec(score.clone(), 1..max), prop::collection::vec(score, 1..max))
        .prop_map(|(id, ood)| LabeledScores::new(id, ood).unwrap())
}

fn pairwise_auroc(s: &LabeledScores) -> f64 {
    let mut wins = 0.0;
    for &o in &s.ood_scores {
        for &i in &s.id_scores {
            wins += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (s.ood_scores.len() * s.id_scores.len()) as f64
}

/// Every candidate threshold, keeping the largest with TPR ≥ 95%.
fn enumerated_fpr95(s: &LabeledScores) -> f64 {
    let n_ood = s.ood_scores.len();
    let best = s
        .ood_scores
        .iter()
        .chain(&s.id_scores)
        .copied()
        .filter(|&t| 100 * s.ood_scores.iter().filter(|&&o| o >= t).count() >= 95 * n_ood)
        .fold(f64::NEG_INFINITY, f64::max);
    s.id_scores.iter().filter(|&&x| x >= best).count() as f64 / s.id_scores.len() as f64
}

fn transformed(s: &LabeledScores, f: impl Fn(f64) -> f64) -> LabeledScores {
    LabeledScores::new(s.id_scores.iter().map(|&x| f(x)).collect(), s.ood_scores.iter().map(|&x| f(x)).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auroc_matches_pairwise_count(s in score_set(500)) {
        let fast = auroc(&s).unwrap();
        prop_assert!((fast - pairwise_auroc(&s)).abs() <= 1e-12);
    }

    #[test]
    fn fpr95_matches_enumeration(s in score_set(500)) {
        prop_assert_eq!(fpr_at_95_tpr(&s).unwrap(), enumerated_fpr95(&s));
    }

    #[test]
    fn metrics_ignore_increasing_transforms(s in score_set(200), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = evaluate(&s).unwrap();
        for t in [transformed(&s, |x| a * x + b), transformed(&s, |x| (x / 100.0).atan()), transformed(&s, |x| x.powi(3))] {
            let r = evaluate(&t).unwrap();
            prop_assert!((r.auroc - base.auroc).abs() <= 1e-12);
            prop_assert_eq!(r.fpr95, base.fpr95);
            prop_assert!((r.auprc - base.auprc).abs() <= 1e-12);
            prop_assert!((r.max_f1 - base.max_f1).abs() <= 1e-12);
        }
    }

    #[test]
    fn negation_flips_auroc(s in score_set(200)) {
        let neg = transformed(&s, |x| -x);
        prop_assert!((auroc(&neg).unwrap() - (1.0 - auroc(&s).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(s in score_set(100)) {
        let r = evaluate(&s).unwrap();
        for v in [r.auroc, r.fpr95, r.auprc, r.max_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn hand_computed_examples() {
    let s = LabeledScores::new(vec![0.1, 0.4, 0.35, 0.8], vec![0.9, 0.4, 0.7]).unwrap();
    // 9 of 12 pairs won, one tie at 0.4.
    assert!((auroc(&s).unwrap() - 9.5 / 12.0).abs() < 1e-15);
    // 95% of 3 OOD scores needs all three: threshold 0.4 flags 0.4 and 0.8.
    assert_eq!(fpr_at_95_tpr(&s).unwrap(), 0.5);
    let separated = LabeledScores::new(vec![0.0, 0.1], vec![0.5, 0.6]).unwrap();
    assert_eq!(auroc(&separated).unwrap(), 1.0);
    assert_eq!(auprc(&separated).unwrap(), 1.0);
    assert_eq!(max_f1(&separated).unwrap(), (1.0, 0.5));
    assert!(LabeledScores::new(vec![], vec![1.0]).is_err());
    assert!(LabeledScores::new(vec![f64::NAN], vec![1.0]).is_err());
}
