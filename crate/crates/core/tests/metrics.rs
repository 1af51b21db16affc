mod common;

use common::oracles::{auc_pairwise, eer_sweep, random_scores};
use dmhsa::eval::{auc, classification_metrics, cosine_score, eer, MetricsReport};
use proptest::prelude::*;

pub const INTERP_TOL: f64 = 1e-9;
pub const AUC_TOL: f64 = 1e-9;

#[test]
fn eer_matches_the_threshold_sweep_oracle() {
    let mut rng = common::rng(10);
    let (mut exact, mut interpolated) = (0, 0);
    for i in 0..1000 {
        let s = random_scores(&mut rng, i % 2 == 0);
        let (want, on_point) = eer_sweep(&s);
        let got = eer(&s).unwrap().0;
        if on_point {
            assert_eq!(got, want, "{s:?}");
            exact += 1;
        } else {
            assert!((got - want).abs() <= INTERP_TOL, "{got} vs {want} for {s:?}");
            interpolated += 1;
        }
    }
    assert!(exact > 50 && interpolated > 50);
}

#[test]
fn auc_matches_the_pairwise_oracle() {
    let mut rng = common::rng(11);
    for i in 0..1000 {
        let s = random_scores(&mut rng, i % 2 == 0);
        let (a, b) = (auc(&s).unwrap(), auc_pairwise(&s));
        assert!((a - b).abs() <= AUC_TOL, "{a} vs {b} for {s:?}");
    }
}

#[test]
fn hand_built_cases() {
    let s = [(0.9, true), (0.4, true), (0.8, false), (0.1, false)];
    assert_eq!(eer(&s).unwrap().0, 0.5);
    assert_eq!(eer_sweep(&s), (0.5, true));
    assert_eq!(auc(&s).unwrap(), 0.75);
    let report = MetricsReport::verification(&s).unwrap();
    assert_eq!(report.confusion.iter().flatten().sum::<usize>(), 4);
    assert!(report.to_kv().starts_with("eer=0.500000\n"));
}

fn tie_free(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-1e3f64..1e3, any::<bool>()), len)
        .prop_filter("both classes", |v| v.iter().any(|s| s.1) && v.iter().any(|s| !s.1))
        .prop_filter("distinct scores", |v| {
            let mut s: Vec<f64> = v.iter().map(|x| x.0).collect();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|w| w[0] != w[1])
        })
}

proptest! {
    #[test]
    fn eer_is_invariant_under_monotone_maps(s in tie_free(2..50)) {
        let mapped: Vec<(f64, bool)> = s.iter().map(|&(x, t)| ((x / 500.0).exp() * 3.0 - 1.0, t)).collect();
        prop_assert_eq!(eer(&s).unwrap().0, eer(&mapped).unwrap().0);
        prop_assert_eq!(auc(&s).unwrap(), auc(&mapped).unwrap());
    }

    #[test]
    fn reversing_labels_reflects_eer(s in tie_free(2..50)) {
        let flipped: Vec<(f64, bool)> = s.iter().map(|&(x, t)| (x, !t)).collect();
        let (a, b) = (eer(&s).unwrap().0, eer(&flipped).unwrap().0);
        prop_assert!((a + b - 1.0).abs() < 1e-12, "{} + {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cosine_is_symmetric(a in prop::collection::vec(-10.0f64..10.0, 1..32), seed: u64) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 64)) & 1) as f64 - 0.5 + i as f64).collect();
        prop_assume!(a.iter().any(|&x| x != 0.0));
        let (ab, ba) = (cosine_score(&a, &b).unwrap(), cosine_score(&b, &a).unwrap());
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn classification_metrics_ignore_sample_order(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), rot in 0usize..60) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (rp, rl): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
        let a = classification_metrics(&p, &l, 4).unwrap();
        let b = classification_metrics(&rp, &rl, 4).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((0.0..=1.0).contains(&a.macro_f1));
    }

    #[test]
    fn duplicated_trials_give_identical_metrics(s in tie_free(2..30)) {
        let doubled: Vec<(f64, bool)> = s.iter().chain(&s).copied().collect();
        prop_assert_eq!(eer(&s).unwrap().0, eer(&doubled).unwrap().0);
        prop_assert!((auc(&s).unwrap() - auc(&doubled).unwrap()).abs() < 1e-12);
    }
}
