mod common;

use comloc::eval::{auc, confusion_metrics, ConfusionCounts};
use comloc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn auc_matches_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let scores = common::random_scores(&mut rng);
        let expected = common::pairwise_auc(&scores).unwrap();
        let got = auc(&scores).unwrap();
        assert!((got - expected).abs() <= 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn auc_needs_both_classes() {
    assert!(matches!(auc(&[(0.3, true), (0.9, true)]), Err(Error::UndefinedAuc)));
    assert!(matches!(auc(&[]), Err(Error::UndefinedAuc)));
}

#[test]
fn constant_classifier_on_balanced_pairs() {
    let labels = (0..500).flat_map(|_| [true, false]);
    let c = ConfusionCounts::from_predictions(labels.clone().map(|y| (true, y)));
    assert_eq!(confusion_metrics(&c).unwrap().accuracy, 0.5);
    let c = ConfusionCounts::from_predictions(labels.clone().map(|y| (false, y)));
    assert_eq!(confusion_metrics(&c).unwrap().accuracy, 0.5);
    let scored: Vec<(f64, bool)> = labels.map(|y| (0.7, y)).collect();
    assert_eq!(auc(&scored).unwrap(), 0.5);
}
