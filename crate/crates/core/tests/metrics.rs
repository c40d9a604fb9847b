mod oracles;

use ggt_core::metrics::{auroc, dsd, Separation};
use ggt_core::rng;
use oracles::pairwise_auroc;
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn two_hundred_random_sets_match_pairwise() {
    let mut r = rng::seeded(2024);
    for set in 0..200 {
        // Every other set draws from a handful of values to force ties.
        let levels = if set % 2 == 0 { 5 } else { 1_000_000 };
        let (n, m) = (r.random_range(1..=100), r.random_range(1..=100));
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect()
        };
        let (normal, adv) = (draw(n), draw(m));
        assert_eq!(auroc(&normal, &adv).unwrap(), pairwise_auroc(&normal, &adv), "set {set}");
    }
}

#[test]
fn dsd_sentinel() {
    assert_eq!(dsd(&[0.0, 0.0], &[0.5]).unwrap(), Separation::Unbounded);
    assert_eq!(dsd(&[0.0], &[0.0]).unwrap(), Separation::Ratio(1.0));
    assert_eq!(dsd(&[0.1, 0.3], &[0.4]).unwrap(), Separation::Ratio(2.0));
}

proptest! {
    #[test]
    fn auroc_matches_pairwise(
        normal in prop::collection::vec(0u8..8, 1..100),
        adv in prop::collection::vec(0u8..8, 1..100),
    ) {
        let normal: Vec<f64> = normal.into_iter().map(f64::from).collect();
        let adv: Vec<f64> = adv.into_iter().map(f64::from).collect();
        prop_assert_eq!(auroc(&normal, &adv).unwrap(), pairwise_auroc(&normal, &adv));
    }

    #[test]
    fn auroc_in_unit_interval(
        normal in prop::collection::vec(0.0f64..1.0, 1..50),
        adv in prop::collection::vec(0.0f64..1.0, 1..50),
    ) {
        let a = auroc(&normal, &adv).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
