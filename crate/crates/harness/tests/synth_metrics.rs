//! Synthetic corpora and evaluation metrics.

use std::collections::{HashMap, HashSet};

use harness::metrics::{bleu, style_marker_accuracy};
use harness::synth::{generate, read_corpora, write_corpora, SyntheticTaskSpec, FILES};
use proptest::prelude::*;

#[test]
fn same_seed_writes_identical_files() {
    let spec = SyntheticTaskSpec {
        general_train: 300,
        custom_train: 100,
        ..SyntheticTaskSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpora(&generate(&spec).unwrap(), a.path()).unwrap();
    write_corpora(&generate(&spec).unwrap(), b.path()).unwrap();
    for f in FILES {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_corpora(a.path()).unwrap(), generate(&spec).unwrap());
}

#[test]
fn zero_rate_gives_the_neutral_mapping() {
    let spec = SyntheticTaskSpec {
        style_rate: 0.0,
        general_style_rate: 0.0,
        general_train: 500,
        ..SyntheticTaskSpec::default()
    };
    let c = generate(&spec).unwrap();
    let styled = c.style_ids();
    let mut map = HashMap::new();
    for p in c.general_train.iter().chain(&c.custom_train).chain(&c.custom_valid).chain(&c.custom_test) {
        assert_eq!(p.src.len(), p.tgt.len());
        for (&s, &t) in p.src.iter().zip(&p.tgt) {
            assert!(!styled.contains(&t));
            assert_eq!(*map.entry(s).or_insert(t), t, "source {s} maps to two targets");
        }
    }
}

#[test]
fn half_rate_is_observed_within_binomial_bound() {
    let spec = SyntheticTaskSpec {
        style_rate: 0.5,
        general_train: 1,
        custom_train: 8000,
        ..SyntheticTaskSpec::default()
    };
    let c = generate(&spec).unwrap();
    let (neutral, styled): (HashSet<u32>, HashSet<u32>) = (c.lexicon.iter().map(|l| l.0).collect(), c.style_ids());
    let (mut eligible, mut hits) = (0usize, 0usize);
    for t in c.custom_train.iter().flat_map(|p| &p.tgt) {
        if styled.contains(t) {
            hits += 1;
            eligible += 1;
        } else if neutral.contains(t) {
            eligible += 1;
        }
    }
    assert!(eligible >= 10_000, "only {eligible} eligible tokens");
    let rate = hits as f64 / eligible as f64;
    assert!((rate - 0.5).abs() <= 0.02, "observed {rate}");
}

#[test]
fn style_accuracy_ten_sentence_hand_count() {
    // Style ids are 100 and 101. Compared reference style positions and
    // whether the aligned hypothesis token is styled:
    let refs: Vec<Vec<u32>> = vec![
        vec![100, 5, 6],      // pos 0: hyp 100 -> hit
        vec![5, 101],         // pos 1: hyp 7 -> miss
        vec![100, 101],       // pos 0: 101 hit; pos 1: 100 hit
        vec![5, 6, 7],        // none
        vec![101],            // hyp empty: nothing compared
        vec![5, 100, 6, 101], // pos 1: hit; pos 3 beyond hyp, not compared
        vec![7],              // none
        vec![100, 100],       // pos 0: miss; pos 1: hit
        vec![8, 9, 101],      // pos 2: hit
        vec![101, 5],         // pos 0: miss
    ];
    let hyps: Vec<Vec<u32>> = vec![
        vec![100, 5, 6],
        vec![5, 7],
        vec![101, 100],
        vec![100, 6, 7],
        vec![],
        vec![5, 101, 6],
        vec![7],
        vec![5, 101],
        vec![8, 9, 100],
        vec![5, 101],
    ];
    let styled: HashSet<u32> = [100, 101].into();
    // 9 compared style positions, 6 hits.
    assert_eq!(style_marker_accuracy(&hyps, &refs, &styled), 6.0 / 9.0);
}

#[test]
fn bleu_hand_computed_case() {
    let h = vec![vec!["a", "b", "c", "d"]];
    let r = vec![vec!["a", "b", "c", "e"]];
    // p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1), no brevity penalty.
    let want = 100.0 * (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((bleu(&h, &r).unwrap() - want).abs() < 1e-6);
}

proptest! {
    #[test]
    fn metrics_stay_in_range(
        refs in prop::collection::vec(prop::collection::vec(0u32..8, 1..8), 1..6),
        noise in prop::collection::vec(prop::collection::vec(0u32..8, 0..8), 6),
    ) {
        let hyps: Vec<Vec<u32>> = noise.into_iter().take(refs.len()).collect();
        let styled: HashSet<u32> = [0, 1].into();
        let b = bleu(&hyps, &refs).unwrap();
        let s = style_marker_accuracy(&hyps, &refs, &styled);
        prop_assert!((0.0..=100.0).contains(&b));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    }
}
