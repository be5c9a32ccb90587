mod common;

use std::collections::{BTreeMap, HashSet};

use cat_core::{
    information_gain, plan_balanced_batch, sample_without_replacement, weights_to_probs, BalancedSampler, Tensor,
    WeightTable,
};
use common::TestRng;
use proptest::prelude::*;

/// Probability that successive proportional draws produce `order`.
fn sequence_probability(p: &[f64], order: &[usize]) -> f64 {
    let mut remaining = 1.0;
    let mut prob = 1.0;
    for &i in order {
        prob *= p[i] / remaining;
        remaining -= p[i];
    }
    prob
}

#[test]
fn gain_matches_direct_margin_on_random_rows() {
    let mut r = TestRng(42);
    for _ in 0..200 {
        let k = 2 + r.below(8);
        let logits: Vec<f64> = (0..k).map(|_| r.range(-6.0, 6.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
        let y = r.below(k);
        let other = (0..k).filter(|&j| j != y).map(|j| logp[j]).fold(f64::NEG_INFINITY, f64::max);
        let direct = other - logp[y];
        let got = information_gain(&Tensor::from_rows(&[logp]).unwrap(), &[y]).unwrap();
        assert!((got[0] - direct).abs() <= 1e-12);
    }
}

#[test]
fn ema_update_follows_the_closed_form() {
    let mut t = WeightTable::new(6, 0.25).unwrap();
    t.ema_update(&[4, 1], &[2.0, -1.0], 1).unwrap();
    t.ema_update(&[1], &[3.0], 2).unwrap();
    let w1 = 0.25 * (0.25 * 1.0 - 0.75) + 0.75 * 3.0;
    let w4 = 0.25 * 1.0 + 0.75 * 2.0;
    assert_eq!(t.weights(), &[1.0, w1, 1.0, 1.0, w4, 1.0]);
    assert_eq!(t.last_selected_iter(), &[0, 2, 0, 0, 1, 0]);
}

#[test]
fn ema_update_rejects_bad_selections() {
    let mut t = WeightTable::new(3, 0.5).unwrap();
    assert!(t.ema_update(&[0, 0], &[1.0, 1.0], 1).is_err());
    assert!(t.ema_update(&[3], &[1.0], 1).is_err());
    assert!(t.ema_update(&[1], &[f64::NAN], 1).is_err());
    assert!(t.ema_update(&[1, 2], &[1.0], 1).is_err());
    assert_eq!(t.weights(), &[1.0; 3]);
}

#[test]
fn weight_table_csv_lists_every_index() {
    let mut t = WeightTable::new(3, 0.5).unwrap();
    t.ema_update(&[2], &[0.0], 7).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["index,weight,last_selected_iter", "0,1,0", "1,1,0", "2,0.5,7"]);
}

#[test]
fn ordered_pairs_follow_successive_draw_probabilities() {
    let p = [0.4, 0.3, 0.2, 0.1];
    let draws = 40_000u64;
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for s in 0..draws {
        let pick = sample_without_replacement(&p, 2, s).unwrap();
        assert_ne!(pick[0], pick[1]);
        *counts.entry((pick[0], pick[1])).or_default() += 1;
    }
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                continue;
            }
            let expected = sequence_probability(&p, &[a, b]);
            let seen = *counts.get(&(a, b)).unwrap_or(&0) as f64 / draws as f64;
            assert!((seen - expected).abs() < 0.015, "({a},{b}): {seen} vs {expected}");
        }
    }
}

#[test]
fn zero_probability_items_are_never_drawn_while_support_remains() {
    let p = [0.0, 0.5, 0.0, 0.5];
    for s in 0..500 {
        let mut pick = sample_without_replacement(&p, 2, s).unwrap();
        pick.sort_unstable();
        assert_eq!(pick, [1, 3]);
    }
}

#[test]
fn sampling_errors() {
    assert!(sample_without_replacement(&[0.5, 0.5], 3, 0).is_err());
    assert!(sample_without_replacement(&[0.5, f64::NAN], 1, 0).is_err());
    assert!(sample_without_replacement(&[0.5, -0.1], 1, 0).is_err());
    assert!(weights_to_probs(&[1.0, 2.0], 0.0).is_err());
}

#[test]
fn infinite_temperature_is_uniform_and_large_temperature_nearly_so() {
    let w = [-1.0, 0.0, 1.0, 2.0];
    assert_eq!(weights_to_probs(&w, f64::INFINITY).unwrap(), vec![0.25; 4]);
    for p in weights_to_probs(&w, 1e6).unwrap() {
        assert!((p - 0.25).abs() < 1e-6);
    }
}

#[test]
fn balanced_plan_rejects_empty_classes() {
    let t = WeightTable::new(4, 0.5).unwrap();
    let err = plan_balanced_batch(&t, &[0, 0, 2, 2], 2, 3, 1.0, 0).unwrap_err();
    assert!(err.to_string().contains("class 1"), "{err}");
}

#[test]
fn remainder_goes_to_the_heaviest_classes() {
    // classes 0..3 with 4 members each; class 2 carries the largest weights
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut t = WeightTable::new(12, 0.0).unwrap();
    t.ema_update(&[2, 5, 8, 11], &[4.0; 4], 1).unwrap();
    t.ema_update(&[0], &[2.0], 2).unwrap();
    let plan = plan_balanced_batch(&t, &labels, 5, 3, 1.0, 9).unwrap();
    let q: Vec<usize> = plan.per_class_quota.values().copied().collect();
    assert_eq!(q, [2, 1, 2]);
}

fn class_counts(indices: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in indices {
        c[labels[i]] += 1;
    }
    c
}

proptest! {
    #[test]
    fn gain_is_translation_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = TestRng(seed);
        let k = 2 + r.below(6);
        let logp: Vec<f64> = (0..k).map(|_| r.range(-8.0, 0.0)).collect();
        let shifted: Vec<f64> = logp.iter().map(|v| v + shift).collect();
        let y = r.below(k);
        let a = information_gain(&Tensor::from_rows(&[logp]).unwrap(), &[y]).unwrap()[0];
        let b = information_gain(&Tensor::from_rows(&[shifted]).unwrap(), &[y]).unwrap()[0];
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn draws_are_distinct_and_reproducible(seed in any::<u64>(), n in 1usize..40, frac in 0.0f64..=1.0) {
        let mut r = TestRng(seed);
        let w: Vec<f64> = (0..n).map(|_| r.range(-3.0, 3.0)).collect();
        let p = weights_to_probs(&w, 0.7).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = ((n as f64) * frac) as usize;
        let a = sample_without_replacement(&p, k, seed).unwrap();
        prop_assert_eq!(a.len(), k);
        prop_assert_eq!(a.iter().collect::<HashSet<_>>().len(), k);
        prop_assert_eq!(sample_without_replacement(&p, k, seed).unwrap(), a);
    }

    #[test]
    fn balanced_plans_meet_their_quotas(seed in any::<u64>()) {
        let mut r = TestRng(seed);
        let k = 2 + r.below(5);
        let sizes: Vec<usize> = (0..k).map(|_| 1 + r.below(12)).collect();
        let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| vec![c; s]).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, r.below(i + 1));
        }
        let n = labels.len();
        let batch = 1 + r.below(n);
        let mut t = WeightTable::new(n, 0.5).unwrap();
        let sel: Vec<usize> = (0..n).filter(|_| r.unit() < 0.5).collect();
        let gains: Vec<f64> = sel.iter().map(|_| r.range(-3.0, 3.0)).collect();
        t.ema_update(&sel, &gains, 1).unwrap();

        let plan = plan_balanced_batch(&t, &labels, batch, k, 1.0, seed).unwrap();
        prop_assert_eq!(plan.indices.len(), batch);
        prop_assert_eq!(plan.indices.iter().collect::<HashSet<_>>().len(), batch);
        let counts = class_counts(&plan.indices, &labels, k);
        let quotas: Vec<usize> = plan.per_class_quota.values().copied().collect();
        prop_assert_eq!(&counts, &quotas);
        // classes below their size share one level, within one slot
        let open: Vec<usize> = (0..k).filter(|&c| counts[c] < sizes[c]).collect();
        if let (Some(lo), Some(hi)) = (open.iter().map(|&c| counts[c]).min(), open.iter().map(|&c| counts[c]).max()) {
            prop_assert!(hi - lo <= 1);
            for c in 0..k {
                prop_assert!(counts[c] >= lo.min(sizes[c]));
            }
        }
        let s = BalancedSampler::new(&labels, k).unwrap();
        prop_assert_eq!(s.num_classes(), k);
    }
}
