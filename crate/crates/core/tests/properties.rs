use std::collections::HashSet;

use proptest::prelude::*;

use shortcut_core::analysis::{filtered_word_list, lmi, top_lmi_table};
use shortcut_core::attribution::top_n_tokens;
use shortcut_core::dataset::{MASK, PAD};
use shortcut_core::masking::{hard_mask, keyed_uniform, soft_mask};
use shortcut_core::shortcut::{degree_batches, normalize_batch, sample_variance, select_subset};
use shortcut_core::tensor::softmax;
use shortcut_core::training::epoch_order;
use shortcut_core::training::losses::{cross_entropy, jsd, kld};

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, k)
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("needs mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn two_distributions() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|k| (distribution(k), distribution(k)))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in (2usize..10).prop_flat_map(logits)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_ignores_a_constant_shift(z in (2usize..10).prop_flat_map(logits), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax(z in (2usize..10).prop_flat_map(logits), y in 0usize..10) {
        let y = y % z.len();
        let direct = -softmax(&z)[y].ln();
        let ce = cross_entropy(&z, y).unwrap();
        prop_assert!(ce >= 0.0);
        if direct.is_finite() {
            prop_assert!((ce - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn kld_is_non_negative_and_zero_on_self((p, q) in two_distributions()) {
        prop_assert!(kld(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kld(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded((p, q) in two_distributions()) {
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        prop_assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jsd_matches_its_definition((p, q) in two_distributions()) {
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
        };
        let oracle = 0.5 * kl(&p, &m) + 0.5 * kl(&q, &m);
        prop_assert!((jsd(&p, &q).unwrap() - oracle.clamp(0.0, std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn variance_matches_two_pass_oracle(p in (2usize..8).prop_flat_map(distribution)) {
        let k = p.len() as f64;
        let mean = 1.0 / k;
        let oracle = p.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
        prop_assert!((sample_variance(&p).unwrap() - oracle).abs() < 1e-14);
        prop_assert!(sample_variance(&p).unwrap() <= 1.0 / k + 1e-12);
    }

    #[test]
    fn normalization_spans_unit_interval(v in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let n = normalize_batch(&v);
        prop_assert_eq!(n.len(), v.len());
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            let imin = v.iter().position(|&x| x == min).unwrap();
            let imax = v.iter().position(|&x| x == max).unwrap();
            prop_assert_eq!(n[imin], 0.0);
            prop_assert_eq!(n[imax], 1.0);
        } else {
            prop_assert!(n.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn normalization_ignores_shift_and_scale(
        v in prop::collection::vec(0.0f64..1.0, 2..30),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
        for (a, b) in normalize_batch(&v).iter().zip(normalize_batch(&moved)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_preserves_order(v in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let n = normalize_batch(&v);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn top_n_agrees_with_full_sort(
        norms in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]), 1..25),
        eligible_bits in prop::collection::vec(any::<bool>(), 25),
        n in 1usize..8,
    ) {
        let eligible: Vec<bool> = eligible_bits[..norms.len()].to_vec();
        let mut oracle: Vec<(usize, f64)> =
            norms.iter().copied().enumerate().filter(|(i, _)| eligible[*i]).collect();
        let got = top_n_tokens(&norms, n, &eligible);
        if oracle.is_empty() {
            prop_assert!(got.is_err());
        } else {
            // Stable sort keeps the smaller index first among equal norms.
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expect: Vec<usize> = oracle.iter().take(n).map(|(i, _)| *i).collect();
            prop_assert_eq!(got.unwrap(), expect);
        }
    }

    #[test]
    fn lmi_table_matches_brute_force(
        occ in prop::collection::vec((0usize..6, 0usize..3), 1..80),
    ) {
        let occurrences: Vec<(String, usize)> = occ.iter().map(|(w, l)| (format!("w{w}"), *l)).collect();
        let table = top_lmi_table(&occurrences, 3, None).unwrap();
        let d = occurrences.len() as f64;
        prop_assert_eq!(table.total, occurrences.len() as u64);
        for rows in &table.per_label {
            for r in rows {
                let n_wl = occurrences.iter().filter(|(w, l)| *w == r.word && *l == r.label).count() as f64;
                let n_w = occurrences.iter().filter(|(w, _)| *w == r.word).count() as f64;
                let n_l = occurrences.iter().filter(|(_, l)| *l == r.label).count() as f64;
                let oracle = (n_wl / d) * ((n_wl / n_w) / (n_l / d)).ln();
                prop_assert!((r.lmi - oracle).abs() < 1e-12);
            }
            for pair in rows.windows(2) {
                prop_assert!(pair[0].lmi >= pair[1].lmi);
            }
        }
        let rows: usize = table.per_label.iter().map(Vec::len).sum();
        let distinct: HashSet<&(String, usize)> = occurrences.iter().collect();
        prop_assert_eq!(rows, distinct.len());
    }

    #[test]
    fn filtered_list_is_union_of_pairwise_intersections(
        occ in prop::collection::vec((0usize..15, 0usize..3), 20..120),
        k in 1usize..6,
    ) {
        let occurrences: Vec<(String, usize)> = occ.iter().map(|(w, l)| (format!("w{w}"), *l)).collect();
        let table = top_lmi_table(&occurrences, 3, None).unwrap();
        let tops: Vec<HashSet<String>> = table
            .per_label
            .iter()
            .map(|rows| rows.iter().take(k).map(|r| r.word.clone()).collect())
            .collect();
        let mut oracle = std::collections::BTreeSet::new();
        for i in 0..3 {
            for j in i + 1..3 {
                oracle.extend(tops[i].intersection(&tops[j]).cloned());
            }
        }
        prop_assert_eq!(filtered_word_list(&table, k), oracle);
    }

    #[test]
    fn hard_mask_touches_only_listed_positions(
        ids in prop::collection::vec(5usize..50, 1..20),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
    ) {
        let positions: Vec<usize> = picks.iter().map(|p| p.index(ids.len())).collect();
        let out = hard_mask(&ids, &positions).unwrap();
        for (i, (&a, &b)) in ids.iter().zip(&out).enumerate() {
            if positions.contains(&i) {
                prop_assert_eq!(b, MASK);
            } else {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(hard_mask(&out, &positions).unwrap(), out);
    }

    #[test]
    fn soft_mask_extremes_are_certain(ids in prop::collection::vec(5usize..50, 1..20), seed: u64, epoch in 0usize..50) {
        let all: Vec<usize> = (0..ids.len()).collect();
        prop_assert!(!soft_mask(&ids, &all, 0.0, seed, epoch, "x").unwrap().masked);
        let full = soft_mask(&ids, &all, 1.0, seed, epoch, "x").unwrap();
        prop_assert!(full.masked);
        prop_assert!(full.ids.iter().all(|&t| t == MASK));
    }

    #[test]
    fn soft_mask_is_keyed(seed: u64, epoch in 0usize..100, id in "[a-z0-9-]{1,12}", degree in 0.0f64..=1.0) {
        let ids = [7, 8, 9, PAD];
        let a = soft_mask(&ids, &[0, 2], degree, seed, epoch, &id).unwrap();
        let _ = keyed_uniform(seed.wrapping_add(1), epoch, &id);
        let b = soft_mask(&ids, &[0, 2], degree, seed, epoch, &id).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn subsets_are_distinct_and_sorted(total in 0usize..500, size in 0usize..600, seed: u64) {
        let s = select_subset(total, size, seed);
        prop_assert_eq!(s.len(), size.min(total));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < total));
    }

    #[test]
    fn degree_batches_partition_the_examples(total in 0usize..300, bs in 1usize..40, seed: u64) {
        let batches = degree_batches(total, bs, seed);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..total).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..300, seed: u64, epoch in 0usize..20) {
        let mut order = epoch_order(n, seed, epoch);
        prop_assert_eq!(order.clone(), epoch_order(n, seed, epoch));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn soft_mask_rate_tracks_degree() {
    let ids = [7, 8, 9];
    let draws = 20_000;
    for degree in [0.1, 0.37, 0.5, 0.9] {
        let hits = (0..draws)
            .filter(|i| soft_mask(&ids, &[1], degree, 3, 0, &format!("ex-{i}")).unwrap().masked)
            .count();
        let rate = hits as f64 / draws as f64;
        // Four binomial standard deviations.
        let tol = 4.0 * (degree * (1.0 - degree) / draws as f64).sqrt();
        assert!((rate - degree).abs() < tol, "degree {degree}: rate {rate}");
    }
}

#[test]
fn keyed_draws_are_uniform_across_epochs() {
    let bins = 10;
    let draws = 20_000;
    let mut counts = vec![0usize; bins];
    for epoch in 0..draws {
        let u = keyed_uniform(11, epoch, "same-example");
        assert!((0.0..1.0).contains(&u));
        counts[(u * bins as f64) as usize] += 1;
    }
    let expect = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 99.9th percentile of chi-squared with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi2 {chi2}: {counts:?}");
}

#[test]
fn lmi_of_a_perfectly_predictive_word() {
    // A word seen only with label 0, half of all occurrences labelled 0.
    let v = lmi(10, 10, 50, 100).unwrap();
    assert!((v - 0.1 * 2f64.ln()).abs() < 1e-15);
    assert_eq!(lmi(0, 3, 5, 10).unwrap(), 0.0);
}
