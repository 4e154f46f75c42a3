//! Property-based invariants of the numeric building blocks.

use std::collections::BTreeMap;

use phdst_core::decision::{invert_or_fallback, Mlp};
use phdst_core::evalreport::{compute_metrics, Histogram};
use phdst_core::features::{boxcox_apply, boxcox_invert, discover_upstream, three_sigma_outliers, BoxCox};
use phdst_core::ingest::DistanceTable;
use phdst_core::synth::largest_remainder;
use phdst_core::StationId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..1e5f64, prop_oneof![Just(0.0), 1.0..1e5f64]), 1..40)
}

proptest! {
    #[test]
    fn metrics_are_non_negative_and_count_zero_truths(v in pairs()) {
        let (pred, truth): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let m = compute_metrics(&pred, &truth).unwrap();
        prop_assert!(m.rmse >= 0.0);
        prop_assert!(m.mape.is_none_or(|x| x >= 0.0));
        prop_assert!(m.r_square.is_none_or(|r| r <= 1.0));
        prop_assert_eq!(m.excluded, truth.iter().filter(|t| **t == 0.0).count());
        prop_assert_eq!(m.mape.is_none(), m.excluded == truth.len());
    }

    #[test]
    fn perfect_predictions_score_perfectly(truth in prop::collection::vec(1.0..1e5f64, 2..40)) {
        let m = compute_metrics(&truth, &truth).unwrap();
        prop_assert_eq!(m.mape, Some(0.0));
        prop_assert_eq!(m.rmse, 0.0);
        if truth.iter().any(|t| *t != truth[0]) {
            prop_assert_eq!(m.r_square, Some(1.0));
        }
    }

    #[test]
    fn metrics_ignore_point_order(v in pairs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut w = v.clone();
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p1, t1): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let (p2, t2): (Vec<f64>, Vec<f64>) = w.into_iter().unzip();
        let a = compute_metrics(&p1, &t1).unwrap();
        let b = compute_metrics(&p2, &t2).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
        prop_assert!(close(a.rmse, b.rmse));
        prop_assert_eq!(a.mape.is_some(), b.mape.is_some());
        if let (Some(x), Some(y)) = (a.mape, b.mape) {
            prop_assert!(close(x, y));
        }
    }

    #[test]
    fn histogram_accounts_for_every_value(v in prop::collection::vec(prop::option::of(0.0..500.0f64), 0..60)) {
        let h = Histogram::of(v.iter().copied());
        prop_assert_eq!(h.total(), v.len());
        prop_assert_eq!(h.undefined, v.iter().filter(|x| x.is_none()).count());
    }

    #[test]
    fn boxcox_is_increasing(a in 0.0..1e6f64, b in 0.0..1e6f64, lambda in -2.0..2.0f64, shift in 0.5..2.0f64) {
        prop_assume!(a < b);
        let p = BoxCox { lambda, shift };
        prop_assert!(boxcox_apply(a, &p).unwrap() <= boxcox_apply(b, &p).unwrap());
    }

    #[test]
    fn boxcox_round_trips_when_well_conditioned(y in 0.0..1e4f64, lambda in -1.0..1.0f64, shift in 0.5..2.0f64) {
        let p = BoxCox { lambda, shift };
        let back = boxcox_invert(boxcox_apply(y, &p).unwrap(), &p).unwrap();
        prop_assert!((back - y).abs() <= 1e-9 * y.max(1.0), "y={y} back={back}");
    }

    #[test]
    fn fallback_inverse_is_finite(z in -1e3..1e3f64, lambda in -2.0..2.0f64, shift in 0.0..2.0f64) {
        let (v, _) = invert_or_fallback(z, &BoxCox { lambda, shift }, 5e4);
        prop_assert!(v.is_finite());
        prop_assert!(v >= -shift);
    }

    #[test]
    fn largest_remainder_sums_to_total(w in prop::collection::vec(0.0..100.0f64, 1..30), total in 0u64..100_000) {
        let out = largest_remainder(&w, total);
        prop_assert_eq!(out.len(), w.len());
        prop_assert_eq!(out.iter().sum::<u64>(), total);
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            for (o, wi) in out.iter().zip(&w) {
                let quota = wi / sum * total as f64;
                prop_assert!((*o as f64 - quota).abs() < 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn three_sigma_flags_are_rare_and_order_free(means in prop::collection::vec(0.0..1e4f64, 0..50), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let flags = three_sigma_outliers(&means);
        prop_assert_eq!(flags.len(), means.len());
        // At most a ninth of any population lies beyond three standard deviations.
        prop_assert!(9 * flags.iter().filter(|f| **f).count() <= means.len());
        let mut idx: Vec<usize> = (0..means.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<f64> = idx.iter().map(|&i| means[i]).collect();
        let again = three_sigma_outliers(&shuffled);
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(again[k], flags[i]);
        }
    }

    #[test]
    fn upstream_lists_are_distinct_and_sorted_by_score(
        n in 3usize..10,
        d in prop::collection::vec(1u32..300, 45),
        mileage in 0.0..150.0f64,
        eta_seed in any::<usize>(),
    ) {
        let ids: Vec<StationId> = (0..n).map(|i| StationId::new((10 + i).to_string())).collect();
        let mut table = DistanceTable::new();
        let mut k = 0;
        for a in 0..n {
            for b in a + 1..n {
                table.insert(&ids[a], &ids[b], f64::from(d[k])).unwrap();
                k += 1;
            }
        }
        let eta = 1 + eta_seed % (n - 1);
        let avg: BTreeMap<StationId, f64> = ids.iter().map(|s| (s.clone(), mileage)).collect();
        let up = discover_upstream(&ids[0], &ids, &table, &avg, eta).unwrap();
        prop_assert_eq!(up.len(), eta);
        prop_assert!(!up.contains(&ids[0]));
        let mut seen = up.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), eta);
        let score = |s: &StationId| (table.get(&ids[0], s).unwrap() - mileage).abs();
        prop_assert!(up.windows(2).all(|w| score(&w[0]) <= score(&w[1])));
        // Every station left out scores no better than the last one chosen.
        let worst = score(up.last().unwrap());
        prop_assert!(ids[1..].iter().filter(|s| !up.contains(s)).all(|s| score(s) >= worst));
    }

    #[test]
    fn identity_initialized_calibration_is_exact(
        values in prop::collection::vec(-1e4..1e5f64, 1..20),
        center in 0.0..1e4f64,
        scale in 0.1..1e3f64,
        seed in any::<u64>(),
    ) {
        let mlp = Mlp::identity_init(8, center, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = mlp.apply_batch(&values).unwrap();
        for (o, v) in out.iter().zip(&values) {
            prop_assert!((o - v).abs() <= 1e-9 * v.abs().max(1.0), "{o} vs {v}");
        }
    }
}
