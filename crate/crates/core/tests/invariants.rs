mod common;

use common::oracles;
use common::suites::invariant_suite;
use locret_core::corpus::Rect;
use locret_core::grounding::{cnr, min_max_normalize, miou, upsample_bilinear};
use locret_core::retrieval::{average_precision, mean_ap, rank_at_k, RankVariant};
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn structural_invariants_hold() {
    for m in invariant_suite() {
        assert!(m.pass(), "{m}");
    }
}

fn rankings() -> impl Strategy<Value = Vec<Vec<bool>>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), 1..25), 1..6)
}

fn map_and_box() -> impl Strategy<Value = (Array2<f64>, Rect)> {
    (2usize..12, 2usize..12)
        .prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(-5.0f64..5.0, h * w),
                Just((h, w)),
                0..w,
                0..h,
            )
        })
        .prop_flat_map(|(v, (h, w), x0, y0)| (Just(v), Just((h, w)), Just((x0, y0)), x0 + 1..=w, y0 + 1..=h))
        .prop_filter_map("box covers the map", |(v, (h, w), (x0, y0), x1, y1)| {
            let rect = Rect::new(x0, y0, x1, y1);
            (rect.area() < h * w).then(|| (Array2::from_shape_vec((h, w), v).unwrap(), rect))
        })
}

proptest! {
    #[test]
    fn rank_metrics_are_percentages(r in rankings(), k in 1usize..12) {
        for variant in [RankVariant::Precision, RankVariant::HitRate] {
            let v = rank_at_k(&r, k, variant).unwrap();
            prop_assert!((0.0..=100.0).contains(&v));
        }
        if let Ok(m) = mean_ap(&r) {
            prop_assert!((0.0..=100.0).contains(&m.map));
        }
    }

    #[test]
    fn hit_rate_is_monotone_in_k(r in rankings(), k in 1usize..12) {
        let a = rank_at_k(&r, k, RankVariant::HitRate).unwrap();
        let b = rank_at_k(&r, k + 1, RankVariant::HitRate).unwrap();
        prop_assert!(a <= b);
    }

    #[test]
    fn relaxed_predicate_never_lowers_precision(r in rankings(), extra in prop::collection::vec(any::<bool>(), 25), k in 1usize..12) {
        let relaxed: Vec<Vec<bool>> = r
            .iter()
            .map(|q| q.iter().zip(&extra).map(|(a, b)| *a || *b).collect())
            .collect();
        for variant in [RankVariant::Precision, RankVariant::HitRate] {
            prop_assert!(rank_at_k(&r, k, variant).unwrap() <= rank_at_k(&relaxed, k, variant).unwrap());
        }
    }

    #[test]
    fn ap_matches_oracle(r in prop::collection::vec(any::<bool>(), 1..40)) {
        match (average_precision(&r), oracles::average_precision(&r)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn cnr_is_affine_invariant((map, rect) in map_and_box(), a in 0.5f64..5.0, b in -3.0f64..3.0) {
        let base = cnr(&map, &rect).unwrap();
        let moved = cnr(&map.mapv(|v| a * v + b), &rect).unwrap();
        prop_assert!((base - moved).abs() < 1e-6);
    }

    #[test]
    fn iou_lies_in_unit_interval((map, rect) in map_and_box()) {
        let r = miou(&map, &rect, &[0.1, 0.5, 0.9]).unwrap();
        for v in r.per_threshold {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn normalized_maps_span_unit_interval((map, _) in map_and_box()) {
        let n = min_max_normalize(&map);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upsampling_stays_within_grid_range((map, _) in map_and_box(), h in 2usize..40, w in 2usize..40) {
        let up = upsample_bilinear(&map, h, w);
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(up.dim(), (h, w));
        prop_assert!(up.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
}
