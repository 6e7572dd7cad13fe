mod common;

use common::oracles::{ap_oracle, at, matching_oracle, planar, random_case};
use peftdml_core::eval::{
    ap_from_ranked, average_precision, class_mean_ap, dedup, match_detections, Detection,
    FrameEval, GroundTruth,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matching_and_ap_agree_with_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let (preds, gts) = random_case(&mut rng);
        for thr in [0.25, 0.5, 1.0, 2.0] {
            let m = match_detections(&preds, &gts, thr);
            let mut got: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.pred, x.gt)).collect();
            got.sort();
            assert_eq!(
                got,
                matching_oracle(&preds, &gts, thr),
                "case {case} thr {thr}"
            );
            assert_eq!(m.matches.len() + m.false_positives.len(), preds.len());
            assert_eq!(m.matches.len() + m.false_negatives.len(), gts.len());
            for x in &m.matches {
                assert!(x.distance <= thr);
                assert_eq!(preds[x.pred].class_id, gts[x.gt].class_id);
            }
        }
        let frame = FrameEval::new(preds.clone(), gts.clone());
        for class in 0..2 {
            let num_gt = gts.iter().filter(|g| g.class_id == class).count();
            let ap = average_precision(std::slice::from_ref(&frame), class, 1.0).unwrap();
            if num_gt == 0 {
                assert_eq!(ap, None);
                continue;
            }
            let m = match_detections(&preds, &gts, 1.0);
            let scored: Vec<(f64, bool)> = (0..preds.len())
                .filter(|&i| preds[i].class_id == class)
                .map(|i| (preds[i].confidence, m.is_tp(i)))
                .collect();
            let expected = ap_oracle(scored, num_gt);
            let ap = ap.unwrap();
            assert!(
                (ap - expected).abs() < 1e-12,
                "case {case}: {ap} vs {expected}"
            );
            assert!((0.0..=1.0).contains(&ap));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dedup_is_exhaustively_consistent(seed in 0u64..1_000_000, radius in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, _) = random_case(&mut rng);
        let kept = dedup(preds.clone(), radius);
        let conflict = |a: &Detection, b: &Detection| a.class_id == b.class_id && planar(&a.bbox, &b.bbox) < radius;
        // No two survivors conflict.
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(!conflict(a, b));
            }
        }
        // Every suppressed detection conflicts with a survivor that
        // outranks it.
        let precedence = |i: usize| (-preds[i].confidence, i);
        for (i, p) in preds.iter().enumerate() {
            if kept.contains(p) {
                continue;
            }
            let outranked = preds.iter().enumerate().any(|(j, q)| {
                kept.contains(q) && conflict(p, q) && precedence(j) < precedence(i)
            });
            prop_assert!(outranked);
        }
    }

    #[test]
    fn ap_ignores_monotone_confidence_rescaling(seed in 0u64..1_000_000, a in 0.1f64..10.0, b in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = random_case(&mut rng);
        let scaled: Vec<Detection> = preds.iter().map(|p| Detection { confidence: a * p.confidence + b, ..*p }).collect();
        let f1 = FrameEval::new(preds, gts.clone());
        let f2 = FrameEval::new(scaled, gts);
        for thr in [0.5, 1.0] {
            prop_assert_eq!(class_mean_ap(std::slice::from_ref(&f1), thr).unwrap(), class_mean_ap(std::slice::from_ref(&f2), thr).unwrap());
        }
    }

    #[test]
    fn trailing_false_positive_leaves_ap_unchanged(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (rng.random_range(0.1..1.0), rng.random_bool(0.6))).collect();
        let num_gt = scored.iter().filter(|s| s.1).count() + rng.random_range(0..3);
        prop_assume!(num_gt > 0);
        let base = ap_from_ranked(scored.clone(), num_gt).unwrap();
        let mut more = scored;
        more.push((0.01, false));
        prop_assert_eq!(ap_from_ranked(more, num_gt).unwrap(), base);
    }
}

#[test]
fn perfect_detector_scores_one() {
    let gts: Vec<GroundTruth> = (0..4)
        .map(|i| GroundTruth {
            class_id: i % 2,
            bbox: at(i as f64 * 5.0, 0.0),
            attribute: false,
        })
        .collect();
    let preds: Vec<Detection> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| Detection {
            class_id: g.class_id,
            confidence: 0.9 - 0.1 * i as f64,
            bbox: g.bbox,
            attribute: false,
        })
        .collect();
    let f = FrameEval::new(preds, gts);
    for thr in [0.25, 0.5, 1.0, 2.0] {
        assert_eq!(
            class_mean_ap(std::slice::from_ref(&f), thr).unwrap(),
            Some(1.0)
        );
    }
    assert_eq!(
        class_mean_ap(&[FrameEval::new(vec![], vec![])], 1.0).unwrap(),
        None
    );
}
