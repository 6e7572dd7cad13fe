//! Independent reference implementations used as test oracles.

use peftdml_core::eval::{Detection, GroundTruth};
use peftdml_core::world::Box3D;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn at(x: f64, y: f64) -> Box3D {
    Box3D::new([x, y, 0.5], [1.0, 2.0, 1.5], 0.0, [0.0, 0.0])
}

pub fn planar(a: &Box3D, b: &Box3D) -> f64 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// Random frame: up to 6 predictions and 4 GT over 2 classes in a 4 m box.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let np = rng.random_range(0..=6);
    let ng = rng.random_range(0..=4);
    let preds = (0..np)
        .map(|_| Detection {
            class_id: rng.random_range(0..2),
            confidence: rng.random_range(0.0..1.0),
            bbox: at(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)),
            attribute: false,
        })
        .collect();
    let gts = (0..ng)
        .map(|_| GroundTruth {
            class_id: rng.random_range(0..2),
            bbox: at(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)),
            attribute: false,
        })
        .collect();
    (preds, gts)
}

/// Matching as a walk over all (prediction, GT) pairs sorted by prediction
/// rank, then distance, then GT index; a pair is accepted when both sides
/// are still free and it is the first eligible pair for its prediction.
pub fn matching_oracle(preds: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<(usize, usize)> {
    let mut rank: Vec<usize> = (0..preds.len()).collect();
    rank.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    let mut pairs = Vec::new();
    for (r, &i) in rank.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = planar(&preds[i].bbox, &g.bbox);
            if g.class_id == preds[i].class_id && d <= thr {
                pairs.push((r, d, j, i));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, _, j, i) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

/// AP as the sum over true positives of the best precision at any rank at
/// or beyond it, divided by the GT count.
pub fn ap_oracle(mut scored: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let precision_at =
        |k: usize| scored[..=k].iter().filter(|s| s.1).count() as f64 / (k + 1) as f64;
    (0..scored.len())
        .filter(|&k| scored[k].1)
        .map(|k| (k..scored.len()).map(precision_at).fold(0.0, f64::max))
        .sum::<f64>()
        / num_gt as f64
}

/// Counts voxel centres at `step` resolution inside both boxes.
pub fn voxel_iou(a: &[f64; 6], b: &[f64; 6], step: f64) -> f64 {
    let inside =
        |bx: &[f64; 6], p: [f64; 3]| (0..3).all(|k| (p[k] - bx[k]).abs() <= bx[k + 3] / 2.0);
    let lo: Vec<f64> = (0..3)
        .map(|k| (a[k] - a[k + 3] / 2.0).min(b[k] - b[k + 3] / 2.0))
        .collect();
    let hi: Vec<f64> = (0..3)
        .map(|k| (a[k] + a[k + 3] / 2.0).max(b[k] + b[k + 3] / 2.0))
        .collect();
    let n: Vec<usize> = (0..3)
        .map(|k| ((hi[k] - lo[k]) / step).ceil() as usize)
        .collect();
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..n[0] {
        let x = lo[0] + (i as f64 + 0.5) * step;
        for j in 0..n[1] {
            let y = lo[1] + (j as f64 + 0.5) * step;
            for k in 0..n[2] {
                let p = [x, y, lo[2] + (k as f64 + 0.5) * step];
                let (ia, ib) = (inside(a, p), inside(b, p));
                both += (ia && ib) as u64;
                either += (ia || ib) as u64;
            }
        }
    }
    both as f64 / either as f64
}

/// Axis-aligned box whose faces lie on the 0.01 lattice, so a voxel count
/// at that resolution is exact.
pub fn lattice_box(rng: &mut ChaCha8Rng) -> Box3D {
    let center = [0, 1, 2].map(|_| rng.random_range(-30..=30) as f64 / 100.0);
    let size = [0, 1, 2].map(|_| rng.random_range(20..=50) as f64 / 50.0);
    Box3D::new(center, size, 0.0, [0.0, 0.0])
}
