//! Acceptance suite: every criterion at its stated tolerance, one verdict
//! line each. Runs the default configuration end to end on three seeds.

mod common;

use std::time::Instant;

use common::oracles::{ap_oracle, lattice_box, matching_oracle, random_case, voxel_iou};
use peftdml_core::encoders::pretrain_backbones;
use peftdml_core::eval::{
    average_precision, eval_dropout, eval_standard, eval_weather, eval_zero_shot, match_detections,
    FrameEval,
};
use peftdml_core::fusion::fuse;
use peftdml_core::losses::{iou_3d, joint_loss};
use peftdml_core::model::Batch;
use peftdml_core::peft::trainability_report;
use peftdml_core::report::RunConfig;
use peftdml_core::tensor::grad_check;
use peftdml_core::train::{initial_checkpoint, train, Checkpoint};
use peftdml_core::world::{build_dataset, AvailabilityMask, Dataset, Modality};
use peftdml_core::{Graph, ParameterSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

struct SeedRun {
    dataset: Dataset,
    pretrained: ParameterSet,
    checkpoint: Checkpoint,
    seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Paths of `before` whose values changed bitwise in `after`, or that are
/// no longer frozen.
fn frozen_violations(before: &ParameterSet, after: &ParameterSet) -> Vec<String> {
    before
        .iter()
        .filter(|(p, _)| before.is_frozen(p))
        .filter(|(p, t)| {
            !after.is_frozen(p)
                || after.get(p).is_none_or(|a| {
                    a.data()
                        .iter()
                        .zip(t.data())
                        .any(|(x, y)| x.to_bits() != y.to_bits())
                })
        })
        .map(|(p, _)| p.to_string())
        .collect()
}

fn run_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let config = RunConfig::default().with_seed(seed);
    let dataset = build_dataset(&config.dataset).unwrap();
    let hidden = config.train.model.encoder.hidden;
    let pretrained = pretrain_backbones(&dataset.train, hidden, &config.pretrain, seed)
        .unwrap()
        .params;
    let checkpoint = train(
        &config.train,
        &pretrained,
        &dataset.train,
        &dataset.config.render.weather,
    )
    .unwrap();
    SeedRun {
        dataset,
        pretrained,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn gradient_integrity(run: &SeedRun) -> Verdict {
    let start = Instant::now();
    let batch = common::four_row_batch(run.dataset.config.seed)
        .expect("two tracked objects of different classes");
    let config = RunConfig::default();
    let mut ck = initial_checkpoint(&config.train, &run.pretrained, "").unwrap();
    // Move every zero-initialized path off zero so all groups carry gradient.
    common::perturb_trainable(&mut ck.params, 17, 0.05);
    let loss = config.train.loss.clone();
    let mut g = Graph::no_grad();
    let out = ck.model.forward(&mut g, &ck.params, &batch).unwrap();
    let b = joint_loss(&mut g, &out, &batch, &loss)
        .unwrap()
        .breakdown(&g);
    let active = b.det_cls > 0.0 && b.metric > 0.0 && b.consistency > 0.0;
    let report = grad_check(
        |g, p| {
            let out = ck.model.forward(g, p, &batch)?;
            Ok(joint_loss(g, &out, &batch, &loss)?.total)
        },
        &ck.params,
        1e-5,
        1e-4,
    )
    .unwrap();
    let trainable = ck.params.trainable_paths().count();
    let secs = start.elapsed().as_secs_f64();
    let (worst_path, worst) = report
        .worst()
        .map_or((String::new(), 0.0), |(p, e)| (p.to_string(), e));
    Verdict {
        id: 1,
        name: "gradient integrity",
        pass: report.pass && active && report.checked_scalars() == trainable && secs < 120.0,
        detail: format!(
            "{} of {trainable} trainable tensors checked, max rel err {worst:.2e} ({worst_path}), terms det {:.3} met {:.3} cons {:.3}, {secs:.1}s",
            report.checked_scalars(),
            b.det_cls + b.det_iou + b.det_orient,
            b.metric,
            b.consistency
        ),
    }
}

fn peft_identity(run: &SeedRun) -> Verdict {
    let ck = initial_checkpoint(&RunConfig::default().train, &run.pretrained, "").unwrap();
    let batch = common::full_batch(&run.dataset.test, 10);
    let (full, fused_full) = ck.model.predict(&ck.params, &batch).unwrap();
    let (bare, fused_bare) = ck
        .model
        .backbone_only()
        .predict(&ck.params, &batch)
        .unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in fused_full.data().iter().zip(fused_bare.data()) {
        worst = worst.max((a - b).abs());
    }
    for (a, b) in full.iter().zip(&bare) {
        let xs = a
            .class_logits
            .iter()
            .chain(&a.box_residuals)
            .chain(&a.velocity);
        let ys = b
            .class_logits
            .iter()
            .chain(&b.box_residuals)
            .chain(&b.velocity);
        for (x, y) in xs.zip(ys) {
            worst = worst.max((x - y).abs());
        }
    }
    Verdict {
        id: 2,
        name: "PEFT identity at initialization",
        pass: worst <= 1e-12,
        detail: format!("{} candidates, max abs diff {worst:.1e}", batch.len()),
    }
}

fn parameter_efficiency(run: &SeedRun) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for rank in [4, 8, 16] {
        let cfg = RunConfig::default().train.with_rank(rank);
        let ck = initial_checkpoint(&cfg, &run.pretrained, "").unwrap();
        let total: usize = ck.params.iter().map(|(_, t)| t.len()).sum();
        let trainable: usize = ck
            .params
            .iter()
            .filter(|(p, _)| !ck.params.is_frozen(p))
            .map(|(_, t)| t.len())
            .sum();
        let enumerated = trainable as f64 / total as f64;
        let report = trainability_report(&ck.params);
        let consistent = report.total == total && report.trainable == trainable;
        pass &= consistent && enumerated < 0.10;
        parts.push(format!(
            "r={rank}: {trainable}/{total} = {enumerated:.3}{}",
            if consistent {
                ""
            } else {
                " (report disagrees)"
            }
        ));
    }
    Verdict {
        id: 3,
        name: "parameter efficiency (fraction < 0.10)",
        pass,
        detail: parts.join(", "),
    }
}

fn subset_equivalence(run: &SeedRun) -> Verdict {
    let ck = &run.checkpoint;
    let (rec, frame) = run.dataset.test.frames().next().unwrap();
    let batch = Batch::from_frames(&[(&rec.scene, frame)], &[AvailabilityMask::ALL]).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for row in 0..batch.len().min(8) {
        let zs: Vec<Vec<f64>> = Modality::ALL
            .iter()
            .map(|&m| {
                let dim = m.dim();
                let mut g = Graph::no_grad();
                let x = g.constant(
                    Tensor::new(
                        &[1, dim],
                        batch.features[m.index()][row * dim..(row + 1) * dim].to_vec(),
                    )
                    .unwrap(),
                );
                let z = ck.model.embed(&mut g, &ck.params, m, x).unwrap();
                g.value(z).data().to_vec()
            })
            .collect();
        let all: Vec<(Modality, &[f64])> = Modality::ALL
            .iter()
            .map(|&m| (m, zs[m.index()].as_slice()))
            .collect();
        for bits in 1u8..32 {
            let mask = AvailabilityMask::from_bits(bits);
            let a = fuse(&all, &mask, &ck.model.fusion, &ck.params).unwrap();
            let only: Vec<(Modality, &[f64])> =
                all.iter().copied().filter(|(m, _)| mask.get(*m)).collect();
            let b = fuse(&only, &mask, &ck.model.fusion, &ck.params).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
            checked += 1;
        }
    }
    Verdict {
        id: 4,
        name: "dropout-subset equivalence",
        pass: checked > 0 && worst <= 1e-9,
        detail: format!(
            "{checked} (candidate, subset) pairs over all 31 subsets, max abs diff {worst:.1e}"
        ),
    }
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (preds, gts) = random_case(&mut rng);
        let m = match_detections(&preds, &gts, 1.0);
        let mut got: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.pred, x.gt)).collect();
        got.sort();
        mismatches += (got != matching_oracle(&preds, &gts, 1.0)) as usize;
        let frame = FrameEval::new(preds.clone(), gts.clone());
        for class in 0..2 {
            let num_gt = gts.iter().filter(|g| g.class_id == class).count();
            let ap = average_precision(std::slice::from_ref(&frame), class, 1.0).unwrap();
            let expected = (num_gt > 0).then(|| {
                let scored = (0..preds.len())
                    .filter(|&i| preds[i].class_id == class)
                    .map(|i| (preds[i].confidence, m.is_tp(i)))
                    .collect();
                ap_oracle(scored, num_gt)
            });
            let same = match (ap, expected) {
                (Some(a), Some(e)) => (a - e).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            mismatches += (!same) as usize;
        }
    }
    let mut iou_worst: f64 = 0.0;
    for _ in 0..6 {
        let (a, b) = (lattice_box(&mut rng), lattice_box(&mut rng));
        let exact = iou_3d(&a, &b).unwrap();
        iou_worst = iou_worst.max((exact - voxel_iou(&a.aligned(), &b.aligned(), 0.01)).abs());
    }
    Verdict {
        id: 8,
        name: "metric oracle equivalence",
        pass: mismatches == 0 && iou_worst < 5e-4,
        detail: format!("{mismatches} matching/AP mismatches in 200 cases, IoU vs voxels max diff {iou_worst:.4}"),
    }
}

#[test]
fn acceptance_criteria() {
    let suite = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let mut verdicts = vec![
        gradient_integrity(&runs[0]),
        peft_identity(&runs[0]),
        parameter_efficiency(&runs[0]),
        subset_equivalence(&runs[0]),
    ];

    // Training efficacy.
    let mut map1 = Vec::new();
    let mut zero_shot = Vec::new();
    let mut chance = 0.0;
    for r in &runs {
        let rep = eval_standard(&r.checkpoint, &r.dataset.test).unwrap();
        map1.push(rep.map_at(1.0).unwrap());
        let zs = eval_zero_shot(&r.checkpoint, &r.dataset.train, &r.dataset.test).unwrap();
        chance = zs.chance;
        zero_shot.push(zs.accuracy);
    }
    let train_secs: f64 = runs.iter().map(|r| r.seconds).sum();
    let (m1, zs) = (mean(&map1), mean(&zero_shot));
    verdicts.push(Verdict {
        id: 5,
        name: "training efficacy",
        pass: m1 >= 0.60 && zs >= 2.0 * chance && train_secs < 900.0,
        detail: format!(
            "mAP@1m {m1:.3} (need 0.60), zero-shot {zs:.3} (need {:.3}), per seed {map1:.3?} / {zero_shot:.3?}, {train_secs:.0}s",
            2.0 * chance
        ),
    });

    // Robustness ordering.
    let mut normal = Vec::new();
    let mut rain = Vec::new();
    let mut full = Vec::new();
    let mut single = vec![Vec::new(); Modality::ALL.len()];
    for r in &runs {
        let rows = eval_weather(&r.checkpoint, &r.dataset.test).unwrap();
        let ap = |c: &str| rows.iter().find(|w| w.condition == c).unwrap().ap;
        normal.push(ap("normal"));
        rain.push(ap("rain"));
        let mut subsets = vec![AvailabilityMask::ALL];
        subsets.extend(Modality::ALL.iter().map(|&m| AvailabilityMask::only(&[m])));
        let reports = eval_dropout(&r.checkpoint, &r.dataset.test, &subsets).unwrap();
        let map_of = |mask: &AvailabilityMask| reports[&mask.label()].map;
        full.push(map_of(&AvailabilityMask::ALL));
        for m in Modality::ALL {
            single[m.index()].push(map_of(&AvailabilityMask::only(&[m])));
        }
    }
    let full_mean = mean(&full);
    let singles: Vec<f64> = single.iter().map(|v| mean(v)).collect();
    let order_ok = singles.iter().all(|&s| full_mean >= s - 0.02);
    verdicts.push(Verdict {
        id: 6,
        name: "robustness ordering",
        pass: mean(&normal) >= mean(&rain) && order_ok,
        detail: format!(
            "AP normal {:.3} vs rain {:.3}; mAP full {full_mean:.3} vs singles {}",
            mean(&normal),
            mean(&rain),
            Modality::ALL
                .iter()
                .map(|m| format!("{m} {:.3}", singles[m.index()]))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    });

    // Rank sweep, plus the frozen check on every run.
    let mut violations: Vec<String> = Vec::new();
    for r in &runs {
        violations.extend(frozen_violations(&r.pretrained, &r.checkpoint.params));
    }
    let mut comp = [Vec::new(), Vec::new()];
    let mut fractions = [0.0; 3];
    for r in &runs {
        for (k, rank) in [4usize, 16].into_iter().enumerate() {
            let cfg = RunConfig::default()
                .with_seed(r.dataset.config.seed)
                .train
                .with_rank(rank);
            let ck = train(
                &cfg,
                &r.pretrained,
                &r.dataset.train,
                &r.dataset.config.render.weather,
            )
            .unwrap();
            violations.extend(frozen_violations(&r.pretrained, &ck.params));
            let rep = eval_standard(&ck, &r.dataset.test).unwrap();
            comp[k].push(rep.composite);
            fractions[if k == 0 { 0 } else { 2 }] = rep.trainable_fraction;
        }
    }
    fractions[1] = trainability_report(&runs[0].checkpoint.params).fraction;
    let (c4, c16) = (mean(&comp[0]), mean(&comp[1]));
    verdicts.push(Verdict {
        id: 7,
        name: "rank sweep trend",
        pass: c16 >= c4 - 0.03 && fractions[0] < fractions[1] && fractions[1] < fractions[2],
        detail: format!(
            "composite r=4 {c4:.3} r=16 {c16:.3}; trainable fraction r=4/8/16 {:.3}/{:.3}/{:.3}",
            fractions[0], fractions[1], fractions[2]
        ),
    });

    verdicts.push(metric_oracles());

    // Determinism and round trip.
    let again = run_seed(0);
    violations.extend(frozen_violations(
        &again.pretrained,
        &again.checkpoint.params,
    ));
    let a =
        serde_json::to_string(&eval_standard(&runs[0].checkpoint, &runs[0].dataset.test).unwrap())
            .unwrap();
    let b = serde_json::to_string(&eval_standard(&again.checkpoint, &again.dataset.test).unwrap())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    runs[0].checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let c = serde_json::to_string(&eval_standard(&loaded, &runs[0].dataset.test).unwrap()).unwrap();
    verdicts.push(Verdict {
        id: 9,
        name: "determinism and round trip",
        pass: a == b && a == c,
        detail: format!(
            "rerun metrics identical: {}, reloaded checkpoint metrics identical: {}",
            a == b,
            a == c
        ),
    });

    verdicts.push(Verdict {
        id: 10,
        name: "frozen immutability",
        pass: violations.is_empty(),
        detail: format!(
            "{} training runs checked, {} frozen tensors changed{}",
            runs.len() * 3 + 1,
            violations.len(),
            violations
                .first()
                .map_or(String::new(), |p| format!(" (first: {p})"))
        ),
    });

    verdicts.sort_by_key(|v| v.id);
    println!("acceptance ({:.0}s)", suite.elapsed().as_secs_f64());
    for v in &verdicts {
        println!(
            "criterion {:>2} {} {}: {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
