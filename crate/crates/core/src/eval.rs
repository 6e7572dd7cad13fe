//! Decoding, center-distance matching, AP and true-positive error metrics,
//! and the evaluation protocols built on them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::argmax;
use crate::error::{Error, Result};
use crate::fusion::decode_box;
use crate::model::{Batch, Model};
use crate::peft::trainability_report;
use crate::tensor::{Graph, ParameterSet, Tensor};
use crate::train::{train, Checkpoint, TrainConfig};
use crate::world::{
    class_name, wrap_angle, AvailabilityMask, Box3D, DatasetManifest, FrameRecord, Modality,
    ScenePair, Weather, WeatherTable, BACKGROUND, NUM_CLASSES,
};

/// Center-distance thresholds in meters.
pub const THRESHOLDS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
/// Threshold used for true-positive errors.
pub const TP_THRESHOLD: f64 = 1.0;
/// Same-class detections closer than this are suppressed.
pub const DEDUP_RADIUS: f64 = 1.0;
/// Threshold of the weather breakdown.
pub const WEATHER_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: Box3D,
    /// Predicted "moving" attribute.
    pub attribute: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: Box3D,
    pub attribute: bool,
}

pub fn ground_truth(scene: &ScenePair, frame: &FrameRecord) -> Vec<GroundTruth> {
    scene
        .frame(frame.tag)
        .iter()
        .map(|o| GroundTruth {
            class_id: o.class_id,
            bbox: o.bbox,
            attribute: o.moving,
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn planar_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Greedy suppression: in descending confidence (ties by index), keep a
/// detection unless a kept one of the same class lies within `radius`.
pub fn dedup(dets: Vec<Detection>, radius: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if !kept
            .iter()
            .any(|k| k.class_id == d.class_id && planar_distance(&k.bbox, &d.bbox) < radius)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decoded, deduplicated detections for a batch that holds one frame.
fn detections_from_batch(
    model: &Model,
    params: &ParameterSet,
    batch: &Batch,
) -> Result<Vec<Detection>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let (outputs, _) = model.predict(params, batch)?;
    let mut dets = Vec::new();
    for (i, o) in outputs.iter().enumerate() {
        if !o.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite head output for candidate {i}"
            )));
        }
        if argmax(&o.class_logits) == BACKGROUND {
            continue;
        }
        let p = softmax(&o.class_logits);
        let class_id = argmax(&o.class_logits[..NUM_CLASSES]);
        dets.push(Detection {
            class_id,
            confidence: p[class_id],
            bbox: decode_box(&batch.anchors[i], &o.box_residuals, o.velocity)?,
            attribute: o.attribute_logit > 0.0,
        });
    }
    Ok(dedup(dets, DEDUP_RADIUS))
}

/// Detections for one frame under a frame-level modality mask. Candidates
/// left without any modality are skipped.
pub fn predict_frame(
    model: &Model,
    params: &ParameterSet,
    scene: &ScenePair,
    frame: &FrameRecord,
    mask: &AvailabilityMask,
) -> Result<Vec<Detection>> {
    if !mask.any() {
        return Err(Error::EmptyAvailability);
    }
    let batch = Batch::from_frames_observable(&[(scene, frame)], &[*mask])?;
    detections_from_batch(model, params, &batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub threshold: f64,
    pub matches: Vec<Match>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl MatchingResult {
    /// Whether prediction `i` was matched.
    pub fn is_tp(&self, i: usize) -> bool {
        self.matches.iter().any(|m| m.pred == i)
    }
}

/// Greedy center-distance matching: predictions in descending confidence
/// (ties by index) take the nearest unmatched same-class GT within
/// `threshold` (ties by index).
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruth],
    threshold: f64,
) -> MatchingResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    let mut false_positives = Vec::new();
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.class_id != preds[i].class_id {
                continue;
            }
            let d = planar_distance(&preds[i].bbox, &gt.bbox);
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) => {
                taken[j] = true;
                matches.push(Match {
                    pred: i,
                    gt: j,
                    distance: d,
                });
            }
            None => false_positives.push(i),
        }
    }
    let false_negatives = (0..gts.len()).filter(|&j| !taken[j]).collect();
    MatchingResult {
        threshold,
        matches,
        false_positives,
        false_negatives,
    }
}

/// Predictions, ground truth and matchings at every threshold for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub preds: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
    pub matchings: Vec<MatchingResult>,
}

impl FrameEval {
    pub fn new(preds: Vec<Detection>, gts: Vec<GroundTruth>) -> Self {
        let matchings = THRESHOLDS
            .iter()
            .map(|&t| match_detections(&preds, &gts, t))
            .collect();
        Self {
            preds,
            gts,
            matchings,
        }
    }

    fn matching(&self, threshold: f64) -> Result<&MatchingResult> {
        self.matchings
            .iter()
            .find(|m| m.threshold == threshold)
            .ok_or_else(|| Error::Contract(format!("no matching at threshold {threshold}")))
    }
}

/// All-point max-interpolated AP from `(confidence, is_tp)` pairs and the
/// GT count. `None` when there is no GT.
pub fn ap_from_ranked(mut scored: Vec<(f64, bool)>, num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    // Stable sort keeps dataset order among equal confidences.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev {
            ap += (recall[k] - prev) * precision[k];
            prev = recall[k];
        }
    }
    Some(ap)
}

/// AP of one class at one threshold over a set of evaluated frames.
pub fn average_precision(
    frames: &[FrameEval],
    class_id: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    let mut scored = Vec::new();
    let mut num_gt = 0;
    for f in frames {
        let m = f.matching(threshold)?;
        num_gt += f.gts.iter().filter(|g| g.class_id == class_id).count();
        for (i, p) in f.preds.iter().enumerate() {
            if p.class_id == class_id {
                scored.push((p.confidence, m.is_tp(i)));
            }
        }
    }
    Ok(ap_from_ranked(scored, num_gt))
}

/// Mean over classes with GT of the AP at `threshold`; `None` without GT.
pub fn class_mean_ap(frames: &[FrameEval], threshold: f64) -> Result<Option<f64>> {
    let mut aps = Vec::new();
    for c in 0..NUM_CLASSES {
        if let Some(ap) = average_precision(frames, c, threshold)? {
            aps.push(ap);
        }
    }
    Ok((!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over classes and thresholds.
    pub map: f64,
    /// Per class, mean over thresholds.
    pub per_class: BTreeMap<String, f64>,
    /// Per threshold, mean over classes.
    pub per_threshold: BTreeMap<String, f64>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

pub fn ap_summary(frames: &[FrameEval]) -> Result<ApSummary> {
    let mut per_class = BTreeMap::new();
    let mut per_threshold = BTreeMap::new();
    let mut table = [[0.0; THRESHOLDS.len()]; NUM_CLASSES];
    let mut present = Vec::new();
    for (c, row) in table.iter_mut().enumerate() {
        let mut has_gt = false;
        for (k, &t) in THRESHOLDS.iter().enumerate() {
            if let Some(ap) = average_precision(frames, c, t)? {
                row[k] = ap;
                has_gt = true;
            }
        }
        if has_gt {
            present.push(c);
            per_class.insert(
                class_name(c).to_string(),
                row.iter().sum::<f64>() / THRESHOLDS.len() as f64,
            );
        }
    }
    for (k, &t) in THRESHOLDS.iter().enumerate() {
        let v = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| table[c][k]).sum::<f64>() / present.len() as f64
        };
        per_threshold.insert(threshold_key(t), v);
    }
    let map = if present.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApSummary {
        map,
        per_class,
        per_threshold,
    })
}

/// Mean translation, scale, orientation, velocity and attribute errors of
/// true positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
    /// Set when there were no matches and every error was reported as 1.
    pub no_matches: bool,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 − IoU` of two boxes after aligning centers and yaw.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

pub fn tp_error_means(frames: &[FrameEval]) -> Result<TpErrors> {
    let mut sums = [0.0; 5];
    let mut n = 0usize;
    for f in frames {
        for m in &f.matching(TP_THRESHOLD)?.matches {
            let p = &f.preds[m.pred];
            let g = &f.gts[m.gt];
            sums[0] += m.distance;
            sums[1] += scale_error(&p.bbox, &g.bbox);
            sums[2] += wrap_angle(p.bbox.yaw - g.bbox.yaw).abs();
            sums[3] += (p.bbox.velocity[0] - g.bbox.velocity[0])
                .hypot(p.bbox.velocity[1] - g.bbox.velocity[1]);
            sums[4] += (p.attribute != g.attribute) as u8 as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(TpErrors {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: 1.0,
            aae: 1.0,
            no_matches: true,
        });
    }
    let m = sums.map(|s| s / n as f64);
    Ok(TpErrors {
        ate: m[0],
        ase: m[1],
        aoe: m[2],
        ave: m[3],
        aae: m[4],
        no_matches: false,
    })
}

/// `(5·mAP + Σ max(0, 1 − err)) / 10`.
pub fn composite_score(map: f64, errors: &TpErrors) -> f64 {
    (5.0 * map
        + errors
            .as_array()
            .iter()
            .map(|e| (1.0 - e).max(0.0))
            .sum::<f64>())
        / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Standard,
    Dropout,
    Weather,
    Zeroshot,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Standard,
        Protocol::Dropout,
        Protocol::Weather,
        Protocol::Zeroshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::Dropout => "dropout",
            Protocol::Weather => "weather",
            Protocol::Zeroshot => "zeroshot",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the dataset configuration the checkpoint was trained on.
    pub dataset_hash: String,
    pub map: f64,
    pub composite: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub no_matches: bool,
    pub per_class: BTreeMap<String, f64>,
    pub per_threshold: BTreeMap<String, f64>,
    pub per_condition: BTreeMap<String, f64>,
    pub per_subset: BTreeMap<String, f64>,
    pub zero_shot_acc: Option<f64>,
    pub trainable_fraction: f64,
}

impl MetricsReport {
    fn from_frames(protocol: Protocol, ck: &Checkpoint, frames: &[FrameEval]) -> Result<Self> {
        let ap = ap_summary(frames)?;
        let err = tp_error_means(frames)?;
        Ok(MetricsReport {
            protocol,
            seed: ck.config.seed,
            config_hash: ck.dataset_hash.clone(),
            dataset_hash: ck.dataset_hash.clone(),
            map: ap.map,
            composite: composite_score(ap.map, &err),
            mate: err.ate,
            mase: err.ase,
            maoe: err.aoe,
            mave: err.ave,
            maae: err.aae,
            no_matches: err.no_matches,
            per_class: ap.per_class,
            per_threshold: ap.per_threshold,
            per_condition: BTreeMap::new(),
            per_subset: BTreeMap::new(),
            zero_shot_acc: None,
            trainable_fraction: trainability_report(&ck.params).fraction,
        })
    }

    /// mAP at a single threshold (mean over classes).
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.get(&threshold_key(threshold)).copied()
    }

    /// Range checks on every reported number.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("map", self.map)?;
        unit("composite", self.composite)?;
        unit("trainable_fraction", self.trainable_fraction)?;
        for (k, v) in self
            .per_class
            .iter()
            .chain(&self.per_threshold)
            .chain(&self.per_condition)
            .chain(&self.per_subset)
        {
            unit(k, *v)?;
        }
        if let Some(z) = self.zero_shot_acc {
            unit("zero_shot_acc", z)?;
        }
        for (name, v) in [
            ("mate", self.mate),
            ("mase", self.mase),
            ("maoe", self.maoe),
            ("mave", self.mave),
            ("maae", self.maae),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!(
                    "{name} = {v} is not a finite non-negative error"
                )));
            }
        }
        Ok(())
    }
}

/// Evaluates every frame of `manifest` under `mask_for(scene)`. Scenes
/// for which `keep` is false are skipped.
fn evaluate_frames(
    ck: &Checkpoint,
    manifest: &DatasetManifest,
    mask: &AvailabilityMask,
    keep: impl Fn(&ScenePair) -> bool,
) -> Result<Vec<FrameEval>> {
    let mut out = Vec::new();
    for (rec, f) in manifest.frames() {
        if !keep(&rec.scene) {
            continue;
        }
        let preds = predict_frame(&ck.model, &ck.params, &rec.scene, f, mask)?;
        out.push(FrameEval::new(preds, ground_truth(&rec.scene, f)));
    }
    Ok(out)
}

/// Full-modality evaluation of a split.
pub fn eval_standard(ck: &Checkpoint, test: &DatasetManifest) -> Result<MetricsReport> {
    ck.check_dataset(&test.header.config_hash)?;
    let frames = evaluate_frames(ck, test, &AvailabilityMask::ALL, |_| true)?;
    MetricsReport::from_frames(Protocol::Standard, ck, &frames)
}

/// Singletons, the full set and lidar+camera.
pub fn default_subsets() -> Vec<AvailabilityMask> {
    let mut v: Vec<AvailabilityMask> = Modality::ALL
        .iter()
        .map(|&m| AvailabilityMask::only(&[m]))
        .collect();
    v.push(AvailabilityMask::ALL);
    v.push(AvailabilityMask::only(&[Modality::Lidar, Modality::Camera]));
    v
}

/// One report per subset, keyed by its label.
pub fn eval_dropout(
    ck: &Checkpoint,
    test: &DatasetManifest,
    subsets: &[AvailabilityMask],
) -> Result<BTreeMap<String, MetricsReport>> {
    ck.check_dataset(&test.header.config_hash)?;
    let mut out = BTreeMap::new();
    for s in subsets {
        if !s.any() {
            return Err(Error::EmptyAvailability);
        }
        let frames = evaluate_frames(ck, test, s, |_| true)?;
        out.insert(
            s.label(),
            MetricsReport::from_frames(Protocol::Dropout, ck, &frames)?,
        );
    }
    Ok(out)
}

/// Full-set report with `per_subset` holding each subset's mAP.
pub fn dropout_summary(
    ck: &Checkpoint,
    test: &DatasetManifest,
    subsets: &[AvailabilityMask],
) -> Result<MetricsReport> {
    let per = eval_dropout(ck, test, subsets)?;
    let mut report = match per.get(&AvailabilityMask::ALL.label()) {
        Some(r) => r.clone(),
        None => {
            let frames = evaluate_frames(ck, test, &AvailabilityMask::ALL, |_| true)?;
            MetricsReport::from_frames(Protocol::Dropout, ck, &frames)?
        }
    };
    report.per_subset = per.iter().map(|(k, r)| (k.clone(), r.map)).collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRow {
    pub condition: String,
    pub ap: f64,
    pub frames: usize,
}

/// AP at 0.5 m per weather condition plus a total row.
pub fn eval_weather(ck: &Checkpoint, test: &DatasetManifest) -> Result<Vec<WeatherRow>> {
    ck.check_dataset(&test.header.config_hash)?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for w in Weather::ALL {
        let frames = evaluate_frames(ck, test, &AvailabilityMask::ALL, |s| s.weather == w)?;
        rows.push(WeatherRow {
            condition: w.name().to_string(),
            ap: class_mean_ap(&frames, WEATHER_THRESHOLD)?.unwrap_or(0.0),
            frames: frames.len(),
        });
        all.extend(frames);
    }
    rows.push(WeatherRow {
        condition: "total".into(),
        ap: class_mean_ap(&all, WEATHER_THRESHOLD)?.unwrap_or(0.0),
        frames: all.len(),
    });
    Ok(rows)
}

/// Full-modality report with `per_condition` filled from the weather table.
pub fn weather_summary(ck: &Checkpoint, test: &DatasetManifest) -> Result<MetricsReport> {
    let rows = eval_weather(ck, test)?;
    let frames = evaluate_frames(ck, test, &AvailabilityMask::ALL, |_| true)?;
    let mut report = MetricsReport::from_frames(Protocol::Weather, ck, &frames)?;
    report.per_condition = rows.into_iter().map(|r| (r.condition, r.ap)).collect();
    Ok(report)
}

const EMBED_CHUNK: usize = 4096;

/// Unit-norm embeddings of all observed, labelled object candidates of
/// modality `m` whose label satisfies `keep`.
pub fn modality_embeddings(
    model: &Model,
    params: &ParameterSet,
    manifest: &DatasetManifest,
    m: Modality,
    keep: impl Fn(usize) -> bool,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let dim = m.dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (_, f) in manifest.frames() {
        let feats = f.modality(m);
        for (i, &l) in f.labels.iter().enumerate() {
            if keep(l) && feats.observed(i) {
                x.extend_from_slice(feats.row(i));
                y.push(l);
            }
        }
    }
    let mut z = Vec::with_capacity(y.len());
    for (k, chunk) in x.chunks(EMBED_CHUNK * dim).enumerate() {
        let rows = chunk.len() / dim;
        let mut g = Graph::no_grad();
        let xv = g.constant(Tensor::new(&[rows, dim], chunk.to_vec())?);
        let e = model.embed(&mut g, params, m, xv)?;
        let t = g.value(e);
        z.extend((0..rows).map(|i| t.row(i).to_vec()));
        debug_assert_eq!(z.len(), (k * EMBED_CHUNK + rows).min(y.len()));
    }
    Ok((z, y))
}

/// Renormalized mean of unit vectors; `None` for an empty set or a zero
/// mean.
pub fn prototype(embeddings: &[&[f64]]) -> Option<Vec<f64>> {
    let first = embeddings.first()?;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        for (a, b) in mean.iter_mut().zip(e.iter()) {
            *a += b;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 1e-12).then(|| mean.into_iter().map(|v| v / norm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub samples: usize,
    pub chance: f64,
    /// Predicted class counts over held-out samples.
    pub confusion: Vec<usize>,
}

/// Class prototypes from object-level train embeddings; held-out
/// (modality, class) test embeddings are classified by nearest prototype.
pub fn eval_zero_shot(
    ck: &Checkpoint,
    train: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<ZeroShotResult> {
    ck.check_dataset(&test.header.config_hash)?;
    ck.check_dataset(&train.header.config_hash)?;
    let holdout = &train.header.holdout;
    if holdout.is_empty() {
        return Err(Error::Protocol(
            "zero-shot evaluation needs a held-out (modality, class) pair".into(),
        ));
    }
    let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); NUM_CLASSES];
    for m in Modality::OBJECT_LEVEL {
        let (z, y) = modality_embeddings(&ck.model, &ck.params, train, m, |l| l != BACKGROUND)?;
        for (e, l) in z.into_iter().zip(y) {
            pools[l].push(e);
        }
    }
    let protos: Vec<Option<Vec<f64>>> = pools
        .iter()
        .map(|p| prototype(&p.iter().map(|v| v.as_slice()).collect::<Vec<_>>()))
        .collect();
    let mut hits = 0;
    let mut samples = 0;
    let mut confusion = vec![0; NUM_CLASSES];
    for h in holdout {
        let (z, _) =
            modality_embeddings(&ck.model, &ck.params, test, h.modality, |l| l == h.class_id)?;
        for e in &z {
            let mut best: Option<(usize, f64)> = None;
            for (c, p) in protos.iter().enumerate() {
                if let Some(p) = p {
                    let d: f64 = p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((c, d));
                    }
                }
            }
            if let Some((c, _)) = best {
                confusion[c] += 1;
                hits += (c == h.class_id) as usize;
            }
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::Protocol(
            "no held-out samples in the evaluation split".into(),
        ));
    }
    Ok(ZeroShotResult {
        accuracy: hits as f64 / samples as f64,
        samples,
        chance: 1.0 / NUM_CLASSES as f64,
        confusion,
    })
}

/// Standard report with the zero-shot accuracy filled in.
pub fn zero_shot_summary(
    ck: &Checkpoint,
    train: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<MetricsReport> {
    let z = eval_zero_shot(ck, train, test)?;
    let frames = evaluate_frames(ck, test, &AvailabilityMask::ALL, |_| true)?;
    let mut report = MetricsReport::from_frames(Protocol::Zeroshot, ck, &frames)?;
    report.zero_shot_acc = Some(z.accuracy);
    Ok(report)
}

/// Runs one protocol and returns its report.
pub fn run_protocol(
    protocol: Protocol,
    ck: &Checkpoint,
    train: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<MetricsReport> {
    match protocol {
        Protocol::Standard => eval_standard(ck, test),
        Protocol::Dropout => dropout_summary(ck, test, &default_subsets()),
        Protocol::Weather => weather_summary(ck, test),
        Protocol::Zeroshot => zero_shot_summary(ck, train, test),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub trainable_fraction: f64,
    pub composite: f64,
}

/// Trains and evaluates one model per rank on the same data and seed.
pub fn sweep_ranks(
    base: &TrainConfig,
    ranks: &[usize],
    pretrained: &ParameterSet,
    train_split: &DatasetManifest,
    test: &DatasetManifest,
    weather: &WeatherTable,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &r in ranks {
        let cfg = base.clone().with_rank(r);
        let ck = train(&cfg, pretrained, train_split, weather)?;
        let rep = eval_standard(&ck, test)?;
        rows.push(SweepRow {
            rank: r,
            trainable_fraction: rep.trainable_fraction,
            composite: rep.composite,
        });
    }
    Ok(rows)
}
