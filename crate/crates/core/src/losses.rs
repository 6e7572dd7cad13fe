//! Detection, metric and temporal-consistency objectives and their weighted
//! sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{DetectionOutput, BOX_OFFSET};
use crate::model::{Batch, ForwardOutput};
use crate::tensor::{iou_aligned_row, Graph, Tensor, Var};
use crate::world::{wrap_angle, Box3D, FrameTag, Modality, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_det: f64,
    pub lambda_met: f64,
    pub lambda_cons: f64,
    pub margin: f64,
    pub gamma: f64,
    /// Adds `‖z^{m1} − z^{m2}‖²` between modalities of the same candidate
    /// to the consistency term.
    pub cross_modal_consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_met: 0.5,
            lambda_cons: 0.1,
            margin: 0.3,
            gamma: 2.0,
            cross_modal_consistency: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_det", self.lambda_det),
            ("lambda_met", self.lambda_met),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_cls: f64,
    pub det_iou: f64,
    pub det_orient: f64,
    pub metric: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the terms.
    pub fn combine(
        det_cls: f64,
        det_iou: f64,
        det_orient: f64,
        metric: f64,
        consistency: f64,
        config: &LossConfig,
    ) -> Result<LossBreakdown> {
        config.validate()?;
        Ok(LossBreakdown {
            det_cls,
            det_iou,
            det_orient,
            metric,
            consistency,
            total: config.lambda_det * (det_cls + det_iou + det_orient)
                + config.lambda_met * metric
                + config.lambda_cons * consistency,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.det_cls,
            self.det_iou,
            self.det_orient,
            self.metric,
            self.consistency,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `−(1 − p_t)^γ · log p_t` with `p = softmax(logits)`.
pub fn focal_ce(logits: &[f64], target: usize, gamma: f64) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logits".into()));
    }
    if target >= logits.len() {
        return Err(Error::Contract(format!(
            "target {target} outside {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let logp = logits[target] - lse;
    let p = logp.exp();
    Ok(-(1.0 - p).powf(gamma) * logp)
}

/// Axis-aligned IoU of two boxes with yaw ignored.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    Ok(iou_aligned_row(&a.aligned(), &b.aligned())?.0)
}

/// Hinge on Euclidean distances between unit-norm embeddings.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    for z in [a, p, n] {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("triplet input has norm {norm}")));
        }
    }
    Ok((distance(a, p) - distance(a, n) + margin).max(0.0))
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One mined triplet of indices into the embedding pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard cross-modal mining: for each anchor the farthest same-class
/// embedding from another modality and the nearest other-class embedding.
/// Ties go to the lowest index; anchors lacking either are skipped.
pub fn mine_triplets(
    embeddings: &[&[f64]],
    labels: &[usize],
    modalities: &[Modality],
) -> Vec<Triplet> {
    let n = embeddings.len();
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = distance(embeddings[a], embeddings[j]);
            if labels[j] == labels[a] {
                if modalities[j] != modalities[a] && pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((k, _))) = (pos, neg) {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: k,
            });
        }
    }
    out
}

/// Mean squared distance over `(z_t, z_{t+1})` pairs; zero without pairs.
pub fn consistency_loss(pairs: &[(&[f64], &[f64])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(a, b)| {
            a.iter()
                .zip(*b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Detection terms for a set of candidate outputs. `targets[i]` is the
/// ground-truth box of an assigned candidate.
pub fn det_loss(
    outputs: &[DetectionOutput],
    anchors: &[Box3D],
    labels: &[usize],
    targets: &[Option<Box3D>],
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    let n = outputs.len();
    if anchors.len() != n || labels.len() != n || targets.len() != n {
        return Err(Error::Shape("det_loss inputs differ in length".into()));
    }
    if n == 0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let mut cls = 0.0;
    let (mut iou, mut orient, mut pos) = (0.0, 0.0, 0usize);
    for i in 0..n {
        cls += focal_ce(&outputs[i].class_logits, labels[i], gamma)?;
        if let (true, Some(t)) = (labels[i] != BACKGROUND, targets[i]) {
            let r = &outputs[i].box_residuals;
            let a = &anchors[i];
            let pred = [
                a.center[0] + r[0],
                a.center[1] + r[1],
                a.center[2] + r[2],
                a.size[0] * r[3].exp(),
                a.size[1] * r[4].exp(),
                a.size[2] * r[5].exp(),
            ];
            iou += 1.0 - iou_aligned_row(&pred, &t.aligned())?.0;
            let dy = wrap_angle(t.yaw - a.yaw);
            orient += (r[6] - dy.sin()).abs() + (r[7] - dy.cos()).abs();
            pos += 1;
        }
    }
    let pm = |v: f64| if pos == 0 { 0.0 } else { v / pos as f64 };
    Ok((cls / n as f64, pm(iou), pm(orient)))
}

/// Graph nodes of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub det_cls: Var,
    pub det_iou: Var,
    pub det_orient: Var,
    pub metric: Var,
    pub consistency: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            det_cls: g.scalar_value(self.det_cls),
            det_iou: g.scalar_value(self.det_iou),
            det_orient: g.scalar_value(self.det_orient),
            metric: g.scalar_value(self.metric),
            consistency: g.scalar_value(self.consistency),
            total: g.scalar_value(self.total),
        }
    }
}

/// Mean focal loss over rows of `logits` (n × C).
pub fn focal_ce_graph(g: &mut Graph, logits: Var, targets: &[usize], gamma: f64) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let logp = g.gather(lp, targets)?;
    let p = g.exp(logp)?;
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let w = g.powf(q, gamma)?;
    let wl = g.mul(w, logp)?;
    let m = g.mean(wl);
    Ok(g.scale(m, -1.0))
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Detection terms on the graph from raw head outputs.
pub fn det_loss_graph(
    g: &mut Graph,
    head: Var,
    batch: &Batch,
    gamma: f64,
) -> Result<(Var, Var, Var)> {
    let (rows, _) = g.value(head).dims2();
    if rows != batch.len() {
        return Err(Error::Shape(format!(
            "{rows} outputs for {} candidates",
            batch.len()
        )));
    }
    let logits = g.slice_cols(head, 0, BOX_OFFSET)?;
    let cls = focal_ce_graph(g, logits, &batch.labels, gamma)?;
    let pos: Vec<usize> = (0..rows)
        .filter(|&i| batch.labels[i] != BACKGROUND && batch.targets[i].is_some())
        .collect();
    if pos.is_empty() {
        let (a, b) = (zero(g), zero(g));
        return Ok((cls, a, b));
    }
    let p = pos.len();
    let sel = g.select_rows(head, &pos)?;
    let d_center = g.slice_cols(sel, BOX_OFFSET, 3)?;
    let d_size = g.slice_cols(sel, BOX_OFFSET + 3, 3)?;
    let sc = g.slice_cols(sel, BOX_OFFSET + 6, 2)?;
    let mut centers = Vec::with_capacity(p * 3);
    let mut sizes = Vec::with_capacity(p * 3);
    let mut target = Vec::with_capacity(p * 6);
    let mut orient = Vec::with_capacity(p * 2);
    for &i in &pos {
        let a = &batch.anchors[i];
        let t = batch.targets[i].expect("filtered");
        centers.extend_from_slice(&a.center);
        sizes.extend_from_slice(&a.size);
        target.extend_from_slice(&t.aligned());
        let dy = wrap_angle(t.yaw - a.yaw);
        orient.extend_from_slice(&[dy.sin(), dy.cos()]);
    }
    let centers = g.constant(Tensor::new(&[p, 3], centers)?);
    let sizes = g.constant(Tensor::new(&[p, 3], sizes)?);
    let c = g.add(centers, d_center)?;
    let e = g.exp(d_size)?;
    let s = g.mul(sizes, e)?;
    let pred = g.concat_cols(&[c, s])?;
    let iou = g.iou_aligned(pred, &Tensor::new(&[p, 6], target)?)?;
    let mean_iou = g.mean(iou);
    let iou_loss = g.scale(mean_iou, -1.0);
    let iou_loss = g.add_scalar(iou_loss, 1.0);

    let ot = g.constant(Tensor::new(&[p, 2], orient)?);
    let diff = g.sub(sc, ot)?;
    let ad = g.abs(diff);
    let per = g.sum_cols(ad)?;
    let orient_loss = g.mean(per);
    Ok((cls, iou_loss, orient_loss))
}

/// Pool of object-level embeddings of assigned candidates used for
/// metric learning.
struct Pool {
    var: Var,
    labels: Vec<usize>,
    modalities: Vec<Modality>,
}

fn metric_pool(g: &mut Graph, out: &ForwardOutput, batch: &Batch) -> Result<Option<Pool>> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut modalities = Vec::new();
    for m in Modality::OBJECT_LEVEL {
        let Some((z, rows)) = &out.per_modality[m.index()] else {
            continue;
        };
        let local: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| batch.labels[r] != BACKGROUND)
            .map(|(k, _)| k)
            .collect();
        if local.is_empty() {
            continue;
        }
        for &k in &local {
            labels.push(batch.labels[rows[k]]);
            modalities.push(m);
        }
        parts.push(g.select_rows(*z, &local)?);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let var = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    Ok(Some(Pool {
        var,
        labels,
        modalities,
    }))
}

fn row_distances(g: &mut Graph, pool: Var, a: &[usize], b: &[usize]) -> Result<Var> {
    let za = g.select_rows(pool, a)?;
    let zb = g.select_rows(pool, b)?;
    let d = g.sub(za, zb)?;
    let sq = g.square(d);
    let s = g.sum_cols(sq)?;
    g.sqrt(s)
}

/// Mean triplet hinge over batch-hard cross-modal triplets; zero when none.
pub fn metric_loss_graph(
    g: &mut Graph,
    out: &ForwardOutput,
    batch: &Batch,
    margin: f64,
) -> Result<(Var, usize)> {
    let Some(pool) = metric_pool(g, out, batch)? else {
        return Ok((zero(g), 0));
    };
    let t = g.value(pool.var).clone();
    let rows: Vec<&[f64]> = (0..pool.labels.len()).map(|i| t.row(i)).collect();
    let triplets = mine_triplets(&rows, &pool.labels, &pool.modalities);
    if triplets.is_empty() {
        return Ok((zero(g), 0));
    }
    let a: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let p: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let n: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let dap = row_distances(g, pool.var, &a, &p)?;
    let dan = row_distances(g, pool.var, &a, &n)?;
    let diff = g.sub(dap, dan)?;
    let h = g.add_scalar(diff, margin);
    let h = g.relu(h);
    Ok((g.mean(h), triplets.len()))
}

/// Row pairs `(t, t+1)` of the same assigned instance, keyed by scene and
/// instance, restricted to rows present in `rows`.
fn temporal_pairs(batch: &Batch, rows: &[usize]) -> Vec<(usize, usize)> {
    let mut t0: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut t1: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for (k, &r) in rows.iter().enumerate() {
        if batch.labels[r] == BACKGROUND {
            continue;
        }
        if let Some(id) = batch.instances[r] {
            let key = (batch.scene_of[r], id);
            match batch.tags[r] {
                FrameTag::T => t0.insert(key, k),
                FrameTag::T1 => t1.insert(key, k),
            };
        }
    }
    t0.iter()
        .filter_map(|(key, &a)| t1.get(key).map(|&b| (a, b)))
        .collect()
}

/// Mean squared distance across frames per object-level modality and for
/// fused embeddings (plus cross-modal pairs when enabled).
pub fn consistency_loss_graph(
    g: &mut Graph,
    out: &ForwardOutput,
    batch: &Batch,
    cross_modal: bool,
) -> Result<(Var, usize)> {
    let mut diffs = Vec::new();
    let mut count = 0;
    let mut push = |g: &mut Graph, z: Var, pairs: &[(usize, usize)]| -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let za = g.select_rows(z, &a)?;
        let zb = g.select_rows(z, &b)?;
        diffs.push(g.sub(za, zb)?);
        count += pairs.len();
        Ok(())
    };
    for m in Modality::OBJECT_LEVEL {
        if let Some((z, rows)) = &out.per_modality[m.index()] {
            let pairs = temporal_pairs(batch, rows);
            push(g, *z, &pairs)?;
        }
    }
    let all: Vec<usize> = (0..batch.len()).collect();
    let fused_pairs = temporal_pairs(batch, &all);
    push(g, out.fused, &fused_pairs)?;
    if cross_modal {
        let n = batch.len();
        let objs = Modality::OBJECT_LEVEL;
        for (i, m1) in objs.iter().enumerate() {
            for m2 in &objs[i + 1..] {
                let (Some((z1, r1)), Some((z2, r2))) =
                    (&out.per_modality[m1.index()], &out.per_modality[m2.index()])
                else {
                    continue;
                };
                let s1 = g.scatter_rows(*z1, r1, n)?;
                let s2 = g.scatter_rows(*z2, r2, n)?;
                let both: Vec<usize> = r1
                    .iter()
                    .copied()
                    .filter(|r| r2.contains(r) && batch.labels[*r] != BACKGROUND)
                    .collect();
                if both.is_empty() {
                    continue;
                }
                let a = g.select_rows(s1, &both)?;
                let b = g.select_rows(s2, &both)?;
                diffs.push(g.sub(a, b)?);
                count += both.len();
            }
        }
    }
    if diffs.is_empty() {
        return Ok((zero(g), 0));
    }
    let d = if diffs.len() == 1 {
        diffs[0]
    } else {
        g.concat_rows(&diffs)?
    };
    let sq = g.square(d);
    let per = g.sum_cols(sq)?;
    Ok((g.mean(per), count))
}

/// The weighted joint objective.
pub fn joint_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    batch: &Batch,
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    let (det_cls, det_iou, det_orient) = det_loss_graph(g, out.head, batch, config.gamma)?;
    let (metric, _) = metric_loss_graph(g, out, batch, config.margin)?;
    let (consistency, _) = consistency_loss_graph(g, out, batch, config.cross_modal_consistency)?;
    let d1 = g.add(det_cls, det_iou)?;
    let det = g.add(d1, det_orient)?;
    let det = g.scale(det, config.lambda_det);
    let met = g.scale(metric, config.lambda_met);
    let cons = g.scale(consistency, config.lambda_cons);
    let t = g.add(det, met)?;
    let total = g.add(t, cons)?;
    Ok(LossVars {
        det_cls,
        det_iou,
        det_orient,
        metric,
        consistency,
        total,
    })
}
