//! Masked cross-attention with gated residuals, and the per-candidate
//! detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::LinearLayer;
use crate::tensor::{masked_softmax, Graph, ParameterSet, Tensor, Var};
use crate::world::scene::{gaussian, stable_seed};
use crate::world::{wrap_angle, AvailabilityMask, Box3D, Modality, NUM_CLASSES, NUM_MODALITIES};

/// Query `q`, key/value maps `K`, `V` and one gate per modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionModule {
    pub dim: usize,
}

impl FusionModule {
    pub const Q: &'static str = "fusion.q";
    pub const K: &'static str = "fusion.K";
    pub const V: &'static str = "fusion.V";

    pub fn gate_w(m: Modality) -> String {
        format!("fusion.gate.{}.w", m.name())
    }

    pub fn gate_b(m: Modality) -> String {
        format!("fusion.gate.{}.b", m.name())
    }

    pub fn init(params: &mut ParameterSet, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0xF05E));
        let std = (1.0 / dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| gaussian(&mut rng, std)).collect::<Vec<_>>();
        params.insert(Self::Q, Tensor::from_raw(vec![1, dim], draw(dim)));
        params.insert(Self::K, Tensor::from_raw(vec![dim, dim], draw(dim * dim)));
        params.insert(Self::V, Tensor::from_raw(vec![dim, dim], draw(dim * dim)));
        for m in Modality::ALL {
            params.insert(Self::gate_w(m), Tensor::zeros(&[dim, 1]));
            params.insert(Self::gate_b(m), Tensor::zeros(&[1]));
        }
        Self { dim }
    }

    fn check(&self, embeddings: &[(Modality, &[f64])], mask: &AvailabilityMask) -> Result<()> {
        if !mask.any() {
            return Err(Error::EmptyAvailability);
        }
        for m in mask.modalities() {
            match embeddings.iter().find(|(k, _)| *k == m) {
                Some((_, z)) if z.len() == self.dim => {}
                Some((_, z)) => {
                    return Err(Error::Shape(format!(
                        "{m} embedding has length {}",
                        z.len()
                    )))
                }
                None => {
                    return Err(Error::Unavailable(format!(
                        "no embedding supplied for surviving {m}"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn get<'a>(params: &'a ParameterSet, path: &str) -> Result<&'a Tensor> {
    params
        .get(path)
        .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M · z` for a row-major `d × d` matrix.
fn matvec(m: &[f64], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], z)).collect()
}

/// Normalised gate weights per modality; zero where masked.
pub fn gate_weights(
    embeddings: &[(Modality, &[f64])],
    mask: &AvailabilityMask,
    fusion: &FusionModule,
    params: &ParameterSet,
) -> Result<[f64; NUM_MODALITIES]> {
    fusion.check(embeddings, mask)?;
    let mut g = [0.0; NUM_MODALITIES];
    for (m, z) in embeddings {
        if mask.get(*m) {
            let w = get(params, &FusionModule::gate_w(*m))?;
            let b = get(params, &FusionModule::gate_b(*m))?;
            g[m.index()] = crate::tensor::sigmoid_scalar(dot(w.data(), z) + b.item());
        }
    }
    let total: f64 = g.iter().sum();
    Ok(g.map(|v| v / total))
}

/// Single-candidate fusion: attention context plus gated residual,
/// renormalised.
pub fn fuse(
    embeddings: &[(Modality, &[f64])],
    mask: &AvailabilityMask,
    fusion: &FusionModule,
    params: &ParameterSet,
) -> Result<Vec<f64>> {
    let gates = gate_weights(embeddings, mask, fusion, params)?;
    let d = fusion.dim;
    let q = get(params, FusionModule::Q)?.data();
    let k = get(params, FusionModule::K)?.data();
    let v = get(params, FusionModule::V)?.data();
    let mut scores = [0.0; NUM_MODALITIES];
    let mut present = [None; NUM_MODALITIES];
    for (m, z) in embeddings {
        if mask.get(*m) {
            scores[m.index()] = dot(q, &matvec(k, z)) / (d as f64).sqrt();
            present[m.index()] = Some(*z);
        }
    }
    let attn = masked_softmax(&scores, &mask.0)?;
    let mut out = vec![0.0; d];
    for i in 0..NUM_MODALITIES {
        if let Some(z) = present[i] {
            let vz = matvec(v, z);
            for j in 0..d {
                out[j] += attn[i] * vz[j] + gates[i] * z[j];
            }
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateEmbedding(norm));
    }
    Ok(out.into_iter().map(|x| x / norm).collect())
}

/// Batched fusion on the graph. `embeddings[m]` is an `n × d` matrix (or
/// `None` when the modality is absent for every row); `mask` is row-major
/// `n × 5`. Masked entries receive exactly zero attention and gate weight.
pub fn fuse_batch(
    g: &mut Graph,
    params: &ParameterSet,
    fusion: &FusionModule,
    embeddings: &[Option<Var>; NUM_MODALITIES],
    mask: &[bool],
) -> Result<Var> {
    let d = fusion.dim;
    let n = mask.len() / NUM_MODALITIES;
    if mask.len() != n * NUM_MODALITIES || n == 0 {
        return Err(Error::Shape(format!(
            "fusion mask of length {}",
            mask.len()
        )));
    }
    for i in 0..n {
        if !mask[i * NUM_MODALITIES..(i + 1) * NUM_MODALITIES]
            .iter()
            .any(|&b| b)
        {
            return Err(Error::EmptyAvailability);
        }
    }
    for (m, e) in Modality::ALL.iter().zip(embeddings) {
        match e {
            Some(z) if g.value(*z).shape() != [n, d] => {
                return Err(Error::Shape(format!(
                    "{m} embeddings {:?}, expected [{n}, {d}]",
                    g.value(*z).shape()
                )))
            }
            None if (0..n).any(|i| mask[i * NUM_MODALITIES + m.index()]) => {
                return Err(Error::Unavailable(format!(
                    "{m} is unmasked but has no embeddings"
                )))
            }
            _ => {}
        }
    }
    let q = g.param(params, FusionModule::Q)?;
    let k = g.param(params, FusionModule::K)?;
    let v = g.param(params, FusionModule::V)?;
    // s_m = q · (K z) = z · (qᵀK).
    let qk = g.matmul(q, k)?;
    let zero_col = g.constant(Tensor::zeros(&[n, 1]));
    let mut score_cols = Vec::with_capacity(NUM_MODALITIES);
    let mut gate_cols = Vec::with_capacity(NUM_MODALITIES);
    for (m, e) in Modality::ALL.iter().zip(embeddings) {
        match e {
            Some(z) => {
                let s = g.matmul_nt(*z, qk)?;
                score_cols.push(g.scale(s, 1.0 / (d as f64).sqrt()));
                let w = g.param(params, &FusionModule::gate_w(*m))?;
                let b = g.param(params, &FusionModule::gate_b(*m))?;
                let pre = g.matmul(*z, w)?;
                let pre = g.add_row(pre, b)?;
                gate_cols.push(g.sigmoid(pre));
            }
            None => {
                score_cols.push(zero_col);
                gate_cols.push(zero_col);
            }
        }
    }
    let scores = g.concat_cols(&score_cols)?;
    let attn = g.masked_softmax_rows(scores, mask)?;
    let raw = g.concat_cols(&gate_cols)?;
    let mask01 = g.constant(Tensor::from_raw(
        vec![n, NUM_MODALITIES],
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let masked = g.mul(raw, mask01)?;
    let total = g.sum_cols(masked)?;
    let inv = g.powf(total, -1.0)?;
    let gates = g.mul_col(masked, inv)?;

    let mut acc: Option<Var> = None;
    for (i, e) in embeddings.iter().enumerate() {
        let Some(z) = e else { continue };
        let a_i = g.slice_cols(attn, i, 1)?;
        let g_i = g.slice_cols(gates, i, 1)?;
        let vz = g.matmul_nt(*z, v)?;
        let ctx = g.mul_col(vz, a_i)?;
        let res = g.mul_col(*z, g_i)?;
        let term = g.add(ctx, res)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or(Error::EmptyAvailability)?;
    g.normalize_rows(acc)
}

pub const GEOMETRY_DIM: usize = 8;
/// Class logits (classes + background), 8 box residuals, velocity, attribute.
pub const HEAD_OUT: usize = NUM_CLASSES + 1 + 8 + 2 + 1;
pub const BOX_OFFSET: usize = NUM_CLASSES + 1;
pub const VEL_OFFSET: usize = BOX_OFFSET + 8;
pub const ATTR_OFFSET: usize = VEL_OFFSET + 2;

/// Anchor geometry fed to the head, rescaled to order-one magnitudes.
pub fn anchor_geometry(b: &Box3D) -> [f64; GEOMETRY_DIM] {
    [
        b.center[0] / 20.0,
        b.center[1] / 20.0,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionHead {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
}

impl DetectionHead {
    pub fn init(params: &mut ParameterSet, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0xDE7E));
        let l1 = LinearLayer::init(
            params,
            "detect.l1",
            embed_dim + GEOMETRY_DIM,
            hidden,
            &mut rng,
        );
        let l2 = LinearLayer::init(params, "detect.l2", hidden, HEAD_OUT, &mut rng);
        // Start from an identity rotation residual (cos Δyaw = 1).
        params
            .get_mut(&l2.bias_path())
            .expect("just inserted")
            .data_mut()[BOX_OFFSET + 7] = 1.0;
        Self { l1, l2 }
    }

    /// Raw head outputs `n × HEAD_OUT` from fused embeddings and anchors.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        fused: Var,
        anchors: &[Box3D],
    ) -> Result<Var> {
        let geo: Vec<f64> = anchors.iter().flat_map(anchor_geometry).collect();
        let geo = g.constant(Tensor::new(&[anchors.len(), GEOMETRY_DIM], geo)?);
        let x = g.concat_cols(&[fused, geo])?;
        let h = self.l1.forward(g, params, x)?;
        let h = g.relu(h);
        self.l2.forward(g, params, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub class_logits: Vec<f64>,
    /// Δx, Δy, Δz, Δlog w, Δlog l, Δlog h, sin Δyaw, cos Δyaw.
    pub box_residuals: [f64; 8],
    pub velocity: [f64; 2],
    pub attribute_logit: f64,
}

impl DetectionOutput {
    pub fn from_row(row: &[f64]) -> Self {
        let mut box_residuals = [0.0; 8];
        box_residuals.copy_from_slice(&row[BOX_OFFSET..VEL_OFFSET]);
        Self {
            class_logits: row[..BOX_OFFSET].to_vec(),
            box_residuals,
            velocity: [row[VEL_OFFSET], row[VEL_OFFSET + 1]],
            attribute_logit: row[ATTR_OFFSET],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.class_logits
            .iter()
            .chain(&self.box_residuals)
            .chain(&self.velocity)
            .chain(std::iter::once(&self.attribute_logit))
            .all(|v| v.is_finite())
    }
}

/// Head outputs for one fused embedding and anchor.
pub fn detect(
    fused: &[f64],
    anchor: &Box3D,
    head: &DetectionHead,
    params: &ParameterSet,
) -> Result<DetectionOutput> {
    let mut g = Graph::no_grad();
    let f = g.constant(Tensor::new(&[1, fused.len()], fused.to_vec())?);
    let out = head.forward(&mut g, params, f, std::slice::from_ref(anchor))?;
    Ok(DetectionOutput::from_row(g.value(out).data()))
}

/// Applies residuals to an anchor.
pub fn decode_box(anchor: &Box3D, residuals: &[f64; 8], velocity: [f64; 2]) -> Result<Box3D> {
    if residuals.iter().chain(&velocity).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite box residuals".into()));
    }
    let center = [
        anchor.center[0] + residuals[0],
        anchor.center[1] + residuals[1],
        anchor.center[2] + residuals[2],
    ];
    let size = [
        anchor.size[0] * residuals[3].exp(),
        anchor.size[1] * residuals[4].exp(),
        anchor.size[2] * residuals[5].exp(),
    ];
    let b = Box3D::new(
        center,
        size,
        wrap_angle(anchor.yaw + residuals[6].atan2(residuals[7])),
        velocity,
    );
    if !b.is_valid() {
        return Err(Error::Domain(format!("decoded box is degenerate: {b:?}")));
    }
    Ok(b)
}
