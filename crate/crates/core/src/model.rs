//! The full network: PEFT encoders, projections, fusion and detection head,
//! plus batch assembly from dataset frames.

use serde::{Deserialize, Serialize};

use crate::encoders::{attach_peft, EncoderConfig, ModalityEncoder, ProjectionHead};
use crate::error::{Error, Result};
use crate::fusion::{fuse_batch, DetectionHead, DetectionOutput, FusionModule};
use crate::tensor::{Graph, ParameterSet, Tensor, Var};
use crate::world::{
    AvailabilityMask, Box3D, FrameRecord, FrameTag, Modality, ScenePair, NUM_MODALITIES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub detect_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            detect_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Vec<ModalityEncoder>,
    pub projections: Vec<ProjectionHead>,
    pub fusion: FusionModule,
    pub head: DetectionHead,
}

impl Model {
    /// Adds every trainable component on top of pretrained, frozen
    /// backbones already present in `params`.
    pub fn build(params: &mut ParameterSet, config: &ModelConfig, seed: u64) -> Result<Model> {
        if config.detect_hidden == 0 {
            return Err(Error::Config("detect_hidden must be positive".into()));
        }
        let (encoders, projections) = attach_peft(params, &config.encoder, seed)?;
        let fusion = FusionModule::init(params, config.encoder.embed_dim, seed);
        let head =
            DetectionHead::init(params, config.encoder.embed_dim, config.detect_hidden, seed);
        Ok(Model {
            config: config.clone(),
            encoders,
            projections,
            fusion,
            head,
        })
    }

    /// Same model reading the same parameters but with LoRA and adapters
    /// bypassed, i.e. the frozen backbones alone.
    pub fn backbone_only(&self) -> Model {
        Model {
            encoders: self
                .encoders
                .iter()
                .map(ModalityEncoder::without_peft)
                .collect(),
            ..self.clone()
        }
    }

    /// Unit-norm embeddings for `x: n × dim` rows of modality `m`.
    pub fn embed(&self, g: &mut Graph, params: &ParameterSet, m: Modality, x: Var) -> Result<Var> {
        let h = self.encoders[m.index()].forward(g, params, x)?;
        self.projections[m.index()].forward(g, params, h)
    }

    /// Forward pass over a batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        batch: &Batch,
    ) -> Result<ForwardOutput> {
        let n = batch.len();
        let mut full: [Option<Var>; NUM_MODALITIES] = [None; NUM_MODALITIES];
        let mut per_modality: [Option<(Var, Vec<usize>)>; NUM_MODALITIES] = Default::default();
        for m in Modality::ALL {
            let rows = batch.rows_with(m);
            if rows.is_empty() {
                continue;
            }
            let dim = m.dim();
            let mut x = Vec::with_capacity(rows.len() * dim);
            for &r in &rows {
                x.extend_from_slice(&batch.features[m.index()][r * dim..(r + 1) * dim]);
            }
            let xv = g.constant(Tensor::new(&[rows.len(), dim], x)?);
            let z = self.embed(g, params, m, xv)?;
            full[m.index()] = Some(if rows.len() == n {
                z
            } else {
                g.scatter_rows(z, &rows, n)?
            });
            per_modality[m.index()] = Some((z, rows));
        }
        let fused = fuse_batch(g, params, &self.fusion, &full, &batch.mask)?;
        let head = self.head.forward(g, params, fused, &batch.anchors)?;
        Ok(ForwardOutput {
            per_modality,
            fused,
            head,
        })
    }

    /// Head outputs per candidate without recording gradients.
    pub fn predict(
        &self,
        params: &ParameterSet,
        batch: &Batch,
    ) -> Result<(Vec<DetectionOutput>, Tensor)> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, params, batch)?;
        let t = g.value(out.head);
        let outputs = (0..batch.len())
            .map(|i| DetectionOutput::from_row(t.row(i)))
            .collect();
        Ok((outputs, g.value(out.fused).clone()))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per modality: embeddings of the observing rows and those row indices.
    pub per_modality: [Option<(Var, Vec<usize>)>; NUM_MODALITIES],
    pub fused: Var,
    /// `n × HEAD_OUT` raw head outputs.
    pub head: Var,
}

/// Candidates of one or more frames, flattened row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major features per modality, `n × dim` (zeros where unobserved).
    pub features: [Vec<f64>; NUM_MODALITIES],
    /// Row-major `n × 5` effective availability.
    pub mask: Vec<bool>,
    pub anchors: Vec<Box3D>,
    pub labels: Vec<usize>,
    pub instances: Vec<Option<u64>>,
    /// Ground-truth box of the assigned instance, if any.
    pub targets: Vec<Option<Box3D>>,
    /// Index of the source frame within the batch for each row.
    pub frame_of: Vec<usize>,
    pub tags: Vec<FrameTag>,
    /// Scene identifier of each row's frame.
    pub scene_of: Vec<u64>,
    /// Candidate index within its frame.
    pub source_row: Vec<usize>,
}

impl Batch {
    /// Builds a batch; a row's availability is its frame's mask combined
    /// with per-candidate withholding. Every row must keep a modality.
    pub fn from_frames(
        frames: &[(&ScenePair, &FrameRecord)],
        masks: &[AvailabilityMask],
    ) -> Result<Batch> {
        Self::assemble(frames, masks, false)
    }

    /// Like [`Batch::from_frames`] but silently drops candidates left with
    /// no modality.
    pub fn from_frames_observable(
        frames: &[(&ScenePair, &FrameRecord)],
        masks: &[AvailabilityMask],
    ) -> Result<Batch> {
        Self::assemble(frames, masks, true)
    }

    fn assemble(
        frames: &[(&ScenePair, &FrameRecord)],
        masks: &[AvailabilityMask],
        skip_empty: bool,
    ) -> Result<Batch> {
        if frames.len() != masks.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} masks",
                frames.len(),
                masks.len()
            )));
        }
        let mut b = Batch {
            features: Default::default(),
            mask: Vec::new(),
            anchors: Vec::new(),
            labels: Vec::new(),
            instances: Vec::new(),
            targets: Vec::new(),
            frame_of: Vec::new(),
            tags: Vec::new(),
            scene_of: Vec::new(),
            source_row: Vec::new(),
        };
        for (fi, ((scene, f), mask)) in frames.iter().zip(masks).enumerate() {
            for i in 0..f.len() {
                let row = Self::row_mask(f, mask, i);
                if !row.any() {
                    if skip_empty {
                        continue;
                    }
                    return Err(Error::EmptyAvailability);
                }
                b.mask.extend_from_slice(&row.0);
                for m in Modality::ALL {
                    let feats = f.modality(m);
                    if row.get(m) {
                        b.features[m.index()].extend_from_slice(feats.row(i));
                    } else {
                        b.features[m.index()].extend(std::iter::repeat_n(0.0, m.dim()));
                    }
                }
                b.anchors.push(f.candidates[i].anchor);
                b.labels.push(f.labels[i]);
                let inst = f.candidates[i].instance;
                b.instances.push(inst);
                b.targets.push(inst.and_then(|id| {
                    scene
                        .frame(f.tag)
                        .iter()
                        .find(|o| o.instance_id == id)
                        .map(|o| o.bbox)
                }));
                b.frame_of.push(fi);
                b.tags.push(f.tag);
                b.scene_of.push(scene.scene_id);
                b.source_row.push(i);
            }
        }
        Ok(b)
    }

    /// Effective availability of candidate `i` under a frame mask.
    pub fn row_mask(f: &FrameRecord, mask: &AvailabilityMask, i: usize) -> AvailabilityMask {
        AvailabilityMask(std::array::from_fn(|k| {
            mask.0[k] && f.features[k].observed(i)
        }))
    }

    /// A batch holding only `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Shape(format!(
                "row {r} outside a batch of {}",
                self.len()
            )));
        }
        let pick = |k: usize| -> Vec<f64> {
            let dim = Modality::ALL[k].dim();
            rows.iter()
                .flat_map(|&r| self.features[k][r * dim..(r + 1) * dim].iter().copied())
                .collect()
        };
        Ok(Batch {
            features: std::array::from_fn(pick),
            mask: rows
                .iter()
                .flat_map(|&r| {
                    self.mask[r * NUM_MODALITIES..(r + 1) * NUM_MODALITIES]
                        .iter()
                        .copied()
                })
                .collect(),
            anchors: rows.iter().map(|&r| self.anchors[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            instances: rows.iter().map(|&r| self.instances[r]).collect(),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            frame_of: rows.iter().map(|&r| self.frame_of[r]).collect(),
            tags: rows.iter().map(|&r| self.tags[r]).collect(),
            scene_of: rows.iter().map(|&r| self.scene_of[r]).collect(),
            source_row: rows.iter().map(|&r| self.source_row[r]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows_with(&self, m: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.mask[i * NUM_MODALITIES + m.index()])
            .collect()
    }

    pub fn row_availability(&self, i: usize) -> AvailabilityMask {
        let mut a = [false; NUM_MODALITIES];
        a.copy_from_slice(&self.mask[i * NUM_MODALITIES..(i + 1) * NUM_MODALITIES]);
        AvailabilityMask(a)
    }
}
