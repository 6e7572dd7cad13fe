//! Joint fine-tuning of the PEFT components on top of frozen backbones.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ModalityEncoder;
use crate::error::{Error, Result};
use crate::losses::{joint_loss, LossBreakdown, LossConfig};
use crate::model::{Batch, Model, ModelConfig};
use crate::tensor::{AdamConfig, Graph, OptimizerState, ParamCheckpoint, ParameterSet};
use crate::world::dropout::{draw_until_nonempty, validate_probs};
use crate::world::{
    stable_seed, AvailabilityMask, DatasetManifest, FrameRecord, Modality, ScenePair, WeatherTable,
    NUM_MODALITIES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per step; both frames of each sampled scene are included.
    pub batch_frames: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Per-modality drop probability before weather addends.
    pub dropout: [f64; NUM_MODALITIES],
    /// Adds the weather table's dropout addends for each frame's condition.
    pub weather_dropout: bool,
    /// Stops early after this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_frames: 8,
            adam: AdamConfig::default(),
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            dropout: [0.2; NUM_MODALITIES],
            weather_dropout: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_frames < 2 || !self.batch_frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_frames must be a positive even number, got {}",
                self.batch_frames
            )));
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if self.model.detect_hidden == 0 {
            return Err(Error::Config("detect_hidden must be positive".into()));
        }
        self.model.encoder.validate()?;
        self.loss.validate()?;
        validate_probs(&self.dropout)
    }

    pub fn rank(&self) -> usize {
        self.model.encoder.rank
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.model.encoder.rank = rank;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Trained model, its parameters, provenance and training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub model: Model,
    pub params: ParameterSet,
    pub curve: Vec<CurvePoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    config: TrainConfig,
    dataset_hash: String,
    model: Model,
    params: ParamCheckpoint,
    curve: Vec<CurvePoint>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            dataset_hash: self.dataset_hash.clone(),
            model: self.model.clone(),
            params: self.params.to_checkpoint(),
            curve: self.curve.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s)?;
        if f.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                f.version
            )));
        }
        Ok(Checkpoint {
            config: f.config,
            dataset_hash: f.dataset_hash,
            model: f.model,
            params: ParameterSet::from_checkpoint(&f.params)?,
            curve: f.curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails unless the checkpoint was trained on data with `hash`.
    pub fn check_dataset(&self, hash: &str) -> Result<()> {
        if self.dataset_hash != hash {
            return Err(Error::HashMismatch {
                expected: self.dataset_hash.clone(),
                found: hash.to_string(),
            });
        }
        Ok(())
    }
}

/// Checks that every backbone path exists and is frozen.
fn check_pretrained(params: &ParameterSet, hidden: usize) -> Result<()> {
    for m in Modality::ALL {
        for l in &ModalityEncoder::backbone(m, hidden).layers {
            for path in [l.weight_path(), l.bias_path()] {
                match params.get(&path) {
                    None => {
                        return Err(Error::Contract(format!(
                            "missing pretrained backbone parameter {path}"
                        )))
                    }
                    Some(_) if !params.is_frozen(&path) => {
                        return Err(Error::Contract(format!(
                            "backbone parameter {path} is not frozen"
                        )))
                    }
                    Some(t) if t.shape() != [l.out_dim, l.in_dim] && t.shape() != [l.out_dim] => {
                        return Err(Error::Shape(format!(
                            "backbone parameter {path} has shape {:?}",
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

/// Frame-level drop probabilities for a scene.
pub fn frame_dropout(
    config: &TrainConfig,
    weather: &WeatherTable,
    scene: &ScenePair,
) -> [f64; NUM_MODALITIES] {
    std::array::from_fn(|k| {
        let extra = if config.weather_dropout {
            weather.dropout(scene.weather, Modality::ALL[k])
        } else {
            0.0
        };
        (config.dropout[k] + extra).min(1.0)
    })
}

const MASK_ATTEMPTS: usize = 64;

/// Draws frame masks until every candidate keeps a modality, falling back
/// to the full mask.
fn sample_frame_mask(
    rng: &mut ChaCha8Rng,
    probs: &[f64; NUM_MODALITIES],
    frame: &FrameRecord,
) -> AvailabilityMask {
    for _ in 0..MASK_ATTEMPTS {
        let m = draw_until_nonempty(rng, probs);
        if (0..frame.len()).all(|i| Batch::row_mask(frame, &m, i).any()) {
            return m;
        }
    }
    AvailabilityMask::ALL
}

/// The model as built before any update, with an empty curve.
pub fn initial_checkpoint(
    config: &TrainConfig,
    pretrained: &ParameterSet,
    dataset_hash: &str,
) -> Result<Checkpoint> {
    config.validate()?;
    check_pretrained(pretrained, config.model.encoder.hidden)?;
    let mut params = pretrained.subset("encoder.");
    let model = Model::build(&mut params, &config.model, stable_seed(config.seed, 0x11))?;
    Ok(Checkpoint {
        config: config.clone(),
        dataset_hash: dataset_hash.to_string(),
        model,
        params,
        curve: Vec::new(),
    })
}

/// Fine-tunes LoRA, adapters, projections, fusion and the detection head.
/// `pretrained` must hold frozen backbones; they are left untouched.
pub fn train(
    config: &TrainConfig,
    pretrained: &ParameterSet,
    manifest: &DatasetManifest,
    weather: &WeatherTable,
) -> Result<Checkpoint> {
    if manifest.records.is_empty() {
        return Err(Error::Contract(
            "training needs a non-empty manifest".into(),
        ));
    }
    let Checkpoint {
        model, mut params, ..
    } = initial_checkpoint(config, pretrained, &manifest.header.config_hash)?;
    let mut opt = OptimizerState::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(config.seed, 0x7A1));
    let scenes_per_step = config.batch_frames / 2;
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(scenes_per_step) {
            let mut frames: Vec<(&ScenePair, &FrameRecord)> =
                Vec::with_capacity(config.batch_frames);
            let mut masks = Vec::with_capacity(config.batch_frames);
            for &s in chunk {
                let rec = &manifest.records[s];
                let probs = frame_dropout(config, weather, &rec.scene);
                for f in &rec.frames {
                    masks.push(sample_frame_mask(&mut rng, &probs, f));
                    frames.push((&rec.scene, f));
                }
            }
            let batch = Batch::from_frames(&frames, &masks)?;
            let loss = train_step(&model, &mut params, &mut opt, &batch, &config.loss)
                .map_err(|e| diverged(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite loss {loss:?}"),
                });
            }
            curve.push(CurvePoint { step, epoch, loss });
            step += 1;
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
    }
    Ok(Checkpoint {
        config: config.clone(),
        dataset_hash: manifest.header.config_hash.clone(),
        model,
        params,
        curve,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Domain(d) => Error::Diverged { step, detail: d },
        Error::Construction(d) if d.contains("non-finite") => Error::Diverged { step, detail: d },
        other => other,
    }
}

/// One forward, backward and Adam update. Returns the loss before the update.
pub fn train_step(
    model: &Model,
    params: &mut ParameterSet,
    opt: &mut OptimizerState,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, params, batch)?;
    let vars = joint_loss(&mut g, &out, batch, loss)?;
    let breakdown = vars.breakdown(&g);
    if !breakdown.is_finite() {
        return Ok(breakdown);
    }
    let grads = g.backward(vars.total)?;
    let grads = grads.for_params(params);
    if let Some((path, _)) = grads
        .iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Domain(format!("non-finite gradient for {path}")));
    }
    opt.step(params, &grads)?;
    Ok(breakdown)
}

/// Mean total loss over a window of the curve.
pub fn mean_total(curve: &[CurvePoint]) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    curve.iter().map(|c| c.loss.total).sum::<f64>() / curve.len() as f64
}
