#![allow(dead_code)]

pub mod oracles;

use peftdml_core::encoders::init_backbones;
use peftdml_core::model::{Batch, Model, ModelConfig};
use peftdml_core::world::{
    build_dataset, AvailabilityMask, Dataset, DatasetConfig, DatasetManifest, Modality, BACKGROUND,
    NUM_MODALITIES,
};
use peftdml_core::ParameterSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        train_scenes: 40,
        val_scenes: 10,
        test_scenes: 20,
        ..DatasetConfig::default()
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    build_dataset(&small_config(seed)).unwrap()
}

/// Random frozen backbones with PEFT components on top.
pub fn model_with_rank(seed: u64, rank: usize) -> (ParameterSet, Model) {
    let mut params = ParameterSet::new();
    let config = ModelConfig::default();
    init_backbones(&mut params, config.encoder.hidden, seed);
    params.freeze_prefix("encoder.");
    let mut config = config;
    config.encoder.rank = rank;
    let model = Model::build(&mut params, &config, seed).unwrap();
    (params, model)
}

pub fn model(seed: u64) -> (ParameterSet, Model) {
    model_with_rank(seed, 8)
}

/// Adds uniform noise of half-width `scale` to every trainable parameter so
/// zero-initialized paths carry signal.
pub fn perturb_trainable(params: &mut ParameterSet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths: Vec<String> = params.trainable_paths().map(str::to_string).collect();
    for p in paths {
        for v in params.get_mut(&p).unwrap().data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Both frames of the first `scenes` records under the full mask.
pub fn full_batch(manifest: &DatasetManifest, scenes: usize) -> Batch {
    let mut frames = Vec::new();
    for rec in manifest.records.iter().take(scenes) {
        for f in &rec.frames {
            frames.push((&rec.scene, f));
        }
    }
    let masks = vec![AvailabilityMask::ALL; frames.len()];
    Batch::from_frames(&frames, &masks).unwrap()
}

/// Two instances seen in both frames, with different classes, observed by
/// at least two object-level modalities.
pub fn four_row_batch(seed: u64) -> Option<Batch> {
    let ds = small_dataset(seed);
    for rec in &ds.train.records {
        let frames: Vec<_> = rec.frames.iter().map(|f| (&rec.scene, f)).collect();
        let b = Batch::from_frames(&frames, &[AvailabilityMask::ALL; 2]).ok()?;
        let rich = |r: usize| {
            b.labels[r] != BACKGROUND
                && Modality::OBJECT_LEVEL
                    .iter()
                    .filter(|m| b.mask[r * NUM_MODALITIES + m.index()])
                    .count()
                    >= 2
        };
        let mut pairs = Vec::new();
        for r0 in (0..b.len()).filter(|&r| b.frame_of[r] == 0 && rich(r)) {
            if let Some(r1) = (0..b.len())
                .find(|&r| b.frame_of[r] == 1 && rich(r) && b.instances[r] == b.instances[r0])
            {
                pairs.push((r0, r1));
            }
        }
        for (i, a) in pairs.iter().enumerate() {
            if let Some(c) = pairs[i + 1..]
                .iter()
                .find(|c| b.labels[c.0] != b.labels[a.0])
            {
                return b.select(&[a.0, c.0, a.1, c.1]).ok();
            }
        }
    }
    None
}
