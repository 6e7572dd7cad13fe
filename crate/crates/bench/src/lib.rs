//! Fixtures shared by the benchmarks.

use peftdml_core::encoders::init_backbones;
use peftdml_core::eval::{Detection, FrameEval, GroundTruth};
use peftdml_core::model::{Batch, Model, ModelConfig};
use peftdml_core::world::{build_dataset, AvailabilityMask, Box3D, Dataset, DatasetConfig};
use peftdml_core::{ParameterSet, Tensor};

pub fn dataset(scenes: usize) -> Dataset {
    build_dataset(&DatasetConfig {
        train_scenes: scenes,
        val_scenes: 2,
        test_scenes: 2,
        ..DatasetConfig::default()
    })
    .expect("default world builds")
}

/// Random frozen backbones and a freshly attached model.
pub fn model(rank: usize) -> (ParameterSet, Model) {
    let mut params = ParameterSet::new();
    let mut config = ModelConfig::default();
    config.encoder.rank = rank;
    init_backbones(&mut params, config.encoder.hidden, 0);
    params.freeze_prefix("encoder.");
    let model = Model::build(&mut params, &config, 0).expect("valid default config");
    (params, model)
}

/// Both frames of the first `scenes` training scenes.
pub fn batch(ds: &Dataset, scenes: usize) -> Batch {
    let frames: Vec<_> = ds.train.records[..scenes]
        .iter()
        .flat_map(|r| r.frames.iter().map(move |f| (&r.scene, f)))
        .collect();
    Batch::from_frames(&frames, &vec![AvailabilityMask::ALL; frames.len()]).expect("full masks")
}

/// Deterministic pseudo-random square matrix.
pub fn matrix(n: usize, salt: u64) -> Tensor {
    let data = (0..n * n)
        .map(|i| (((i as u64 + 1) * (salt * 2 + 7919)) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    Tensor::new(&[n, n], data).expect("square shape")
}

/// Frames with a jittered prediction per ground-truth box plus clutter.
pub fn eval_frames(frames: usize, objects: usize) -> Vec<FrameEval> {
    (0..frames)
        .map(|f| {
            let gts: Vec<GroundTruth> = (0..objects)
                .map(|i| GroundTruth {
                    class_id: i % 6,
                    bbox: Box3D::new(
                        [i as f64 * 4.0, f as f64, 0.8],
                        [1.8, 4.5, 1.6],
                        0.0,
                        [0.0, 0.0],
                    ),
                    attribute: false,
                })
                .collect();
            let preds: Vec<Detection> = gts
                .iter()
                .enumerate()
                .flat_map(|(i, g)| {
                    let jitter = ((i * 31 + f * 17) % 13) as f64 / 10.0;
                    let mut b = g.bbox;
                    b.center[0] += jitter;
                    [
                        Detection {
                            class_id: g.class_id,
                            confidence: 0.5 + jitter / 3.0,
                            bbox: b,
                            attribute: false,
                        },
                        Detection {
                            class_id: (g.class_id + 1) % 6,
                            confidence: 0.3,
                            bbox: Box3D::new(
                                [b.center[0], 40.0, 0.8],
                                [1.0, 1.0, 1.0],
                                0.0,
                                [0.0, 0.0],
                            ),
                            attribute: false,
                        },
                    ]
                })
                .collect();
            FrameEval::new(preds, gts)
        })
        .collect()
}
