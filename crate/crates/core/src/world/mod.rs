//! Deterministic synthetic driving world: scenes, candidates, sensor
//! rendering, dropout and dataset manifests.

pub mod candidates;
pub mod dataset;
pub mod dropout;
pub mod geometry;
pub mod render;
pub mod scene;

pub use candidates::{make_candidates, CandidateAnchor, CandidateConfig};
pub use dataset::{
    build_dataset, build_split, config_hash, load_dataset, read_manifest, write_dataset,
    write_manifest, Dataset, DatasetConfig, DatasetManifest, FrameRecord, Holdout, ManifestHeader,
    SceneRecord, Split,
};
pub use dropout::{sample_dropout_mask, AvailabilityMask};
pub use geometry::{wrap_angle, Box3D};
pub use render::{
    class_name, lidar_point_count, render_modality, FrameView, Modality, ModalityFeatures,
    RenderConfig, WeatherTable, NUM_MODALITIES,
};
pub use scene::{
    generate_scene, stable_seed, EgoState, FrameTag, ObjectInstance, ScenePair, Weather,
    WorldConfig, BACKGROUND, CLASSES, NUM_CLASSES,
};
