//! Split generation and JSON-lines manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::candidates::{make_candidates, CandidateAnchor, CandidateConfig};
use super::render::{render_modality, FrameView, Modality, ModalityFeatures, RenderConfig};
use super::scene::{
    generate_scene, stable_seed, FrameTag, ScenePair, WorldConfig, BACKGROUND, NUM_CLASSES,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A modality–class combination withheld from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Holdout {
    pub modality: Modality,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub world: WorldConfig,
    pub candidates: CandidateConfig,
    pub render: RenderConfig,
    pub holdout: Vec<Holdout>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 500,
            val_scenes: 100,
            test_scenes: 100,
            world: WorldConfig::default(),
            candidates: CandidateConfig::default(),
            render: RenderConfig::default(),
            holdout: vec![Holdout {
                modality: Modality::Camera,
                class_id: 5,
            }],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.holdout.iter().any(|h| h.class_id >= NUM_CLASSES) {
            return Err(Error::Config("holdout class out of range".into()));
        }
        if self.candidates.per_frame < self.world.max_objects {
            return Err(Error::Config(
                "fewer candidates per frame than objects".into(),
            ));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    fn range(&self, split: Split) -> std::ops::Range<u64> {
        let (a, b, c) = (
            self.train_scenes as u64,
            self.val_scenes as u64,
            self.test_scenes as u64,
        );
        match split {
            Split::Train => 0..a,
            Split::Val => a..a + b,
            Split::Test => a + b..a + b + c,
        }
    }
}

/// Hex sha256 of a value's JSON serialization. Struct fields serialize in
/// declaration order, so the encoding is canonical for a given type.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// One frame's candidates, labels and rendered features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub tag: FrameTag,
    pub candidates: Vec<CandidateAnchor>,
    /// Class id per candidate; `BACKGROUND` when unassigned.
    pub labels: Vec<usize>,
    /// One entry per modality in canonical order.
    pub features: Vec<ModalityFeatures>,
}

impl FrameRecord {
    pub fn modality(&self, m: Modality) -> &ModalityFeatures {
        &self.features[m.index()]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: ScenePair,
    pub frames: [FrameRecord; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub holdout: Vec<Holdout>,
    pub split: Split,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn frames(&self) -> impl Iterator<Item = (&SceneRecord, &FrameRecord)> {
        self.records
            .iter()
            .flat_map(|r| r.frames.iter().map(move |f| (r, f)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &DatasetManifest {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn label_of(scene: &ScenePair, tag: FrameTag, c: &CandidateAnchor) -> usize {
    match c.instance {
        Some(id) => scene
            .frame(tag)
            .iter()
            .find(|o| o.instance_id == id)
            .map(|o| o.class_id)
            .unwrap_or(BACKGROUND),
        None => BACKGROUND,
    }
}

/// Generates and renders one scene; a pure function of the config and index.
pub fn build_record(
    config: &DatasetConfig,
    scene_index: u64,
    holdout: &[Holdout],
) -> Result<SceneRecord> {
    let scene = generate_scene(config.seed, scene_index, &config.world)?;
    let scene_seed = stable_seed(config.seed, scene_index);
    let frame = |tag: FrameTag| {
        let objects = scene.frame(tag);
        let tag_seed = stable_seed(scene_seed, tag as u64 + 1);
        let candidates = make_candidates(objects, tag, tag_seed, &config.candidates);
        let labels: Vec<usize> = candidates
            .iter()
            .map(|c| label_of(&scene, tag, c))
            .collect();
        let view = FrameView {
            objects,
            ego: scene.ego.at(tag),
            weather: scene.weather,
        };
        let mut features: Vec<ModalityFeatures> = Modality::ALL
            .iter()
            .map(|&m| {
                render_modality(
                    &view,
                    &candidates,
                    m,
                    stable_seed(tag_seed, m.index() as u64),
                    &config.render,
                )
            })
            .collect();
        for h in holdout {
            for (i, &l) in labels.iter().enumerate() {
                if l == h.class_id {
                    features[h.modality.index()].mask_row(i);
                }
            }
        }
        FrameRecord {
            tag,
            candidates,
            labels,
            features,
        }
    };
    let frames = [frame(FrameTag::T), frame(FrameTag::T1)];
    Ok(SceneRecord { scene, frames })
}

pub fn build_split(config: &DatasetConfig, split: Split) -> Result<DatasetManifest> {
    config.validate()?;
    let holdout: &[Holdout] = if split == Split::Train {
        &config.holdout
    } else {
        &[]
    };
    let records = config
        .range(split)
        .map(|i| build_record(config, i, holdout))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            holdout: config.holdout.clone(),
            split,
            scenes: records.len(),
        },
        records,
    })
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    Ok(Dataset {
        config: config.clone(),
        train: build_split(config, Split::Train)?,
        val: build_split(config, Split::Val)?,
        test: build_split(config, Split::Test)?,
    })
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest.header)?;
    w.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest; when `expected_hash` is given the header must match it.
pub fn read_manifest(path: &Path, expected_hash: Option<&str>) -> Result<DatasetManifest> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", path.display())))??;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            header.version
        )));
    }
    if let Some(h) = expected_hash {
        if h != header.config_hash {
            return Err(Error::HashMismatch {
                expected: h.to_string(),
                found: header.config_hash,
            });
        }
    }
    let mut records = Vec::with_capacity(header.scenes);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    if records.len() != header.scenes {
        return Err(Error::Format(format!(
            "header declares {} scenes, found {}",
            header.scenes,
            records.len()
        )));
    }
    Ok(DatasetManifest { header, records })
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("dataset_config.json"),
        serde_json::to_vec_pretty(&dataset.config)?,
    )?;
    for s in Split::ALL {
        write_manifest(&manifest_path(dir, s), dataset.split(s))?;
    }
    Ok(())
}

/// Loads a dataset written by [`write_dataset`]. With `expected` the stored
/// config must hash identically, otherwise the stored config is trusted.
pub fn load_dataset(dir: &Path, expected: Option<&DatasetConfig>) -> Result<Dataset> {
    let stored: DatasetConfig =
        serde_json::from_slice(&std::fs::read(dir.join("dataset_config.json"))?)?;
    let hash = stored.hash();
    if let Some(e) = expected {
        if e.hash() != hash {
            return Err(Error::HashMismatch {
                expected: e.hash(),
                found: hash,
            });
        }
    }
    Ok(Dataset {
        train: read_manifest(&manifest_path(dir, Split::Train), Some(&hash))?,
        val: read_manifest(&manifest_path(dir, Split::Val), Some(&hash))?,
        test: read_manifest(&manifest_path(dir, Split::Test), Some(&hash))?,
        config: stored,
    })
}
