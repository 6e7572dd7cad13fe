//! Run configuration, report emission and artifact verification.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::PretrainConfig;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, SweepRow, WeatherRow};
use crate::train::{CurvePoint, TrainConfig};
use crate::world::{config_hash, DatasetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ranks trained by the sweep command when none are given.
    pub sweep_ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sweep_ranks: vec![4, 8, 16],
        }
    }
}

/// Everything that determines a run. The global seed overrides the seeds of
/// the nested sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let seed = c.seed;
        Ok(c.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.pretrain.epochs == 0 || self.pretrain.batch_rows == 0 {
            return Err(Error::Config(
                "pretraining epochs and batch size must be positive".into(),
            ));
        }
        if self.train.model.encoder.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        config_hash(&c)
    }
}

/// First line of every CSV artifact.
pub fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}")
}

fn parse_provenance(line: &str) -> Option<(String, u64)> {
    let rest = line.strip_prefix("# config_hash=")?;
    let (hash, seed) = rest.split_once(" seed=")?;
    Some((hash.to_string(), seed.trim().parse().ok()?))
}

pub fn curves_csv(hash: &str, seed: u64, curve: &[CurvePoint]) -> String {
    let mut s = provenance_line(hash, seed);
    s.push_str("\nstep,det_cls,det_iou,det_orient,metric,consistency,total\n");
    for c in curve {
        let l = &c.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.step, l.det_cls, l.det_iou, l.det_orient, l.metric, l.consistency, l.total
        );
    }
    s
}

pub fn weather_csv(hash: &str, seed: u64, rows: &[WeatherRow]) -> String {
    let mut s = provenance_line(hash, seed);
    s.push_str("\ncondition,ap\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.condition, r.ap);
    }
    s
}

pub fn sweep_csv(hash: &str, seed: u64, rows: &[SweepRow]) -> String {
    let mut s = provenance_line(hash, seed);
    s.push_str("\nrank,trainable_fraction,composite\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.rank, r.trainable_fraction, r.composite);
    }
    s
}

/// Plain-text table with one row per protocol report.
pub fn summary_table(hash: &str, seed: u64, reports: &[MetricsReport]) -> String {
    let mut s = format!("config_hash={hash} seed={seed}\n");
    let _ = writeln!(
        s,
        "{:<10} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
        "protocol", "mAP", "composite", "mATE", "mASE", "mAOE", "mAVE", "mAAE", "zero_shot"
    );
    for r in reports {
        let zs = r
            .zero_shot_acc
            .map_or_else(|| "-".to_string(), |z| format!("{z:.4}"));
        let _ = writeln!(
            s,
            "{:<10} {:>7.4} {:>9.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9}",
            r.protocol.name(),
            r.map,
            r.composite,
            r.mate,
            r.mase,
            r.maoe,
            r.mave,
            r.maae,
            zs
        );
    }
    s
}

/// Outputs of a run to be written as a report bundle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutputs {
    pub reports: Vec<MetricsReport>,
    pub curve: Vec<CurvePoint>,
    pub weather: Vec<WeatherRow>,
    pub sweep: Vec<SweepRow>,
}

pub const SUMMARY_FILE: &str = "summary.txt";
pub const CURVES_FILE: &str = "curves.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn metrics_file(protocol: &str) -> String {
    format!("metrics_{protocol}.json")
}

/// Stamps the run hash and seed into a report.
pub fn stamp(report: &mut MetricsReport, config: &RunConfig) {
    report.config_hash = config.hash();
    report.seed = config.seed;
}

pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Writes metrics JSON per report, the three CSVs and the summary table.
/// Returns the written paths in a fixed order.
pub fn emit_report(dir: &Path, config: &RunConfig, outputs: &RunOutputs) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let hash = config.hash();
    let seed = config.seed;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for r in &outputs.reports {
        let mut r = r.clone();
        stamp(&mut r, config);
        put(metrics_file(r.protocol.name()), metrics_json(&r)?)?;
    }
    put(CURVES_FILE.into(), curves_csv(&hash, seed, &outputs.curve))?;
    put(
        WEATHER_FILE.into(),
        weather_csv(&hash, seed, &outputs.weather),
    )?;
    put(SWEEP_FILE.into(), sweep_csv(&hash, seed, &outputs.sweep))?;
    let mut stamped = outputs.reports.clone();
    stamped.iter_mut().for_each(|r| stamp(r, config));
    put(SUMMARY_FILE.into(), summary_table(&hash, seed, &stamped))?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedFile {
    pub path: PathBuf,
    pub ok: bool,
    pub detail: String,
}

/// Recomputes the run hash and checks every artifact in `dir` embeds it and
/// the seed.
pub fn verify_artifacts(dir: &Path, config: &RunConfig) -> Result<Vec<VerifiedFile>> {
    let hash = config.hash();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let found = if name.starts_with("metrics_") && name.ends_with(".json") {
            let r: MetricsReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
            Some((r.config_hash, r.seed))
        } else if name.ends_with(".csv") {
            fs::read_to_string(&path)?
                .lines()
                .next()
                .and_then(parse_provenance)
        } else if name == SUMMARY_FILE {
            let text = fs::read_to_string(&path)?;
            text.lines()
                .next()
                .and_then(|l| parse_provenance(&format!("# {l}")))
        } else {
            continue;
        };
        let (ok, detail) = match found {
            None => (false, "no provenance line".to_string()),
            Some((h, s)) if h == hash && s == config.seed => (true, "ok".to_string()),
            Some((h, s)) => (false, format!("found hash {h} seed {s}")),
        };
        out.push(VerifiedFile { path, ok, detail });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.train.loss.lambda_met = 0.25;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
        let e = RunConfig::from_json(r#"{"seed": 1, "lamda_met": 0.5}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e =
            RunConfig::from_json(r#"{"seed": 1, "train": {"epochs": 1, "lr": 3}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        assert_eq!((c.dataset.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn provenance_round_trip() {
        assert_eq!(
            parse_provenance(&provenance_line("ab12", 7)),
            Some(("ab12".into(), 7))
        );
        assert_eq!(parse_provenance("step,total"), None);
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let s = sweep_csv("h", 1, &[]);
        assert_eq!(s.lines().count(), 2);
        assert_eq!(s.lines().nth(1), Some("rank,trainable_fraction,composite"));
    }
}
