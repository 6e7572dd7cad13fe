use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use peftdml_core::encoders::pretrain_backbones;
use peftdml_core::eval::{eval_weather, run_protocol, sweep_ranks, Protocol, SweepRow, WeatherRow};
use peftdml_core::report::{
    curves_csv, emit_report, metrics_file, metrics_json, stamp, sweep_csv, verify_artifacts,
    weather_csv, RunConfig, RunOutputs, CURVES_FILE, SWEEP_FILE, WEATHER_FILE,
};
use peftdml_core::tensor::ParamCheckpoint;
use peftdml_core::train::{train, Checkpoint};
use peftdml_core::world::{build_dataset, load_dataset, write_dataset, Dataset, Modality};
use peftdml_core::{eval::MetricsReport, ParameterSet};

const OUT_ENV: &str = "PEFTDML_OUT";
const DEFAULT_OUT: &str = "peftdml-out";

#[derive(Parser, Debug)]
#[command(
    name = "peftdml",
    version,
    about = "Parameter-efficient multi-modal detection on a synthetic driving world"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to $PEFTDML_OUT, then the config, then ./peftdml-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and write the train/val/test manifests.
    GenData(Common),
    /// Pretrain and freeze the per-modality backbones.
    Pretrain(Common),
    /// Fine-tune the PEFT components and write a checkpoint.
    Train(Common),
    /// Evaluate the checkpoint under one protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
    },
    /// Train and evaluate one model per LoRA rank.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ranks, e.g. 4,8,16.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Re-emit the summary from existing artifacts and verify their hashes.
    Report(Common),
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse::<Protocol>().map_err(|e| e.to_string())
}

struct Run {
    config: RunConfig,
    out: PathBuf,
}

impl Run {
    fn resolve(c: &Common) -> anyhow::Result<Run> {
        let mut config = match &c.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            config = config.with_seed(s);
        }
        config.validate()?;
        let out = c
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        load_dataset(&self.data_dir(), Some(&self.config.dataset)).with_context(|| {
            format!(
                "loading dataset from {} (run gen-data first?)",
                self.data_dir().display()
            )
        })
    }

    fn pretrained(&self) -> anyhow::Result<ParameterSet> {
        let p = self.path(PRETRAINED_FILE);
        let text = std::fs::read_to_string(&p)
            .with_context(|| format!("reading {} (run pretrain first?)", p.display()))?;
        let a: PretrainArtifact = serde_json::from_str(&text)?;
        self.check_hash(&a.config_hash, &p)?;
        Ok(ParameterSet::from_checkpoint(&a.params)?)
    }

    fn checkpoint(&self, dataset: &Dataset) -> anyhow::Result<Checkpoint> {
        let p = self.path(CHECKPOINT_FILE);
        let ck = Checkpoint::load(&p)
            .with_context(|| format!("reading {} (run train first?)", p.display()))?;
        ck.check_dataset(&dataset.train.header.config_hash)
            .context("checkpoint was trained on a different dataset")?;
        Ok(ck)
    }

    fn check_hash(&self, found: &str, path: &Path) -> anyhow::Result<()> {
        let expected = self.config.hash();
        if found != expected {
            bail!(
                "{} was produced by config {found}, but the current config hashes to {expected}",
                path.display()
            );
        }
        Ok(())
    }

    fn write(&self, name: &str, body: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
        Ok(())
    }

    fn write_config(&self) -> anyhow::Result<()> {
        self.write(RUN_CONFIG_FILE, &format!("{}\n", self.config.to_json()?))
    }
}

const PRETRAINED_FILE: &str = "pretrained.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainArtifact {
    config_hash: String,
    seed: u64,
    probe_accuracy: Vec<(Modality, f64)>,
    params: ParamCheckpoint,
}

fn gen_data(run: &Run) -> anyhow::Result<()> {
    let ds = build_dataset(&run.config.dataset)?;
    write_dataset(&run.data_dir(), &ds)?;
    run.write_config()?;
    println!(
        "dataset {} written to {} ({} / {} / {} scenes)",
        ds.config.hash(),
        run.data_dir().display(),
        ds.train.records.len(),
        ds.val.records.len(),
        ds.test.records.len()
    );
    Ok(())
}

fn pretrain(run: &Run) -> anyhow::Result<()> {
    let ds = run.dataset()?;
    let c = &run.config;
    let pre = pretrain_backbones(&ds.train, c.train.model.encoder.hidden, &c.pretrain, c.seed)?;
    for (m, acc) in &pre.probe_accuracy {
        println!("probe accuracy {m}: {acc:.4}");
    }
    let artifact = PretrainArtifact {
        config_hash: c.hash(),
        seed: c.seed,
        probe_accuracy: pre.probe_accuracy,
        params: pre.params.to_checkpoint(),
    };
    run.write(PRETRAINED_FILE, &serde_json::to_string(&artifact)?)
}

fn train_cmd(run: &Run) -> anyhow::Result<()> {
    let ds = run.dataset()?;
    let pre = run.pretrained()?;
    let ck = train(
        &run.config.train,
        &pre,
        &ds.train,
        &ds.config.render.weather,
    )?;
    if let Some(last) = ck.curve.last() {
        println!(
            "trained {} steps, final total loss {:.4}",
            ck.curve.len(),
            last.loss.total
        );
    }
    ck.save(&run.path(CHECKPOINT_FILE))?;
    println!("wrote {}", run.path(CHECKPOINT_FILE).display());
    run.write(
        CURVES_FILE,
        &curves_csv(&run.config.hash(), run.config.seed, &ck.curve),
    )
}

fn eval_cmd(run: &Run, protocol: Protocol) -> anyhow::Result<()> {
    let ds = run.dataset()?;
    let ck = run.checkpoint(&ds)?;
    let mut report = run_protocol(protocol, &ck, &ds.train, &ds.test)?;
    report.validate()?;
    stamp(&mut report, &run.config);
    println!(
        "{protocol}: mAP {:.4} composite {:.4}",
        report.map, report.composite
    );
    if protocol == Protocol::Weather {
        let rows = eval_weather(&ck, &ds.test)?;
        run.write(
            WEATHER_FILE,
            &weather_csv(&run.config.hash(), run.config.seed, &rows),
        )?;
    }
    run.write(&metrics_file(protocol.name()), &metrics_json(&report)?)
}

fn sweep_cmd(run: &Run, ranks: Option<Vec<usize>>) -> anyhow::Result<()> {
    let ranks = ranks.unwrap_or_else(|| run.config.eval.sweep_ranks.clone());
    let ds = run.dataset()?;
    let pre = run.pretrained()?;
    let rows = sweep_ranks(
        &run.config.train,
        &ranks,
        &pre,
        &ds.train,
        &ds.test,
        &ds.config.render.weather,
    )?;
    for r in &rows {
        println!(
            "rank {:>3}: trainable fraction {:.4}, composite {:.4}",
            r.rank, r.trainable_fraction, r.composite
        );
    }
    run.write(
        SWEEP_FILE,
        &sweep_csv(&run.config.hash(), run.config.seed, &rows),
    )
}

/// Data rows of an emitted CSV (after the provenance and header lines).
fn csv_rows(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(std::fs::read_to_string(path)?
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn report_cmd(run: &Run) -> anyhow::Result<bool> {
    let mut outputs = RunOutputs::default();
    for p in Protocol::ALL {
        let path = run.path(&metrics_file(p.name()));
        if path.exists() {
            let r: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            run.check_hash(&r.config_hash, &path)?;
            outputs.reports.push(r);
        }
    }
    let ck_path = run.path(CHECKPOINT_FILE);
    if ck_path.exists() {
        outputs.curve = Checkpoint::load(&ck_path)?.curve;
    }
    for row in csv_rows(&run.path(WEATHER_FILE))? {
        if let [condition, ap] = row.as_slice() {
            outputs.weather.push(WeatherRow {
                condition: condition.clone(),
                ap: ap.parse()?,
                frames: 0,
            });
        }
    }
    for row in csv_rows(&run.path(SWEEP_FILE))? {
        if let [rank, fraction, composite] = row.as_slice() {
            outputs.sweep.push(SweepRow {
                rank: rank.parse()?,
                trainable_fraction: fraction.parse()?,
                composite: composite.parse()?,
            });
        }
    }
    for p in emit_report(&run.out, &run.config, &outputs)? {
        println!("wrote {}", p.display());
    }
    let checks = verify_artifacts(&run.out, &run.config)?;
    let mut ok = true;
    for c in &checks {
        println!("verify {}: {}", c.path.display(), c.detail);
        ok &= c.ok;
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(c) => gen_data(&Run::resolve(&c)?).map(|_| true),
        Command::Pretrain(c) => pretrain(&Run::resolve(&c)?).map(|_| true),
        Command::Train(c) => train_cmd(&Run::resolve(&c)?).map(|_| true),
        Command::Eval { common, protocol } => {
            eval_cmd(&Run::resolve(&common)?, protocol).map(|_| true)
        }
        Command::Sweep { common, ranks } => sweep_cmd(&Run::resolve(&common)?, ranks).map(|_| true),
        Command::Report(c) => report_cmd(&Run::resolve(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: artifact verification failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
