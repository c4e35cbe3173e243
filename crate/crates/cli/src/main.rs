use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use isac_core::harness::{self, ExperimentConfig};
use isac_core::CoreError;

#[derive(Parser)]
#[command(
    name = "isac",
    version,
    about = "Camera-assisted beam steering and tracking experiments"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train the vision and temporal estimators and calibrate the Kalman filter.
    Train(Common),
    /// Vision-guided beam steering against the hierarchical sweep.
    Steer(Common),
    /// Beam tracking over every configured channel case.
    Track(Common),
    /// Beam coherence time over ranges and tangential speeds.
    Coherence {
        #[command(flatten)]
        common: Common,
        #[arg(long = "range", num_args = 1.., default_values_t = [50.0, 100.0, 200.0])]
        ranges: Vec<f64>,
        #[arg(long = "speed", num_args = 1.., default_values_t = [10.0, 20.0, 30.0])]
        speeds: Vec<f64>,
    },
    /// Communication time left in a half frame per scan count.
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long = "scans", num_args = 1.., default_values_t = [0.0, 1.0, 2.0, 5.0, 10.0, 15.0, 17.5])]
        scans: Vec<f64>,
    },
    /// Beam centers of each configured level.
    ExportCodebook(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "level", num_args = 1..)]
    levels: Vec<u32>,
    /// Case labels such as `snr-1_few_sync`.
    #[arg(long = "case", num_args = 1..)]
    cases: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CoreError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if !self.levels.is_empty() {
            cfg.levels = self.levels.clone();
        }
        if !self.cases.is_empty() {
            cfg.cases = self.cases.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(verb: Verb) -> Result<serde_json::Value, CoreError> {
    Ok(match verb {
        Verb::Train(c) => {
            let (_, manifest) = harness::run_training(&c.load()?)?;
            json!({ "verb": "train", "artifacts": manifest.artifacts, "config_hash": manifest.config_hash })
        }
        Verb::Steer(c) => {
            let cfg = c.load()?;
            let models = harness::load_or_train(&cfg)?;
            let (rows, manifest) = harness::run_task_b(&cfg, &models)?;
            json!({ "verb": "steer", "rows": rows.len(), "artifacts": manifest.artifacts, "config_hash": manifest.config_hash })
        }
        Verb::Track(c) => {
            let cfg = c.load()?;
            let models = harness::load_or_train(&cfg)?;
            let (rows, manifest) = harness::run_task_c(&cfg, &models)?;
            json!({ "verb": "track", "rows": rows.len(), "artifacts": manifest.artifacts, "config_hash": manifest.config_hash })
        }
        Verb::Coherence {
            common,
            ranges,
            speeds,
        } => {
            let rows = harness::run_coherence(&common.load()?, &ranges, &speeds)?;
            json!({ "verb": "coherence", "rows": rows.len() })
        }
        Verb::Budget { common, scans } => {
            let rows = harness::run_budget(&common.load()?, &scans)?;
            json!({ "verb": "budget", "rows": rows.len() })
        }
        Verb::ExportCodebook(c) => {
            let paths = harness::run_export_codebook(&c.load()?)?;
            json!({ "verb": "export-codebook", "files": paths })
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
