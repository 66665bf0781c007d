//! Command-line entry points. Exit codes: 0 success, 1 runtime failure, 2 usage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::run_ablation;
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::export_split;
use crate::error::{config_err, Error, Result};
use crate::eval::evaluate;
use crate::report::{render_metrics, render_report, ReportRow};
use crate::train::{read_metrics, train, METRICS_FILE};

#[derive(Debug, Parser)]
#[command(name = "icfd", version, about = "Decoupled-feature adaptive adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a run config; writes metrics.csv and checkpoint.safetensors.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Evaluate a checkpoint on the test split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the three-variant ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured dataset to disk as PNG folders.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the metrics.csv of a finished run.
    Report {
        /// Run directory holding metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, backbone } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            if let Some(b) = backbone {
                cfg.classifier.backbone = b;
            }
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from("runs/train"));
            }
            let res = train(&cfg)?;
            if let Some(last) = res.records.last() {
                println!(
                    "epoch {}: total {:.5} (l_c {:.5}, l_s {:.5}, l_at {:.5})",
                    last.epoch, last.total, last.l_c, last.l_s, last.l_at
                );
            }
            if let Some(p) = res.checkpoint {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Eval { checkpoint, config, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let data_cfg = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => ck.config.clone(),
            };
            let split = data_cfg.load_data()?;
            if split.test.class_names() != ck.class_names.as_slice() {
                return Err(config_err!("dataset classes {:?} do not match checkpoint classes {:?}", split.test.class_names(), ck.class_names));
            }
            let rep = evaluate(&ck.models, &split.test)?;
            let rendered = render_report(&rep.class_names, &[ReportRow::new(ck.config.classifier.backbone.clone(), &rep)])?;
            print!("{}", rendered.text);
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_file(&dir.join("report.txt"), &rendered.text)?;
                write_file(&dir.join("report.csv"), &rendered.csv)?;
            }
        }
        Command::Ablate { config, seeds, backbone, out } => {
            if seeds == 0 {
                return Err(config_err!("--seeds must be at least 1"));
            }
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(o) = out.clone() {
                cfg.output_dir = Some(o);
            }
            let res = run_ablation(&cfg, seeds, backbone.as_deref())?;
            print!("{}", res.render_text()?);
            if let Some(dir) = cfg.output_dir {
                res.write(&dir)?;
            }
        }
        Command::GenData { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let split = cfg.load_data()?;
            let manifest = export_split(&split, &out)?;
            println!(
                "{} train / {} test images, manifest {}",
                split.train.len(),
                split.test.len(),
                manifest.display()
            );
        }
        Command::Report { out } => {
            let path = out.join(METRICS_FILE);
            if !path.exists() {
                return Err(config_err!("no metrics at {}", path.display()));
            }
            let records = read_metrics(&path)?;
            print!("{}", render_metrics(&records));
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
