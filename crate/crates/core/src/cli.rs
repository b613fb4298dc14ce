//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 bad usage or
//! configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bev::{render_svg, BevView};
use crate::config::{parse_override, RunConfig};
use crate::diagnostics::gradcheck_suite;
use crate::error::{Error, Result};
use crate::eval::evaluate_dataset;
use crate::kitti::read_labels;
use crate::synth::write_dataset;
use crate::train::{run_training, summary_text};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "auxdepth", version, about = "Monocular 3D detection with auxiliary depth features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random draw of the run.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on `data.train_dir`, then evaluate on the same split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written during an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// AP40 of a prediction directory against a label directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        iou: Option<f64>,
        /// `ap3d`, `apbev`, or both comma separated.
        #[arg(long)]
        metric: Option<String>,
        /// Also write the table as CSV.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Finite-difference checks of every gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic dataset in the KITTI layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Bird's-eye-view SVG of one frame's labels and predictions.
    BevPlot {
        #[command(flatten)]
        common: Common,
        /// Label directory.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Prediction directory.
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        #[arg(long)]
        frame: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Gradcheck { common }
            | Command::Synth { common, .. }
            | Command::BevPlot { common, .. } => common,
        }
    }
}

/// Config file, then `--set` overrides, then subcommand flags, then `--seed`.
pub fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut overrides: Vec<(String, String)> =
        common.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    match cmd {
        Command::Evaluate {
            class, iou, metric, ..
        } => {
            let flags = [("eval.class", class.clone()), ("eval.iou", iou.map(|v| v.to_string())), ("eval.metrics", metric.clone())];
            overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        }
        Command::Synth { count: Some(n), .. } => overrides.push(("synth.count".into(), n.to_string())),
        _ => {}
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one parsed command; `Ok(false)` means it ran but a check failed.
pub fn execute(cmd: &Command, cfg: RunConfig) -> Result<bool> {
    match cmd {
        Command::Train { resume, .. } => {
            let total = cfg.train.steps.max(1);
            let every = (total / 20).max(1);
            let summary = run_training(cfg, resume.as_deref(), |s| {
                if s.step % every == 0 || s.step == 1 {
                    println!(
                        "step {:>6}  lcls {:.4}  lreg {:.4}  ldepth {:.4}  ltotal {:.4}  lr {:.3e}",
                        s.step, s.loss.cls, s.loss.reg, s.loss.depth, s.loss.total, s.lr
                    );
                }
            })?;
            print!("{}", summary_text(&summary));
            Ok(true)
        }
        Command::Evaluate { pred, gt, csv, .. } => {
            let report = evaluate_dataset(pred, gt, &cfg.eval)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                write_file(path, &report.to_csv())?;
            }
            Ok(true)
        }
        Command::Gradcheck { .. } => {
            let results = gradcheck_suite(cfg.seed)?;
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::Synth { out, .. } => {
            let frames = write_dataset(
                out,
                cfg.synth_count,
                cfg.synth_min_objects,
                cfg.synth_max_objects,
                cfg.seed,
                &cfg.synth,
            )?;
            println!("wrote {} frames to {}", frames.len(), out.display());
            Ok(true)
        }
        Command::BevPlot {
            gt, pred, frame, out, ..
        } => {
            let gts = read_labels(&gt.join(format!("{frame}.txt")))?;
            let preds = match pred {
                Some(dir) => read_labels(&dir.join(format!("{frame}.txt")))?,
                None => Vec::new(),
            };
            write_file(out, &render_svg(&BevView::default(), &gts, &preds))?;
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cfg = match resolve_config(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    println!("# resolved configuration");
    print!("{}", cfg.to_text());
    println!();
    match execute(&cli.command, cfg) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
