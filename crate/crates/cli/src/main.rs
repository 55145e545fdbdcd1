//! `counterseg` command-line driver.
//!
//! Every subcommand takes `--config` (TOML), `--seed` and `--out`, writes its
//! artifacts under `--out` and finishes with a `manifest.json` there. Failures
//! print one line `error[<category>]: <message>` on stderr.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use counterseg::{Error, Result};

use commands::Ctx;
use config::RunConfig;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "counterseg", version, about = "Weakly supervised foreground segmentation from background counterfactuals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory for artifacts and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural composite/background dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Import a directory of PNG backgrounds, composites and objects.
    Import {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        src: PathBuf,
    },
    /// Train the background encoder on training backgrounds.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Dataset bundle directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit balanced clusterings for one or more K and write per-K montages.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder directory written by `train-encoder`.
        #[arg(long)]
        encoder: PathBuf,
        /// Comma-separated cluster counts; defaults to `train.k`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Train the masking network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Clustering directory (one `k<K>` directory written by `cluster`).
        #[arg(long)]
        clusters: PathBuf,
    },
    /// Predict masks for a scene image or a dataset bundle.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Scene (`.png`, `.tsr`) or dataset bundle directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a model on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Transport oracle suite, or divergences between two CSV point clouds.
    Divcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the closed-form vs brute-force suite.
        #[arg(long)]
        oracle: bool,
        #[arg(long, requires = "y")]
        x: Option<PathBuf>,
        #[arg(long, requires = "x")]
        y: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        p: u32,
        #[arg(long, default_value_t = 1000)]
        slices: usize,
    },
    /// Counterfactual mosaic and per-group IoU table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
    },
}

/// Intra-op thread count from `COUNTERSEG_THREADS` (default 1).
fn threads() -> Result<usize> {
    match std::env::var("COUNTERSEG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("COUNTERSEG_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_with(name: &str, common: &Common, body: impl FnOnce(&mut Ctx) -> Result<()>) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let threads = threads()?;
    if threads > 1 {
        log::warn!("COUNTERSEG_THREADS={threads}: kernels run single-threaded; the value is recorded only");
    }
    std::fs::create_dir_all(&common.out)?;
    let manifest = Manifest::new(name, common.seed, threads, &cfg)?;
    let mut ctx = Ctx { cfg: &cfg, seed: common.seed, out: &common.out, manifest };
    body(&mut ctx)?;
    let path = ctx.manifest.finish(&common.out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn divcheck(common: Option<Common>, oracle: bool, points: Option<(PathBuf, PathBuf)>, p: u32, slices: usize, seed: u64) -> Result<()> {
    let mut lines = Vec::new();
    let mut oracle_error = None;
    if oracle {
        let worst = commands::divcheck_oracle(seed, 500)?;
        lines.push(format!("oracle: 500 instances, max abs error {worst:.3e}"));
        oracle_error = Some(worst);
    }
    let mut report = None;
    if let Some((x, y)) = &points {
        let r = commands::divcheck_points(&commands::read_points(x)?, &commands::read_points(y)?, p, slices, seed)?;
        if let Some(e) = r.exact {
            lines.push(format!("exact W_{p}^{p}: {e:.12}"));
        }
        lines.push(format!("sliced SW_{p}^{p} ({} slices): {:.12}", r.slices, r.sliced));
        lines.push(format!("energy-based SW_{p}^{p}: {:.12}", r.ebsw));
        report = Some(r);
    }
    if lines.is_empty() {
        return Err(Error::Config("divcheck needs --oracle or --x/--y point clouds".into()));
    }
    for l in &lines {
        println!("{l}");
    }
    if let Some(common) = common {
        let inputs: Vec<PathBuf> = points.iter().flat_map(|(x, y)| [x.clone(), y.clone()]).collect();
        run_with("divcheck", &common, |ctx| {
            for i in &inputs {
                ctx.manifest.input(i)?;
            }
            let summary = serde_json::json!({ "oracle_max_abs_error": oracle_error, "points": report });
            std::fs::write(ctx.out.join("divcheck.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            Ok(())
        })?;
    }
    match oracle_error {
        Some(w) if !(w <= 1e-9) => Err(Error::Numeric(format!("oracle error {w:.3e} exceeds 1e-9"))),
        _ => Ok(()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    threads()?;
    match cmd {
        Command::Datagen { common } => run_with("datagen", &common, commands::datagen),
        Command::Import { common, src } => run_with("import", &common, |c| commands::import(c, &src)),
        Command::TrainEncoder { common, data } => run_with("train-encoder", &common, |c| commands::train_encoder_cmd(c, &data)),
        Command::Cluster { common, data, encoder, k } => run_with("cluster", &common, |c| {
            let ks = if k.is_empty() { vec![c.cfg.train.k] } else { k };
            if ks.iter().any(|&k| k < 2) {
                return Err(Error::Config(format!("cluster counts must be at least 2, got {ks:?}")));
            }
            commands::cluster(c, &data, &encoder, &ks)
        }),
        Command::Train { common, data, clusters } => run_with("train", &common, |c| commands::train(c, &data, &clusters)),
        Command::Infer { common, model, input } => run_with("infer", &common, |c| commands::infer(c, &model, &input)),
        Command::Eval { common, model, data } => run_with("eval", &common, |c| {
            let m = commands::eval(c, &model, &data)?;
            println!(
                "IoU {:.4}  AUCROC {:.4}  AP {:.4}  background FPR {:.4}  ({} composites, {} backgrounds)",
                m.iou, m.aucroc, m.average_precision, m.background_fpr, m.composites, m.backgrounds
            );
            Ok(())
        }),
        Command::Report { common, model, data, clusters } => run_with("report", &common, |c| commands::report(c, &model, &data, &clusters)),
        Command::Divcheck { config, seed, out, oracle, x, y, p, slices } => {
            // Validate the config even when no run directory is written.
            RunConfig::load(config.as_deref())?;
            let common = out.map(|out| Common { config, seed, out });
            divcheck(common, oracle, x.zip(y), p, slices, seed)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Error text without the "<category> error: " lead, which the tag already carries.
fn message(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((lead, rest)) if lead.ends_with(" error") || lead == "contract violation" => rest.to_string(),
        _ => s,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&message(&e)));
            ExitCode::FAILURE
        }
    }
}

