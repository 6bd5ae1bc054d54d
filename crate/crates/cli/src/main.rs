use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spire_core::pipeline::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_gen, cmd_infer, cmd_targets, cmd_train, RunConfig, CONFIG_FILE,
    SUMMARY_COLUMNS, WEIGHTS_FILE,
};
use spire_core::prps::SupervisionMode;
use spire_core::scene::Split;
use spire_core::{Error, Result};

/// Single-point supervised infrared small target detection.
#[derive(Debug, Parser)]
#[command(name = "spire", version)]
struct Cli {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both gen.seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory or file, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, annotations, manifest).
    Gen,
    /// Export supervision maps for every image.
    Targets {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of prps,impulse,gaussian.
        #[arg(long, default_value = "prps,impulse,gaussian")]
        modes: String,
    },
    /// Train a model on the dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Detect targets with trained weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a detections CSV against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Report parameters, FLOPs and forward latency.
    Bench,
    /// Run the ablation grid from the ablate.* keys.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("split must be train or test, got {s:?}"))),
    }
}

fn out_or<'a>(out: &'a Option<PathBuf>, default: &'a str) -> &'a Path {
    out.as_deref().unwrap_or(Path::new(default))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    match cli.cmd {
        Command::Gen => {
            let out = out_or(&cli.out, "data");
            let m = cmd_gen(&cfg, out)?;
            println!("wrote {} images to {}", m.images.len(), out.display());
        }
        Command::Targets { dataset, modes } => {
            let modes: Vec<SupervisionMode> = modes.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
            let out = out_or(&cli.out, "targets");
            let n = cmd_targets(&cfg, &dataset, out, &modes)?;
            println!("wrote {n} maps to {}", out.display());
        }
        Command::Train { dataset } => {
            let out = out_or(&cli.out, "run");
            let res = cmd_train(&cfg, &dataset, out)?;
            println!(
                "best epoch {} of {}; weights in {} ({:.1}s)",
                res.best_epoch,
                res.log.len(),
                out.join(WEIGHTS_FILE).display(),
                res.seconds
            );
        }
        Command::Infer { weights, dataset, split } => {
            let out = out_or(&cli.out, "detections.csv");
            let n = cmd_infer(&cfg, &weights, &dataset, parse_split(&split)?, out)?;
            println!("wrote {n} detections to {}", out.display());
        }
        Command::Eval { pred, gt, manifest, split } => {
            let out = out_or(&cli.out, "report.json");
            let r = cmd_eval(&cfg, &pred, &gt, &manifest, parse_split(&split)?, out)?;
            println!(
                "precision {:.4}  recall {:.4}  f1 {:.4}  fa {:.3e}  (tp {} fp {} fn {})",
                r.precision, r.recall, r.f1, r.fa, r.tp, r.fp, r.fn_
            );
        }
        Command::Bench => {
            let r = cmd_bench(&cfg, cli.out.as_deref())?;
            let mut s = serde_json::to_string_pretty(&r)?;
            s.push('\n');
            print!("{s}");
        }
        Command::Ablate { dataset } => {
            let out = out_or(&cli.out, "ablation");
            let rows = cmd_ablate(&cfg, &dataset, out)?;
            println!("{}", SUMMARY_COLUMNS[..11].join("\t"));
            for r in &rows {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.3}\t{:.4}\t{:.4}\t{:.4}",
                    r.cell, r.mode, r.sigma, r.radius, r.stride, r.variant, r.params_m, r.flops_g,
                    r.report.precision, r.report.recall, r.report.f1
                );
            }
            println!("summary in {}, config echo in {}", out.join("summary.csv").display(), out.join(CONFIG_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
