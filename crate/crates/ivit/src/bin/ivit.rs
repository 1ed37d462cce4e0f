//! Command-line front end: dataset synthesis, bag extraction, feature
//! export, training, evaluation, gradient checking, and the scale sweep.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use ivit::config::{Profile, RunConfig};
use ivit::error::{Error, Result};
use ivit::pipeline::{
    evaluate_checkpoint, export_features, extract_bags, run_gradcheck, run_sweep, run_train,
    TrainChoice,
};
use ivit::synth::{generate_dataset, Ablation};
use ivit::train::{metrics_csv_row, METRICS_CSV_HEADER};

#[derive(Parser)]
#[command(
    name = "ivit",
    version,
    about = "Instance-based vision transformer pipeline for ROI subtyping"
)]
struct Cli {
    /// Base configuration: `paper` (P=64, N=500, D=128) or `desk` (small, CPU-friendly)
    #[arg(long, global = true, default_value = "paper")]
    profile: String,

    /// JSON overlay applied on top of the profile; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed everywhere (run + generator)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ROI dataset with train/val/test manifests
    Synth {
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// ROIs per class
        #[arg(long)]
        n_per_class: usize,
        /// Generator variant: full, grade_only, or spatial_only
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Extract instance bags from a manifest into a binary file
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the 153-column per-ROI feature CSV
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint plus a metrics log
    Train {
        /// Training split manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Validation split manifest (default: val.jsonl next to --manifest)
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// ivit, ivit_h, or dt_g
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest and print the metrics report
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the finite-difference gradient battery; exits 0 iff all pass
    Gradcheck,
    /// Train/evaluate every model scale over the (P, N) grid
    Sweep {
        /// Dataset directory holding train/val/test manifests (default: the
        /// config's out_dir)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_profile(s: &str) -> Result<Profile> {
    match s {
        "paper" => Ok(Profile::Paper),
        "desk" => Ok(Profile::Desk),
        other => Err(Error::Config(format!("unknown profile {:?}; expected paper or desk", other))),
    }
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    match s {
        "full" => Ok(Ablation::Full),
        "grade_only" => Ok(Ablation::GradeOnly),
        "spatial_only" => Ok(Ablation::SpatialOnly),
        other => Err(Error::Config(format!(
            "unknown ablation {:?}; expected full, grade_only, or spatial_only",
            other
        ))),
    }
}

/// Validation problems (bad flags, configs, inputs) exit 1; runtime failures
/// (I/O, corrupt checkpoints, numeric aborts) exit 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Contract { .. }
        | Error::Shape { .. }
        | Error::Manifest(_)
        | Error::IdOutOfRange { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<bool> {
    let profile = parse_profile(&cli.profile)?;
    let mut config = RunConfig::from_profile(profile);
    if let Some(path) = &cli.config {
        config.overlay_file(path)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }

    match cli.command {
        Command::Synth { out, n_per_class, ablation } => {
            if let Some(mode) = ablation {
                config.synth.ablation = parse_ablation(&mode)?;
            }
            config.validate()?;
            let entries = generate_dataset(&out, n_per_class, &config.synth)?;
            println!(
                "wrote {} ROIs ({} per class, {:?}) to {}",
                entries.len(),
                n_per_class,
                config.synth.ablation,
                out.display()
            );
        }
        Command::Extract { manifest, out } => {
            config.validate()?;
            let n = extract_bags(&manifest, &config.model_config(), &out)?;
            println!("wrote {} bags to {}", n, out.display());
        }
        Command::Features { manifest, out } => {
            config.validate()?;
            let n = export_features(&manifest, config.p, &out)?;
            println!("wrote {} feature rows to {}", n, out.display());
        }
        Command::Train { manifest, val_manifest, model, out } => {
            config.validate()?;
            let choice = TrainChoice::from_str(&model)?;
            let val = val_manifest.unwrap_or_else(|| manifest.with_file_name("val.jsonl"));
            let summary = run_train(choice, &config, &manifest, &val, &out)?;
            println!(
                "{}: best val acc {:.4} at epoch {}",
                summary.model_name, summary.best_val_acc, summary.best_epoch
            );
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("metrics:    {}", summary.metrics_path.display());
        }
        Command::Eval { ckpt, manifest } => {
            let (name, report) = evaluate_checkpoint(&ckpt, &manifest)?;
            println!("model: {}", name);
            print!("{}", report);
            println!("{}", METRICS_CSV_HEADER);
            println!("{}", metrics_csv_row(0, "test", &report, 0.0));
        }
        Command::Gradcheck => {
            let outcome = run_gradcheck()?;
            println!("{}", outcome);
            return Ok(outcome.passed());
        }
        Command::Sweep { data, out } => {
            config.validate()?;
            let dir = match data.or_else(|| config.out_dir.clone()) {
                Some(d) => d,
                None => {
                    return Err(Error::Config(
                        "no dataset directory: pass --data or set out_dir in the config".into(),
                    ))
                }
            };
            let p_values = [16, 32, 64];
            let n_values: &[usize] = match profile {
                Profile::Desk => &[16, 32, 64],
                Profile::Paper => &[250, 500, 750, 1000, 1250, 1500],
            };
            let csv = run_sweep(&config, &dir, &out, &p_values, n_values)?;
            println!("wrote {} sweep rows to {}", csv.lines().count() - 1, out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IVIT_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {}", e);
        }
    }

    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
