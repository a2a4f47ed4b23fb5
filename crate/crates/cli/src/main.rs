use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mar3d_cli::config::ExperimentConfig;
use mar3d_cli::pipeline::{self, Overrides, PipelineError};
use mar3d_core::translate::UpdateMode;
use mar3d_model::losses::Variant;

/// Desk-scale 3D CycleGAN metal artifact reduction: data simulation,
/// training, sliding-window translation and evaluation.
#[derive(Parser, Debug)]
#[command(name = "mar3d", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output root, replacing the config's `output_root`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, replacing the config's `seed`
    #[arg(long)]
    seed_override: Option<u64>,
    /// Loss variant: CGAN, CGAN_ID or PROPOSED
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the training corpus and the paired test set
    BuildData {
        #[command(flatten)]
        common: Common,
    },
    /// Train (or resume) the selected variant
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Translate the paired test set with a trained G_Y
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: the variant's own)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// SINGLE or SEQUENTIAL
        #[arg(long, value_parser = parse_mode)]
        mode: Option<UpdateMode>,
        /// Slices per window; must match the checkpoint
        #[arg(long)]
        n_slices: Option<usize>,
    },
    /// Score translated volumes against the paired references
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of translated volumes (default: the configured one)
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<UpdateMode>,
        #[arg(long)]
        n_slices: Option<usize>,
    },
    /// build-data, train, translate and evaluate in one go
    ReproduceAll {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<UpdateMode, String> {
    match s.to_ascii_uppercase().as_str() {
        "SINGLE" => Ok(UpdateMode::Single),
        "SEQUENTIAL" => Ok(UpdateMode::Sequential),
        _ => Err(format!("unknown mode {s:?} (expected SINGLE or SEQUENTIAL)")),
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .map_err(PipelineError::from)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(out) = &common.out {
        cfg.output_root = out.clone();
    }
    if let Some(seed) = common.seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_summary(summary: &pipeline::EvalSummary) {
    println!(
        "{}: {} volumes evaluated, {} omitted, median R_s {}",
        summary.method,
        summary.n_evaluated,
        summary.omissions.len(),
        summary.median_r_s.map_or("n/a".to_string(), |v| format!("{v:.3}%"))
    );
    for m in &summary.per_m {
        println!(
            "  m={}: SSIM {:.4} -> {:.4} (median R_s {:.3}%)",
            m.m, m.median_ssim_original, m.median_ssim_corrected, m.median_r_s
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData { common } => {
            let cfg = load(&common)?;
            let s = pipeline::build_data(&cfg)?;
            println!(
                "{} training and {} test entries in {:.1}s ({}, {})",
                s.n_train,
                s.n_test,
                s.seconds,
                s.train_manifest.display(),
                s.test_manifest.display()
            );
        }
        Command::Train { common } => {
            let cfg = load(&common)?;
            let o = Overrides {
                variant: common.variant,
                ..Overrides::default()
            };
            let t = pipeline::train_variant(&cfg, &o)?;
            println!("{} ({} steps, {:.1}s)", t.checkpoint.display(), t.steps, t.seconds);
        }
        Command::Translate {
            common,
            checkpoint,
            mode,
            n_slices,
        } => {
            let cfg = load(&common)?;
            let o = Overrides {
                variant: common.variant,
                mode,
                n_slices,
            };
            let t = pipeline::translate_test_set(&cfg, checkpoint.as_deref(), &o)?;
            println!(
                "{} volumes in {:.1}s -> {}",
                t.n_volumes,
                t.seconds,
                t.out_dir.display()
            );
        }
        Command::Evaluate {
            common,
            results,
            mode,
            n_slices,
        } => {
            let cfg = load(&common)?;
            let o = Overrides {
                variant: common.variant,
                mode,
                n_slices,
            };
            let e = pipeline::evaluate(&cfg, results.as_deref(), &o)?;
            print_summary(&e.summary);
            println!("report written to {}", e.out_dir.display());
        }
        Command::ReproduceAll { common } => {
            let cfg = load(&common)?;
            let o = Overrides {
                variant: common.variant,
                ..Overrides::default()
            };
            let r = pipeline::reproduce_all(&cfg, &o)?;
            print_summary(&r.eval.summary);
            println!("report written to {}", r.eval.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
