//! `gapa` — pipeline driver: cache → induce → attach → infer → eval, plus
//! toy-dataset generation and sweep runs.
//!
//! Exit codes: 0 success, 2 validation error (bad config, missing or stale
//! artifacts), 3 numerical failure (factorization, divergence).

use clap::{Args, Parser, Subcommand, ValueEnum};
use gapa_cli::config::{Overrides, PipelineConfig, VariantChoice};
use gapa_cli::dataset::{ToyKind, ToyParams};
use gapa_cli::gentoy::{run_gen_toy, GenToyArgs};
use gapa_cli::pipeline;
use gapa_cli::sweep::{cmd_sweep, SweepAxis};
use gapa_core::error::GapaError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gapa", version, about = "GP activations for frozen networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Relative jitter override.
    #[arg(long)]
    jitter: Option<f64>,
    /// Neighbors per query override.
    #[arg(long)]
    k: Option<usize>,
    /// Inducing-set size override.
    #[arg(long)]
    m: Option<usize>,
    /// Attention variance rule override.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKindArg {
    TwoMoons,
    GapRegression1d,
    RotatedShift,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    M,
    K,
    LayerPlacement,
}

#[derive(Subcommand)]
enum Command {
    /// Log pre-activations of the train split at each attachment point.
    Cache(ConfigArgs),
    /// Compress caches into inducing sets and build neighbor indices.
    Induce(ConfigArgs),
    /// Verify artifacts, fit the optional noise head, write the model manifest.
    Attach(ConfigArgs),
    /// Propagate the test split and write per-sample predictions JSONL.
    Infer(ConfigArgs),
    /// Score predictions into a flat metrics JSON.
    Eval(ConfigArgs),
    /// Generate a toy dataset (and optionally a trained toy backbone + config).
    GenToy {
        #[arg(value_enum)]
        kind: ToyKindArg,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        /// Far-field OOD points in the test split (two-moons family).
        #[arg(long, default_value_t = 250)]
        n_far: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        /// Rotation angle in degrees (rotated-shift only).
        #[arg(long, default_value_t = 30.0)]
        angle: f64,
        /// Also train a tanh MLP and write net.gapanet + config.json.
        #[arg(long)]
        train_net: bool,
        /// Hidden widths, comma separated.
        #[arg(long, default_value = "16,16", value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 1500)]
        epochs: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
    },
    /// One pipeline run per axis value, collected into a CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Axis values, comma separated.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, GapaError> {
    let overrides = Overrides {
        seed: args.seed,
        out_dir: args.out_dir.clone(),
        jitter: args.jitter,
        k: args.k,
        m: args.m,
        variant: args.variant.map(|v| match v {
            VariantArg::A => VariantChoice::A,
            VariantArg::B => VariantChoice::B,
        }),
    };
    PipelineConfig::load(&args.config, &overrides)
}

fn run() -> Result<(), GapaError> {
    match Cli::parse().command {
        Command::Cache(args) => {
            let cfg = load_config(&args)?;
            let caches = pipeline::cmd_cache(&cfg)?;
            for c in &caches {
                println!(
                    "cached layer {}: {} rows x {} -> {}",
                    c.layer_index(),
                    c.rows(),
                    c.width(),
                    cfg.cache_path(c.layer_index()).display()
                );
            }
        }
        Command::Induce(args) => {
            let cfg = load_config(&args)?;
            let sets = pipeline::cmd_induce(&cfg)?;
            for s in &sets {
                println!(
                    "induced layer {}: M={} d={} lengthscale={:.6} -> {}",
                    s.layer_index(),
                    s.m(),
                    s.dim(),
                    s.params().lengthscale(),
                    cfg.inducing_path(s.layer_index()).display()
                );
            }
        }
        Command::Attach(args) => {
            let cfg = load_config(&args)?;
            let manifest = pipeline::cmd_attach(&cfg)?;
            println!(
                "attached {} layer(s), K={} -> {}",
                manifest.layers.len(),
                manifest.k,
                cfg.model_manifest_path().display()
            );
        }
        Command::Infer(args) => {
            let cfg = load_config(&args)?;
            let n = pipeline::cmd_infer(&cfg)?;
            println!("wrote {n} predictions -> {}", cfg.predictions_path().display());
        }
        Command::Eval(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::cmd_eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report"));
        }
        Command::GenToy {
            kind,
            out_dir,
            seed,
            n_train,
            n_test,
            n_far,
            noise,
            angle,
            train_net,
            hidden,
            epochs,
            lr,
        } => {
            let args = GenToyArgs {
                kind: match kind {
                    ToyKindArg::TwoMoons => ToyKind::TwoMoons,
                    ToyKindArg::GapRegression1d => ToyKind::GapRegression1d,
                    ToyKindArg::RotatedShift => ToyKind::RotatedShift,
                },
                params: ToyParams {
                    n_train,
                    n_test,
                    n_far,
                    noise,
                    angle_deg: angle,
                },
                seed,
                train_net,
                hidden,
                epochs,
                lr,
            };
            let acc = run_gen_toy(&args, &out_dir)?;
            match acc {
                Some(a) => println!("generated {} (train accuracy {a:.3})", out_dir.display()),
                None => println!("generated {}", out_dir.display()),
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let cfg = load_config(&config)?;
            let axis = match axis {
                AxisArg::M => SweepAxis::M,
                AxisArg::K => SweepAxis::K,
                AxisArg::LayerPlacement => SweepAxis::LayerPlacement,
            };
            let (path, rows) = cmd_sweep(&cfg, axis, &values)?;
            for r in &rows {
                match &r.error {
                    None => println!("{} = {}: ok", axis.name(), r.value),
                    Some(e) => println!("{} = {}: error: {e}", axis.name(), r.value),
                }
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
