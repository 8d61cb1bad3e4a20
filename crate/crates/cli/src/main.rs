//! `kayra`: synthetic corpus generation, one-shot pipeline runs, service
//! roles, evaluation and report rendering.

mod config;
mod evaluate;
mod generate;
mod run;
mod serve;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::CliConfig;
use crate::evaluate::GateFailure;
use crate::generate::GenerateArgs;
use crate::run::BackendKind;
use crate::serve::Role;

#[derive(Debug, Parser)]
#[command(name = "kayra", version, about = "Automated chromosome karyotyping pipeline")]
struct Cli {
    /// TOML config file; `KAYRA_<SECTION>_<KEY>` variables override it.
    #[arg(long, global = true, env = "KAYRA_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic spreads, ground-truth sidecars and a manifest.
    Generate {
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1830)]
        width: usize,
        #[arg(long, default_value_t = 1830)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        overlap_pairs: usize,
        #[arg(long, default_value_t = 0)]
        touching_pairs: usize,
        /// Place one chromosome against the left edge of every spread.
        #[arg(long)]
        border_adjacent: bool,
        /// Give every n-th spread an XY karyotype (0 for none).
        #[arg(long, default_value_t = 0)]
        male_every: usize,
    },
    /// Run the cascade over images (files or directories).
    Run {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendKind::Stubs)]
        backends: BackendKind,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Base URL serving all four model endpoints (with `--backends urls`).
        #[arg(long)]
        services: Option<String>,
        /// Sidecar directory for the oracle; defaults to the image directories.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Fraction of oracle labels to flip.
        #[arg(long)]
        misclass_rate: Option<f64>,
    },
    /// Serve one role until interrupted.
    Serve {
        #[arg(value_enum)]
        role: Role,
        #[arg(long, default_value = "127.0.0.1:8100")]
        listen: SocketAddr,
        #[arg(long)]
        database: Option<String>,
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long)]
        services: Option<String>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        misclass_rate: Option<f64>,
    },
    /// Score prediction files against ground-truth sidecars.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long, default_value = "kayra")]
        system: String,
        /// Tag to break results down by (cultivation, type, patient_id, spread).
        #[arg(long = "facet")]
        facets: Vec<String>,
        #[arg(long)]
        min_segmentation_pct: Option<f64>,
        #[arg(long)]
        min_class_recall_pct: Option<f64>,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long)]
        rot_tol_deg: Option<f64>,
    },
    /// Compare systems from stored per-instance records.
    Report {
        /// `records.json` files written by `evaluate`; the first is tested
        /// against each of the others.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long = "facet")]
        facets: Vec<String>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn oracle_overrides(cfg: &mut CliConfig, ground_truth: Option<PathBuf>, misclass_rate: Option<f64>) -> anyhow::Result<()> {
    set(&mut cfg.oracle.ground_truth, ground_truth.map(|p| p.to_string_lossy().into_owned()));
    set(&mut cfg.oracle.misclass_rate, misclass_rate);
    if !(0.0..=1.0).contains(&cfg.oracle.misclass_rate) {
        anyhow::bail!("--misclass-rate must lie in [0, 1]");
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref(), std::env::vars())?;
    set(&mut cfg.seed, cli.seed);
    match cli.command {
        Command::Generate {
            out,
            count,
            width,
            height,
            overlap_pairs,
            touching_pairs,
            border_adjacent,
            male_every,
        } => {
            let args = GenerateArgs {
                count,
                seed: cfg.seed,
                width,
                height,
                overlap_pairs,
                touching_pairs,
                border_adjacent,
                male_every,
            };
            let manifest = generate::generate(&args, &out)?;
            println!("wrote {} spreads to {}", manifest.spreads.len(), out.display());
        }
        Command::Run {
            images,
            backends,
            out,
            services,
            ground_truth,
            misclass_rate,
        } => {
            if let Some(base) = services {
                cfg.endpoints = kayra_models::ServiceEndpoints::all(&base);
                cfg.endpoints.validate().map_err(anyhow::Error::msg)?;
            }
            oracle_overrides(&mut cfg, ground_truth, misclass_rate)?;
            run::run(&images, backends, &out, &cfg)?;
        }
        Command::Serve {
            role,
            listen,
            database,
            tokens,
            services,
            ground_truth,
            misclass_rate,
        } => {
            set(&mut cfg.database, database);
            set(&mut cfg.serve.tokens, tokens);
            if let Some(base) = services {
                cfg.endpoints = kayra_models::ServiceEndpoints::all(&base);
                cfg.endpoints.validate().map_err(anyhow::Error::msg)?;
            }
            oracle_overrides(&mut cfg, ground_truth, misclass_rate)?;
            serve::serve(role, listen, &cfg)?;
        }
        Command::Evaluate {
            pred,
            gt,
            out,
            system,
            facets,
            min_segmentation_pct,
            min_class_recall_pct,
            iou_thresh,
            rot_tol_deg,
        } => {
            set(&mut cfg.gates.min_segmentation_pct, min_segmentation_pct);
            set(&mut cfg.gates.min_class_recall_pct, min_class_recall_pct);
            set(&mut cfg.eval.iou_thresh, iou_thresh);
            set(&mut cfg.eval.rot_tol_deg, rot_tol_deg);
            cfg.eval.validate()?;
            evaluate::evaluate(&pred, &gt, &out, &system, &facets, &cfg)?;
        }
        Command::Report { records, out, facets } => {
            evaluate::report(&records, &out, &facets, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("KAYRA_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<GateFailure>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
