use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use reflect_core::error::{Error, Result};
use reflect_core::experiment::{
    cmd_eval, cmd_forge, cmd_shortcut_experiment, cmd_sweep, cmd_train, Condition,
    ExperimentConfig, SweepKind, TrainTarget,
};

#[derive(Parser)]
#[command(
    name = "reflect",
    about = "Causal-reflection training on a synthetic grounded world"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the three-family training corpus.
    Forge {
        #[arg(long)]
        n_causal: Option<usize>,
        #[arg(long)]
        n_shortcut: Option<usize>,
        #[arg(long)]
        n_partial: Option<usize>,
        #[arg(long)]
        iou_gate: Option<f64>,
    },
    /// Train one stage or the whole pipeline.
    Train {
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate a snapshot on held-out observational and interventional data.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// SFT-only on correlational data versus the full pipeline, across seeds.
    ShortcutExp,
    /// Ablation sweep: tau, group-size, reward or order.
    Sweep {
        #[arg(long)]
        kind: String,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Forge {
            n_causal,
            n_shortcut,
            n_partial,
            iou_gate,
        } => {
            if let Some(n) = n_causal {
                cfg.forge.n_causal = n;
            }
            if let Some(n) = n_shortcut {
                cfg.forge.n_shortcut = n;
            }
            if let Some(n) = n_partial {
                cfg.forge.n_partial = n;
            }
            if let Some(g) = iou_gate {
                cfg.forge.perturb.iou_gate = g;
            }
            cfg.validate()?;
            let path = cmd_forge(&cfg)?;
            Ok(serde_json::json!({ "corpus": path, "config_hash": cfg.hash() }))
        }
        Cmd::Train { stage } => {
            let written = cmd_train(&cfg, stage.parse::<TrainTarget>()?)?;
            Ok(serde_json::json!({ "written": written, "config_hash": cfg.hash() }))
        }
        Cmd::Eval { snapshot } => {
            let r = cmd_eval(&cfg, &snapshot)?;
            Ok(serde_json::json!({
                "observational_accuracy": r.observational.accuracy,
                "interventional_accuracy": r.interventional.accuracy,
                "config_hash": r.config_hash,
            }))
        }
        Cmd::ShortcutExp => {
            let s = cmd_shortcut_experiment(&cfg)?;
            Ok(serde_json::json!({
                "sft_correlational_interventional": s.mean_interventional(Condition::SftCorrelational),
                "sft_correlational_observational": s.mean_observational(Condition::SftCorrelational),
                "full_pipeline_interventional": s.mean_interventional(Condition::FullPipeline),
                "config_hash": s.config_hash,
            }))
        }
        Cmd::Sweep { kind } => {
            let path = cmd_sweep(&cfg, kind.parse::<SweepKind>()?)?;
            Ok(serde_json::json!({ "sweep": path, "config_hash": cfg.hash() }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err: &Error = &e;
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.kind(), "message": err.to_string() })
            );
            ExitCode::FAILURE
        }
    }
}
