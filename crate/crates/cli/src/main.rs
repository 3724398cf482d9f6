use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use madi_cli::{cmd_ablate, cmd_diagnose, cmd_eval, cmd_gen, cmd_train, default_checkpoint, Split, OUT_DIR_ENV};
use madi_core::config::{parse_override, RunConfig};

#[derive(Parser)]
#[command(name = "madi", version, about = "Multi-modal time-series question answering toolkit")]
struct Cli {
    /// JSON config file; unknown keys are rejected.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set steps=200`. Repeatable; applied
    /// after the file and the output-directory variable.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    Gen,
    /// Train a model on the train split.
    Train,
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Emit similarity matrices, histograms and summary scalars.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Train and evaluate every configured tag over every configured seed.
    Ablate,
}

fn resolve(cli: &Cli) -> madi_core::Result<RunConfig> {
    let mut overrides: Vec<(String, Value)> = Vec::new();
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        overrides.push(("out_dir".into(), Value::String(dir.to_string_lossy().into_owned())));
    }
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    RunConfig::resolve(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> madi_core::Result<()> {
    let cfg = resolve(&cli)?;
    eprintln!("resolved config:\n{}", cfg.to_json());
    match cli.command {
        Command::Gen => {
            let (train, eval) = cmd_gen(&cfg)?;
            println!("wrote {} and {}", train.display(), eval.display());
        }
        Command::Train => {
            let run = cmd_train(&cfg, &mut |r| {
                if r.step % 50 == 0 || r.eval_acc.is_some() {
                    eprintln!("{}", serde_json::to_string(r).expect("step records serialise"));
                }
            })?;
            if let Some(b) = &run.outcome.best {
                println!("best eval score {:.4} at step {}", b.score, b.step);
            }
            println!("wrote {}", default_checkpoint(&cfg).display());
        }
        Command::Eval { checkpoint, split } => {
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let report = cmd_eval(&cfg, &ckpt, split)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialise"));
        }
        Command::Diagnose { checkpoint, split } => {
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let d = cmd_diagnose(&cfg, &ckpt, split)?;
            println!("{}", serde_json::to_string_pretty(&d.summary).expect("summaries serialise"));
        }
        Command::Ablate => {
            let rows = cmd_ablate(&cfg, &mut |m| eprintln!("{m}"))?;
            print!("{}", madi_cli::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

