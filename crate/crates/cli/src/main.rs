//! `plr`: data preparation, training, evaluation and the analysis
//! experiments, one subcommand each.
//!
//! Exit status: 0 when the command ran and its assertions held, 1 when an
//! assertion failed, 2 on any error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use plr_cli::commands::{self, Outcome};
use plr_cli::config::{parse_config, parse_flag_pairs};

#[derive(Parser, Debug)]
#[command(
    name = "plr",
    version,
    about = "Parallel latent reasoning for sequential recommendation"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one key; repeatable. Beats the config file.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Interaction log (TSV) or prepared dataset (JSON).
    #[arg(long, global = true)]
    data: Option<String>,

    /// Output file, or output directory for `train`.
    #[arg(long, global = true)]
    out: Option<String>,

    #[arg(long, global = true)]
    checkpoint: Option<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and split an interaction log into a dataset file.
    Prepare,
    /// Generate the planted multi-interest interaction log.
    Synth,
    /// Train a model; writes checkpoint, history and test metrics.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval,
    /// Evaluate (or retrain) with one mechanism removed.
    Ablate {
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train every cell of a streams x steps x lambda x dropout grid.
    Sweep,
    /// Evaluate after randomly dropping training interactions.
    Robustness,
    /// Best rank over all intermediate states against the final output.
    Ceiling,
    /// Randomized checks of the ensemble, decay and gating inequalities.
    Theory,
    /// Analytic FLOPs of the reasoning-augmented model against the encoder.
    Flops {
        #[arg(long)]
        reference_scale: bool,
    },
    /// Raw attention weights of every stream and step for one user.
    DumpAttention {
        #[arg(long)]
        user: Option<usize>,
    },
}

impl Cli {
    /// Named flags in `key=value` form, after the `--set` ones so they win.
    fn flag_pairs(&self) -> Vec<String> {
        let mut flags = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push(format!("{k}={v}"));
            }
        };
        push("data", self.data.clone());
        push("out", self.out.clone());
        push("checkpoint", self.checkpoint.clone());
        push("seed", self.seed.map(|s| s.to_string()));
        match &self.command {
            Command::Ablate { variant } => push("variant", variant.clone()),
            Command::Flops { reference_scale: true } => push("reference_scale", Some("true".into())),
            Command::DumpAttention { user } => push("user", user.map(|u| u.to_string())),
            _ => {}
        }
        flags
    }
}

fn run(cli: &Cli) -> plr_core::Result<Outcome> {
    let flags = parse_flag_pairs(&cli.flag_pairs())?;
    let cfg = parse_config(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate { .. } => commands::ablate_cmd(&cfg),
        Command::Sweep => commands::sweep_cmd(&cfg),
        Command::Robustness => commands::robustness(&cfg),
        Command::Ceiling => commands::ceiling(&cfg),
        Command::Theory => commands::theory(&cfg),
        Command::Flops { .. } => commands::flops(&cfg),
        Command::DumpAttention { .. } => commands::attention(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(outcome) => {
            for p in &outcome.written {
                eprintln!("wrote {}", p.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("assertion failed; see the artifact for details");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
