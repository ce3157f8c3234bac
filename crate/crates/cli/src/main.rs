mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use magic_ct::error::Error;

use crate::config::{load_config, render_defaults};

/// Low-dose CT reconstruction harness: simulate scans, train the
/// graph-augmented unrolled network, reconstruct and evaluate.
#[derive(Debug, Parser)]
#[command(name = "magic-ct", version, disable_help_subcommand = true)]
struct Cli {
    /// TOML configuration file; missing keys fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=20 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<command>.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for the projector (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the configuration and print every applied default.
    Validate,
    /// Write phantoms, sinograms, and FBP inputs for each dose tier.
    Simulate,
    /// Train a network on simulated data and write a checkpoint.
    Train,
    /// Apply a trained checkpoint to one sinogram file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sinogram: PathBuf,
    },
    /// Compare predicted images against references; write metrics and
    /// difference images.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        pred_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        ref_dir: PathBuf,
        /// Method tag recorded in the metrics CSV.
        #[arg(long, default_value = "pred")]
        method: String,
    },
    /// Train and evaluate across a parameter grid from [sweep].
    Sweep,
    /// Export the patch graph of an image as an edge list and degree
    /// histogram.
    Graph {
        /// Raw image to analyze; defaults to the seeded phantom.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Divergence { .. } | Error::Internal(_) => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
    }
}

/// One line on stderr, machine-parseable as "error: <category>: ...".
fn fail(error: &Error) -> ExitCode {
    let text = error.to_string().replace('\n', "; ");
    eprintln!("error: {text}");
    ExitCode::from(exit_code(error))
}

fn command_slug(command: &Command) -> &'static str {
    match command {
        Command::Validate => "validate",
        Command::Simulate => "simulate",
        Command::Train => "train",
        Command::Reconstruct { .. } => "reconstruct",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep => "sweep",
        Command::Graph { .. } => "graph",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("error: config: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };

    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let loaded = match load_config(cli.config.as_deref(), &cli.sets, cli.seed) {
        Ok(l) => l,
        Err(e) => return fail(&e),
    };
    if !matches!(cli.command, Command::Validate) {
        print!("{}", render_defaults(&loaded.applied_defaults));
    }

    let out_dir = cli
        .out_dir
        .unwrap_or_else(|| PathBuf::from("runs").join(command_slug(&cli.command)));

    let result = match &cli.command {
        Command::Validate => commands::cmd_validate(&loaded),
        Command::Simulate => commands::cmd_simulate(&loaded, &out_dir),
        Command::Train => commands::cmd_train(&loaded, &out_dir),
        Command::Reconstruct { checkpoint, sinogram } => {
            commands::cmd_reconstruct(&loaded, &out_dir, checkpoint, sinogram)
        }
        Command::Evaluate { pred_dir, ref_dir, method } => {
            commands::cmd_evaluate(&loaded, &out_dir, pred_dir, ref_dir, method)
        }
        Command::Sweep => commands::cmd_sweep(&loaded, &out_dir),
        Command::Graph { input } => commands::cmd_graph(&loaded, &out_dir, input.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::input("x")), 2);
        assert_eq!(exit_code(&Error::Divergence { step: 1, detail: "x".into() }), 3);
        assert_eq!(exit_code(&Error::internal("x")), 3);
        assert_eq!(
            exit_code(&Error::io("p", std::io::Error::new(std::io::ErrorKind::NotFound, "x"))),
            4
        );
        assert_eq!(
            exit_code(&Error::Parse { path: "p".into(), offset: 0, message: "x".into() }),
            4
        );
    }
}
