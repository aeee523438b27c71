//! `gaitrm` — train, evaluate and probe the gait recognizer from the
//! command line.
//!
//! Every subcommand is one process with a stable exit code:
//!
//! | code | meaning                                             |
//! |------|-----------------------------------------------------|
//! | 0    | success                                             |
//! | 1    | runtime failure (non-finite loss, failed check)     |
//! | 2    | bad usage: flags, config file, grid, protocol name  |
//! | 3    | missing or unreadable data / output location        |
//! | 4    | checkpoint mismatch (shape, metadata, stale config) |
//!
//! Config keys can be overridden per process via `GAITRM_<KEY>` variables
//! (`train.lr` -> `GAITRM_TRAIN_LR`) wherever a `--config` file is read;
//! checkpoint-driven commands (`eval`, `heatmap`) instead trust the
//! `config.resolved` stored next to the checkpoint and verify its hash.

mod commands;
mod common;
mod config;

use clap::{Parser, Subcommand};
use gaitrm_core::error::CoreError;
use gaitrm_tensor::TensorError;

#[derive(Parser, Debug)]
#[command(
    name = "gaitrm",
    version,
    about = "Gait recognition with reverse-mask feature perturbation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model; writes config.resolved, loss.csv and checkpoints
    Train(commands::train::TrainArgs),
    /// Score a checkpoint under a retrieval protocol
    Eval(commands::eval::EvalArgs),
    /// Train+eval a grid of config points and aggregate the results
    Ablate(commands::ablate::AblateArgs),
    /// Generate the synthetic silhouette corpus as an on-disk cache
    Synth(commands::synth::SynthArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Render per-frame activation-energy maps for one sequence
    Heatmap(commands::heatmap::HeatmapArgs),
}

/// Exit code for an error that escaped a subcommand.
fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::InvalidConfig(_) | CoreError::DegenerateBatch(_) => 2,
        CoreError::Io(_) | CoreError::Image(_) | CoreError::Data(_) => 3,
        CoreError::CheckpointShape { .. }
        | CoreError::CheckpointMissing { .. }
        | CoreError::CheckpointMeta(_) => 4,
        CoreError::NonFiniteLoss { .. } => 1,
        CoreError::Tensor(t) => match t {
            TensorError::Io(_) => 3,
            TensorError::CheckpointFormat { .. } | TensorError::CheckpointMismatch { .. } => 4,
            _ => 1,
        },
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => commands::train::run(args),
        Cmd::Eval(args) => commands::eval::run(args),
        Cmd::Ablate(args) => commands::ablate::run(args),
        Cmd::Synth(args) => commands::synth::run(args),
        Cmd::Gradcheck(args) => commands::gradcheck::run(args),
        Cmd::Heatmap(args) => commands::heatmap::run(args),
    };
    let code = match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_error_space() {
        assert_eq!(exit_code(&CoreError::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code(&CoreError::DegenerateBatch("x".into())), 2);
        assert_eq!(exit_code(&CoreError::Data("x".into())), 3);
        assert_eq!(
            exit_code(&CoreError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "x"
            ))),
            3
        );
        assert_eq!(
            exit_code(&CoreError::CheckpointMissing { name: "w".into() }),
            4
        );
        assert_eq!(exit_code(&CoreError::CheckpointMeta("x".into())), 4);
        assert_eq!(
            exit_code(&CoreError::CheckpointShape {
                name: "w".into(),
                expected: vec![1],
                got: vec![2],
            }),
            4
        );
        assert_eq!(
            exit_code(&CoreError::NonFiniteLoss {
                iteration: 3,
                loss: f64::NAN,
                seed: 0,
                config_hash: "x".into(),
            }),
            1
        );
        assert_eq!(
            exit_code(&CoreError::Tensor(TensorError::CheckpointFormat {
                line: 1,
                msg: "x".into()
            })),
            4
        );
        assert_eq!(
            exit_code(&CoreError::Tensor(TensorError::NonFinite { op: "exp" })),
            1
        );
    }
}
