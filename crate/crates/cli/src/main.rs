//! `trellisnet` binary: argument parsing and exit-code mapping only; the
//! command logic lives in the library crate.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical divergence,
//! 3 verification failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use trellisnet_cli::commands::{
    cmd_convert, cmd_eval, cmd_gradcheck, cmd_train, cmd_verify, GradcheckArgs, TrainArgs,
    VerifyArgs,
};

#[derive(Parser)]
#[command(
    name = "trellisnet",
    version,
    about = "Train, evaluate, and verify trellis networks (weight-tied temporal convolutions)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        /// Path to the RunConfig JSON document.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and checkpoint/.
        #[arg(long)]
        out: PathBuf,
        /// Override task.seed (the TRELLIS_SEED env var overrides both).
        #[arg(long)]
        seed: Option<u64>,
        /// Override task.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override task.batch.
        #[arg(long)]
        batch: Option<usize>,
        /// Override optimizer.lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Override task.max_steps (copy task).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a trained checkpoint; prints metrics as JSON.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the task's data path (file or directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Verify the RNN-to-trellis embedding on random networks at fixed dims.
    Verify {
        /// Recurrent cell: "vanilla" or "lstm".
        #[arg(long, default_value = "vanilla")]
        cell: String,
        /// RNN layer count L.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Hidden width d per layer.
        #[arg(long, default_value_t = 3)]
        hidden: usize,
        /// Input dimensionality p.
        #[arg(long, default_value_t = 2)]
        input_dim: usize,
        /// History truncation M.
        #[arg(long, default_value_t = 5)]
        truncation: usize,
        /// Sequence length T of the probe inputs.
        #[arg(long, default_value_t = 12)]
        seq_len: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert an RNN checkpoint into an equivalent sparse-kernel trellis checkpoint.
    Convert {
        /// RNN checkpoint directory.
        #[arg(long)]
        rnn: PathBuf,
        /// History truncation M of the embedding.
        #[arg(long)]
        truncation: usize,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// After writing, reload and compare against the source recurrence.
        #[arg(long)]
        verify: bool,
    },
    /// Compare backpropagation against central finite differences on a small LM.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden channels.
        #[arg(long, default_value_t = 8)]
        q: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 5)]
        vocab: usize,
        #[arg(long, default_value_t = 7)]
        seq_len: usize,
        /// Negative-control hook: corrupt one gradient entry.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed, epochs, batch, lr, max_steps } => {
            cmd_train(&TrainArgs { config, out, seed, epochs, batch, lr, max_steps })
        }
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, data.as_deref()),
        Command::Verify { cell, layers, hidden, input_dim, truncation, seq_len, trials, seed } => {
            cmd_verify(&VerifyArgs { cell, layers, hidden, input_dim, truncation, seq_len, trials, seed })
        }
        Command::Convert { rnn, truncation, out, verify } => {
            cmd_convert(&rnn, truncation, &out, verify)
        }
        Command::Gradcheck { seed, q, depth, vocab, seq_len, corrupt } => {
            cmd_gradcheck(&GradcheckArgs { seed, q, depth, vocab, seq_len, corrupt })
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
