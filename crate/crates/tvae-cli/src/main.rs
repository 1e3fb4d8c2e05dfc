//! `tvae`: command-line surface for the Transformer VAE laboratory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{CmdError, PhaseSelect, SampleMode};
use tvae::data::Tokenizer;

const CONFIG_KEYS: &str = "\
Config keys (key=value files and --set, defaults in parentheses):
  run_id (run)  seed (42)
  data.train  data.valid  data.test  data.vocab  data.tokenizer (whitespace|char)
  model.hidden (64)  model.enc_layers (2)  model.dec_layers (2)  model.heads (4)
  model.head_dim (16)  model.ff_dim (128)  model.latent_dim (32)
  model.max_seq_len (32)  model.pooling (max|mean)  model.pooling_scope
  (all_layers|final_layer)  model.dropout (0)
  phase1.epochs (5)  phase1.denoise_p (0.15)  phase1.batch_size (32)
  phase1.lr (0.001)  phase1.freeze (decoder.*,w_proj)
  phase1.deterministic_latent (false)
  phase2.epochs (3)  phase2.schedule (linear:50; zero | constant:B | linear:E |
  cyclical[:C:R[:E]])  phase2.kl_threshold (0.5)  phase2.denoise_p (0.15)
  phase2.batch_size (32)  phase2.lr (0.001)  phase2.freeze ()
  optim.beta1 (0.9)  optim.beta2 (0.999)  optim.eps (0.001)
  optim.weight_decay (0.01)  optim.grad_clip (0 = off)
  eval.ppl_mode (elbo_bound | iw[:K])  eval.au_delta (0.01)
  eval.max_examples (2000)
  sweep.pooling  sweep.denoise_p  sweep.kl_threshold  sweep.schedule
  (comma-separated value lists)";

#[derive(Parser)]
#[command(name = "tvae", version, about = "Sequence-to-sequence Transformer VAE laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Whitespace,
    Char,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a vocabulary file from a one-example-per-line corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total id budget, reserved ids included.
        #[arg(long, default_value_t = 10_000)]
        max_size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, value_enum, default_value = "whitespace")]
        tokenizer: TokenizerArg,
    },
    /// Run two-phase training (or a single phase) into a run directory.
    #[command(after_help = CONFIG_KEYS)]
    Train {
        /// Key=value config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set phase2.kl_threshold=3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split: PPL, KL, -ELBO, MI, AU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "eval")]
        run_id: String,
        /// Append the report row to this CSV as well as printing it.
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Decode from the model: prior samples, reconstructions, interpolations.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Decode N latent vectors drawn from the prior.
        #[arg(long, value_name = "N", conflicts_with_all = ["reconstruct", "interpolate"])]
        from_prior: Option<usize>,
        /// Encode each line of a file and decode it back.
        #[arg(long, value_name = "FILE", conflicts_with = "interpolate")]
        reconstruct: Option<PathBuf>,
        /// Decode along the latent path between two lines of text.
        #[arg(long, num_args = 2, value_names = ["LINE_A", "LINE_B"])]
        interpolate: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        /// Temperature sampling instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Cartesian sweep over pooling, denoising, KL threshold, and schedule.
    #[command(after_help = CONFIG_KEYS)]
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit tidy CSV (step, run_label, value) from run directories.
    Plot {
        /// Run directories produced by `train` or `sweep`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        /// Which phase's rows to plot (labels follow the phase's scheme).
        #[arg(long, default_value_t = 2)]
        phase: u8,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    match cli.cmd {
        Cmd::Vocab { corpus, out, max_size, min_freq, tokenizer } => {
            let tok = match tokenizer {
                TokenizerArg::Whitespace => Tokenizer::Whitespace,
                TokenizerArg::Char => Tokenizer::Char,
            };
            commands::cmd_vocab(&corpus, &out, max_size, min_freq, tok)
        }
        Cmd::Train { config, sets, out, phase, resume } => {
            let phase = match phase {
                PhaseArg::One => PhaseSelect::One,
                PhaseArg::Two => PhaseSelect::Two,
                PhaseArg::Both => PhaseSelect::Both,
            };
            commands::cmd_train(config.as_deref(), &sets, &out, phase, resume.as_deref())
        }
        Cmd::Eval { checkpoint, split, vocab, run_id, out_csv, seed, sets } => {
            commands::cmd_eval(
                &checkpoint,
                &split,
                &vocab,
                &run_id,
                out_csv.as_deref(),
                seed,
                &sets,
            )
        }
        Cmd::Sample {
            checkpoint,
            vocab,
            from_prior,
            reconstruct,
            interpolate,
            steps,
            max_len,
            temperature,
            seed,
        } => {
            let mode = match (from_prior, reconstruct, interpolate) {
                (Some(n), None, None) => SampleMode::FromPrior(n),
                (None, Some(f), None) => SampleMode::Reconstruct(f),
                (None, None, Some(ab)) if ab.len() == 2 => SampleMode::Interpolate {
                    a: ab[0].clone(),
                    b: ab[1].clone(),
                    steps,
                },
                _ => {
                    return Err(CmdError {
                        code: 2,
                        message:
                            "choose exactly one of --from-prior, --reconstruct, --interpolate"
                                .into(),
                    })
                }
            };
            commands::cmd_sample(&checkpoint, &vocab, mode, max_len, temperature, seed)
        }
        Cmd::Sweep { config, sets, out } => commands::cmd_sweep(config.as_deref(), &sets, &out),
        Cmd::Plot { runs, metric, phase, out } => {
            commands::cmd_plot(&runs, &metric, phase, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
