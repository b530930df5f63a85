//! `mixdiv`: synthetic data, training, diverse decoding and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure (non-finite loss, failed gradient check), 4 I/O or file format.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::{List, Switch};

#[derive(Parser, Debug)]
#[command(name = "mixdiv", version, about = "Diverse translation by mixup at desk scale")]
struct Cli {
    /// `key = value` settings file; flags override it. Artifact headers
    /// (`# key = value`) are accepted too, so any output can be replayed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cipher/synonym corpus.
    Synth(SynthArgs),
    /// Train a transformer, with or without mixup.
    Train(TrainArgs),
    /// Translate a source file with beam search or diverse mixup decoding.
    Decode(DecodeArgs),
    /// Score hypotheses: rfb, pwb and EDA.
    Evaluate(EvaluateArgs),
    /// Decode and score every (tau, seed) cell into a resumable CSV.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for train/test files and spec.txt.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub num_pairs: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Target synonyms per concept (1 gives a deterministic cipher).
    #[arg(long)]
    pub synonyms: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub src: Option<String>,
    #[arg(long)]
    pub tgt: Option<String>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<String>,
    /// Continue from this checkpoint (model, optimizer and settings).
    #[arg(long)]
    pub resume: Option<String>,
    /// Total optimizer steps, counting steps already taken when resuming.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long, value_name = "on|off")]
    pub mixup: Option<Switch>,
    /// Beta(alpha, alpha) concentration for mixup training.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_warmup: Option<u64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Training log (default: checkpoint path plus `.log`).
    #[arg(long)]
    pub log: Option<String>,
    /// Also write the checkpoint every this many steps (0: only at the end).
    #[arg(long)]
    pub save_every: Option<u64>,
}

/// Settings shared by `decode` and `sweep`.
#[derive(Args, Debug)]
pub struct DecodeOpts {
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Source sentences, one per line.
    #[arg(long)]
    pub input: Option<String>,
    /// Translations per input.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    #[arg(long)]
    pub max_output_len: Option<usize>,
    /// Scale each partner's concentration by its embedding distance.
    #[arg(long, value_name = "on|off")]
    pub sim_weight: Option<Switch>,
    /// Draw partners of similar length.
    #[arg(long, value_name = "on|off")]
    pub len_selection: Option<Switch>,
    /// Concentration used with `--sim-weight off` (default: tau).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Partner corpus (default: the checkpoint's training corpus).
    #[arg(long)]
    pub partners_src: Option<String>,
    #[arg(long)]
    pub partners_tgt: Option<String>,
    /// Only the first N inputs.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Worker threads (0: all cores, 1: sequential). Does not affect output.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Beam,
    Mixdiv,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "beam" => Ok(Mode::Beam),
            "mixdiv" => Ok(Mode::Mixdiv),
            _ => Err(format!("expected `beam` or `mixdiv`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Beam => "beam",
            Mode::Mixdiv => "mixdiv",
        })
    }
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub opts: DecodeOpts,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long, value_name = "beam|mixdiv")]
    pub mode: Option<Mode>,
    /// Hypotheses per input in beam mode.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, hide = true)]
    pub force_lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Hypotheses file written by `decode`.
    #[arg(long)]
    pub hyps: Option<String>,
    /// Reference translations, one per input.
    #[arg(long)]
    pub refs: Option<String>,
    /// Baseline BLEU R.
    #[arg(long)]
    pub r: Option<f64>,
    /// Beam-mode hypotheses whose top-1 corpus BLEU becomes R.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, value_name = "corpus|sentence")]
    pub aggregation: Option<mixdiv::metrics::Aggregation>,
    /// Append a `tau,seed,K,rfb,pwb,eda,R` row to this CSV.
    #[arg(long)]
    pub csv: Option<String>,
    /// Score a published (rfb, pwb) point instead of a hypotheses file.
    #[arg(long, requires = "pwb")]
    pub rfb: Option<f64>,
    #[arg(long, requires = "rfb")]
    pub pwb: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: DecodeOpts,
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long)]
    pub csv: Option<String>,
    #[arg(long, value_name = "T1,T2,...")]
    pub taus: Option<List<f64>>,
    #[arg(long, value_name = "S1,S2,...")]
    pub seeds: Option<List<u64>>,
    /// Baseline BLEU R (default: computed by plain beam search).
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long, value_name = "corpus|sentence")]
    pub aggregation: Option<mixdiv::metrics::Aggregation>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corrupt one backward rule; the check must then fail.
    #[arg(long, value_name = "on|off")]
    pub fault: Option<Switch>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth::run(cli.config.as_deref(), a),
        Command::Train(a) => commands::train::run(cli.config.as_deref(), a),
        Command::Decode(a) => commands::decode::run(cli.config.as_deref(), a),
        Command::Evaluate(a) => commands::evaluate::run(cli.config.as_deref(), a),
        Command::Sweep(a) => commands::sweep::run(cli.config.as_deref(), a),
        Command::Gradcheck(a) => commands::gradcheck::run(cli.config.as_deref(), a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
