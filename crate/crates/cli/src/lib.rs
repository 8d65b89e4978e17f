//! Command-line entry points for every training stage, evaluation,
//! generation and the local chat service.

pub mod commands;
pub mod config;
pub mod server;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Exit code for a bad command line.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for a failure while running a valid command.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model and data root (default: $MDRG_HOME, then ./mdrg_home).
    #[arg(long, global = true)]
    pub home: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Step budget for this stage.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Start from fresh parameters instead of the run checkpoint.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes corpora.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_dialogues: Option<usize>,
        #[arg(long)]
        n_text_dialogues: Option<usize>,
        #[arg(long)]
        n_pairs: Option<usize>,
    },
    /// Train the subword vocabulary on the corpora.
    TokenizerTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the image codec, match scorer and shape classifier.
    CodecTrain {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Pre-train the text generator on text-only dialogues.
    PretrainG {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Pre-train the text-to-image translator on description/image pairs.
    PretrainF {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Jointly fine-tune generator and translator on multimodal dialogues.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Weight of the translator loss.
        #[arg(long)]
        lambda: Option<f64>,
        /// Translator-only warm-up steps.
        #[arg(long)]
        warm_steps: Option<u64>,
    },
    /// Score predictions against gold dialogues, or the model on the test split.
    Eval {
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        respond: RespondArgs,
    },
    /// Generate responses for every context in a JSONL file.
    Generate {
        #[arg(long)]
        context_file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        respond: RespondArgs,
    },
    /// Run the HTTP chat service.
    Serve {
        #[arg(long, default_value_t = 8800)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Static UI bundle served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Default, Args)]
pub struct RespondArgs {
    /// Block the description token: text-only responses.
    #[arg(long)]
    pub pure_text: bool,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "mdrg", version, about = "Multimodal dialogue response generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Parses `argv` and runs the command, writing results to `out`.
/// Returns the process exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(f) => f,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match commands::dispatch(&cli.common, cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
