mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use autoseq::lm::Backend;
use autoseq::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Bad invocation or configuration detected by the front end itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "autoseq", version, about = "Few-shot label-sequence search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Beam-search candidate label sequences for every class.
    Generate(RunArgs),
    /// Re-rank generated candidates and combine them into mappings.
    Rerank {
        #[command(flatten)]
        run: RunArgs,
        /// Candidates file (default: <out-dir>/candidates.jsonl).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Run the whole search and write a report.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// JSON object `{class: text}`; fine-tunes and evaluates only this mapping.
        #[arg(long)]
        baseline_mapping: Option<PathBuf>,
    },
    /// Score a mapping with a classifier checkpoint on the labeled data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// JSON object `{class: text}` (default: <out-dir>/mapping.json).
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Classifier checkpoint (default: the configured classifier).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check a model server for protocol conformance.
    ServeCheck {
        #[arg(long)]
        remote_endpoint: String,
    },
    /// Serve a local model over the wire protocol on stdio or TCP.
    Serve {
        #[arg(long)]
        backend: Backend,
        #[arg(long)]
        model: PathBuf,
        /// `host:port` to listen on instead of stdio.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write the synthetic review task: data, generator, classifier and a config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
    },
}

/// Flags shared by the pipeline commands; each overrides the config file.
#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task kind, e.g. single-sentence or sentence-pair.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train (and dev) examples per class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Mappings carried into fine-tuning.
    #[arg(long)]
    pub n: Option<usize>,
    /// Single-token label words (max length 1).
    #[arg(long)]
    pub autoword: bool,
    /// Backend for both generator and classifier.
    #[arg(long)]
    pub backend: Option<Backend>,
    /// Endpoint for remote backends: tcp://host:port or exec:command.
    #[arg(long)]
    pub remote_endpoint: Option<String>,
    /// Generator model file.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Classifier model file.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Fine-tuning steps per mapping.
    #[arg(long)]
    pub steps: Option<usize>,
    /// 0: all cores, 1: sequential, n: n threads.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<autoseq::Error>() {
            return match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Backend => EXIT_BACKEND,
                ErrorKind::Internal => EXIT_INTERNAL,
            };
        }
    }
    EXIT_INTERNAL
}

/// The error chain on one line. Library errors already print their sources,
/// so causes whose text is already present are skipped.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(run) => commands::generate(&run),
        Command::Rerank { run, candidates } => commands::rerank(&run, candidates.as_deref()),
        Command::Search { run, baseline_mapping } => commands::search(&run, baseline_mapping.as_deref()),
        Command::Eval {
            run,
            mapping,
            checkpoint,
        } => commands::eval(&run, mapping.as_deref(), checkpoint.as_deref()),
        Command::ServeCheck { remote_endpoint } => commands::serve_check(&remote_endpoint),
        Command::Serve { backend, model, listen } => commands::serve(backend, &model, listen.as_deref()),
        Command::Synth {
            out_dir,
            seed,
            per_class,
            pretrain_steps,
        } => commands::synth(&out_dir, seed, per_class, pretrain_steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
