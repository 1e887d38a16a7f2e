use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "lexiforge", version, about = "Train character-level word generators and propose new words")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the parallel word file into train and holdout files.
    Split {
        #[command(flatten)]
        common: Common,
        /// Overrides the config holdout count.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Train the configured model; writes model.cwf and loss_trace.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Propose a translation for every input word, one per line.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source words, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Produce exactly this many proposals, cycling through the inputs.
        #[arg(long)]
        count: Option<usize>,
        /// Style-transfer direction.
        #[arg(long, value_enum, default_value_t = Direction::Forward)]
        direction: Direction,
    },
    /// Score proposals against the training targets and a reference vocabulary.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proposals: PathBuf,
        /// Training targets: a word list or a source<TAB>target file.
        #[arg(long)]
        training: PathBuf,
        /// Reference vocabulary (defaults to the config's data.reference).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Ratings CSV with header word,rating,judge,group.
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Root families: family<TAB>source<TAB>proposal.
        #[arg(long)]
        families: Option<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        dataset_id: Option<String>,
        /// Random pairs drawn for the root-consistency baseline.
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Print a checkpoint's manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message.replace(['\n', '\r'], " ") }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Split { common, holdout } => commands::split(&common, holdout),
        Command::Train { common } => commands::train(&common),
        Command::Generate {
            common,
            checkpoint,
            input,
            count,
            direction,
        } => commands::generate(&common, &checkpoint, &input, count, direction),
        Command::Evaluate {
            common,
            proposals,
            training,
            reference,
            ratings,
            families,
            model_id,
            dataset_id,
            trials,
        } => commands::evaluate(
            &common,
            commands::EvalArgs {
                proposals,
                training,
                reference,
                ratings,
                families,
                model_id,
                dataset_id,
                trials,
            },
        ),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<lexiforge::Error>())
                .map_or("error", lexiforge::Error::kind);
            let mut message = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !message.ends_with(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("{}", error_line(kind, &message));
            ExitCode::FAILURE
        }
    }
}
