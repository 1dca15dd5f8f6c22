use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multiads::ErrorKind;

mod commands;

#[derive(Parser)]
#[command(
    name = "multiads",
    version,
    about = "Zero- and few-shot multi-type anomaly detection"
)]
struct Cli {
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Force ordered gradient reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the config seed and MULTIADS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base utilities.
    Kba {
        #[command(subcommand)]
        action: KbaAction,
    },
    /// Prompt generation.
    Prompts {
        #[command(subcommand)]
        action: PromptsAction,
    },
    /// Lists prompts and image keys for an external embedding exporter.
    ExportManifest {
        #[arg(long)]
        config: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains adapters and writes the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scores images and writes heatmaps, label maps and results.json.
    Infer(InferArgs),
    /// Computes the evaluation report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// results.json from `infer`; without it the test split is scored in memory.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Report path (default: <output>/eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum KbaAction {
    /// Loads and validates a knowledge base (bundled name or JSON path).
    Validate { kba: String },
}

#[derive(Subcommand)]
enum PromptsAction {
    /// Prints the prompt sets of a product as JSON.
    Gen {
        kba: String,
        product: String,
        /// Only the product-relevant defect states.
        #[arg(long)]
        filtered: bool,
    },
}

#[derive(Args)]
struct ScoringArgs {
    /// Few-shot scoring with the first K good training images per product.
    #[arg(long, value_name = "K", conflicts_with = "batched")]
    fewshot: Option<usize>,
    /// Explicit few-shot reference images (files or directories).
    #[arg(long, num_args = 1.., conflicts_with_all = ["batched", "fewshot"])]
    references: Vec<PathBuf>,
    /// Batched zero-shot scoring over the whole input set.
    #[arg(long)]
    batched: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    /// Images or directories; defaults to the test split of `test_root`.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Product of the given inputs, when not inferable from their paths.
    #[arg(long)]
    product: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringArgs,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let global = commands::Global {
        deterministic: cli.deterministic,
        seed: cli.seed,
    };
    let result = match cli.command {
        Command::Kba {
            action: KbaAction::Validate { kba },
        } => commands::kba_validate(&kba),
        Command::Prompts {
            action:
                PromptsAction::Gen {
                    kba,
                    product,
                    filtered,
                },
        } => commands::prompts_gen(&kba, &product, filtered),
        Command::ExportManifest { config, out } => {
            commands::export_manifest(&global, &config, out.as_deref())
        }
        Command::Train { config } => commands::train(&global, &config),
        Command::Infer(a) => commands::infer(
            &global,
            commands::InferRequest {
                config: &a.config,
                inputs: &a.inputs,
                checkpoint: a.checkpoint.as_deref(),
                product: a.product.as_deref(),
                output: a.output.as_deref(),
                scoring: a.scoring.into(),
            },
        ),
        Command::Eval {
            config,
            results,
            checkpoint,
            scoring,
            out,
        } => commands::eval(
            &global,
            &config,
            results.as_deref(),
            checkpoint.as_deref(),
            scoring.into(),
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

impl From<ScoringArgs> for commands::Scoring {
    fn from(a: ScoringArgs) -> Self {
        if a.batched {
            commands::Scoring::Batched
        } else if !a.references.is_empty() {
            commands::Scoring::References(a.references)
        } else if let Some(k) = a.fewshot {
            commands::Scoring::FewShot(k)
        } else {
            commands::Scoring::ZeroShot
        }
    }
}
