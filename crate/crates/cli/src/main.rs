mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::CliError;

/// Weather restoration with judge-gated pseudo-labels.
#[derive(Parser, Debug)]
#[command(name = "stormlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every image in a directory with each rating expert.
    Assess {
        image_dir: PathBuf,
        #[arg(long, default_value = data::DEFAULT_EXPERTS)]
        experts: String,
        /// Clean references for full-reference judges, one PNG per image id.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Rating prompt; must contain the `{scale}` placeholder.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the pseudo-label database from candidate restorations.
    InitDb {
        unlabeled_dir: PathBuf,
        /// One directory per restoration method, files named by image id.
        #[arg(long = "candidates", required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long, default_value = data::DEFAULT_EXPERTS)]
        experts: String,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        db: PathBuf,
    },
    /// Generate degradation/clean description pairs.
    Describe {
        image_dir: PathBuf,
        /// Tab-separated `image_id<TAB>scene` lines for the mock captioner.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Tab-separated in-context rewrite examples.
        #[arg(long)]
        icl: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "lexicon")]
        rewriter: data::RewriterKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the mean-teacher training schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (labeled/, unlabeled/, candidates/, prompts/).
        #[arg(long)]
        data: PathBuf,
        /// Pre-built database; candidates are assessed when omitted.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value = data::DEFAULT_EXPERTS)]
        experts: String,
        /// Defaults to `<data>/reference` when that directory exists.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Check config, data and backends, then exit without training.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore a test set and report VLM-Vis per weather condition.
    Eval {
        /// `identity`, a parameter file, or a checkpoint directory.
        #[arg(long)]
        model: String,
        /// Directory with `rain/`, `haze/` and/or `snow/` subdirectories.
        test_dir: PathBuf,
        #[arg(long, default_value = data::DEFAULT_EXPERTS)]
        experts: String,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the procedural desk fixture as a dataset directory.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        labeled: usize,
        #[arg(long, default_value_t = 40)]
        unlabeled: usize,
        #[arg(long, default_value_t = 20)]
        heldout: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Assess {
            image_dir,
            experts,
            reference,
            template,
            out,
        } => commands::assess(&image_dir, &experts, reference.as_deref(), template, &out),
        Command::InitDb {
            unlabeled_dir,
            candidates,
            experts,
            reference,
            template,
            db,
        } => commands::init_db(&unlabeled_dir, &candidates, &experts, reference.as_deref(), template, &db),
        Command::Describe {
            image_dir,
            scenes,
            icl,
            rewriter,
            seed,
            out,
        } => commands::describe(&image_dir, scenes.as_deref(), icl.as_deref(), rewriter, seed, &out),
        Command::Train {
            config,
            data,
            db,
            experts,
            reference,
            out,
            resume,
            dry_run,
            seed,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            db,
            experts,
            reference,
            out,
            resume,
            dry_run,
            seed,
        }),
        Command::Eval {
            model,
            test_dir,
            experts,
            reference,
            template,
            out,
        } => commands::eval(&model, &test_dir, &experts, reference.as_deref(), template, &out),
        Command::Toy {
            out,
            seed,
            size,
            labeled,
            unlabeled,
            heldout,
        } => commands::toy(
            &out,
            stormlab::toy::ToySpec {
                n_labeled: labeled,
                n_unlabeled: unlabeled,
                n_heldout: heldout,
                size,
                seed,
                ..Default::default()
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.error);
            ExitCode::from(e.code)
        }
    }
}
