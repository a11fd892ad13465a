//! `locgen` — drives the full pipeline: scene/annotation generation,
//! likelihood pretraining, preference finetuning, box sampling, and
//! matching-based evaluation.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 violated internal
//! invariant (results would be untrustworthy), 3 numerical failure.
//!
//! Set `LOCGEN_THREADS` to cap the worker pool; by default it follows the
//! machine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use locgen::Error;

#[derive(Parser)]
#[command(name = "locgen", version, about = "Scene-conditioned box location modeling")]
struct Cli {
    /// Configuration file of dotted key=value lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set pretrain.steps=500
    /// (repeatable; applied after the file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for --set seed=N, applied last.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene and annotation datasets.
    GenData {
        /// Output directory for scenes.jsonl and annotations.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a box decoder on plausible annotations.
    Train {
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference-finetune a pretrained checkpoint.
    Dpo {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample boxes from a checkpoint into a JSONL file.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Sample only this scene (requires --class).
        #[arg(long, requires = "class")]
        scene: Option<String>,
        /// Class id to condition on when --scene is given.
        #[arg(long, requires = "scene")]
        class: Option<u32>,
        /// Boxes per (scene, class) prompt.
        #[arg(long, default_value_t = 10)]
        k: u32,
        /// Constrain samples to a region, as x1,y1,x2,y2 in pixels.
        #[arg(long)]
        region: Option<String>,
    },
    /// Evaluate a checkpoint with matching-based detection rates.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also score the scene-blind uniform baseline.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Evaluate across prediction budgets.
    SweepK {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50,100")]
        ks: Vec<u32>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Evaluate across sampler truncation settings.
    SweepTopk {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        top_ks: Vec<u32>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Time the training and inference hot paths (writes nothing).
    Bench {
        #[arg(long, default_value_t = 3)]
        reps: u32,
    },
}

fn run(cli: Cli) -> locgen::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, out),
        Command::Train { data, out } => commands::train(&cfg, data, out),
        Command::Dpo { data, model, out } => commands::dpo(&cfg, data, model, out),
        Command::Sample { data, model, out, split, scene, class, k, region } => commands::sample(
            &cfg,
            data,
            model,
            out,
            *split,
            scene.as_deref(),
            *class,
            *k,
            region.as_deref(),
        ),
        Command::Eval { data, model, out, split, with_baseline } => {
            commands::eval_cmd(&cfg, data, model, out, *split, *with_baseline)
        }
        Command::SweepK { data, model, out, ks, split } => {
            commands::sweep_k(&cfg, data, model, out, ks, *split)
        }
        Command::SweepTopk { data, model, out, top_ks, split } => {
            commands::sweep_topk(&cfg, data, model, out, top_ks, *split)
        }
        Command::Bench { reps } => commands::bench(&cfg, *reps),
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("LOCGEN_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: LOCGEN_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Invariant(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
