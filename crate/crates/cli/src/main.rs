//! `adapter-forge`: inspect, merge, verify, diff and audit LoRA adapters.
//!
//! Exit codes: 0 success, 2 I/O or format error, 3 recipe precondition
//! violated, 4 configuration flagged, 5 verification failed.

mod cmd;
mod report;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use adapter_forge_core::{MergeWeights, ModelFamily, RecipeKind};
use clap::{Parser, Subcommand};

use report::emit;
use settings::{Overrides, Settings};

const EXIT_FORMAT: u8 = 2;
const EXIT_PRECONDITION: u8 = 3;
const EXIT_FLAGGED: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "adapter-forge", version, about = "LoRA adapter merging and configuration auditing")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Naming schema (JSON) mapping module kinds to tensor names.
    #[arg(long, global = true, env = "ADAPTER_FORGE_SCHEMA")]
    schema: Option<PathBuf>,

    /// Config file (TOML). Defaults to ./adapter-forge.toml, then the user config dir.
    #[arg(long, global = true, env = "ADAPTER_FORGE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Show signature, ranks, layer count and shapes of an adapter.
    Inspect {
        /// Adapter directory or weights file.
        path: PathBuf,
    },
    /// Target-module configuration histogram over a manifest.
    Stats {
        /// Adapter tree or newline-delimited JSON manifest.
        manifest: PathBuf,
        /// Only count adapters for this base model.
        #[arg(long)]
        base_model: Option<String>,
        /// One histogram per base model.
        #[arg(long, conflicts_with = "base_model")]
        per_base_model: bool,
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Merge a task adapter with one or two other adapters.
    Merge {
        task: PathBuf,
        /// Backdoor (or safety) adapters; 3way takes the full-config one first, then the FF-only one.
        #[arg(required = true)]
        others: Vec<PathBuf>,
        #[arg(long)]
        recipe: RecipeKind,
        /// Colon-separated ratio such as 1:1:1.5; defaults to the recipe's standard ratio.
        #[arg(long)]
        weights: Option<MergeWeights>,
        /// Model family for default ratios; inferred from the task's base model otherwise.
        #[arg(long)]
        family: Option<ModelFamily>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flag a signature (or an adapter's signature) that is rare in a manifest.
    Audit {
        #[arg(long)]
        manifest: PathBuf,
        /// Signature such as QVFF, or a path to an adapter.
        target: String,
        /// Audit the signature this recipe would produce from the target instead.
        #[arg(long)]
        recipe: Option<RecipeKind>,
        #[arg(long)]
        base_model: Option<String>,
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Check a merged adapter against its sources.
    Verify {
        merged: PathBuf,
        /// Source adapters, task first; taken from the merge manifest when omitted.
        sources: Vec<PathBuf>,
        #[arg(long)]
        recipe: Option<RecipeKind>,
        #[arg(long)]
        weights: Option<MergeWeights>,
        #[arg(long)]
        family: Option<ModelFamily>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Per-slot differences between the dense updates of two adapters.
    Diff { a: PathBuf, b: PathBuf },
}

impl Command {
    fn overrides<'a>(&self, cli: &'a Cli) -> Overrides<'a> {
        let (threshold, tolerance, family) = match self {
            Command::Stats { threshold, .. } | Command::Audit { threshold, .. } => (*threshold, None, None),
            Command::Merge { family, .. } => (None, None, *family),
            Command::Verify { tolerance, family, .. } => (None, *tolerance, *family),
            _ => (None, None, None),
        };
        Overrides {
            config: cli.config.as_deref(),
            schema: cli.schema.as_deref(),
            threshold,
            tolerance,
            family,
        }
    }
}

fn run(cli: &Cli, settings: &Settings) -> anyhow::Result<u8> {
    let json = cli.json;
    let code = match &cli.command {
        Command::Inspect { path } => {
            emit(&cmd::inspect::run(path, settings)?, json);
            0
        }
        Command::Stats {
            manifest,
            base_model,
            per_base_model,
            ..
        } => {
            emit(&cmd::stats::run(manifest, base_model.as_deref(), *per_base_model, settings)?, json);
            0
        }
        Command::Merge {
            task,
            others,
            recipe,
            weights,
            out,
            ..
        } => {
            emit(&cmd::merge::run(task, others, *recipe, weights.clone(), out, settings)?, json);
            0
        }
        Command::Audit {
            manifest,
            target,
            recipe,
            base_model,
            ..
        } => {
            let report = cmd::audit::run(manifest, target, *recipe, base_model.as_deref(), settings)?;
            emit(&report, json);
            if report.flagged() {
                EXIT_FLAGGED
            } else {
                0
            }
        }
        Command::Verify {
            merged,
            sources,
            recipe,
            weights,
            ..
        } => {
            let report = cmd::verify::run(merged, sources, *recipe, weights.clone(), settings)?;
            emit(&report, json);
            if report.passed {
                0
            } else {
                EXIT_VERIFY
            }
        }
        Command::Diff { a, b } => {
            emit(&cmd::diff::run(a, b, settings)?, json);
            0
        }
    };
    Ok(code)
}

fn report_error(err: &anyhow::Error, json: bool) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<adapter_forge_core::Error>());
    let code = match core {
        Some(e) if e.is_recipe_precondition() => EXIT_PRECONDITION,
        _ => EXIT_FORMAT,
    };
    let kind = core.map(|e| e.kind()).unwrap_or("Error");
    if json {
        let doc = serde_json::json!({
            "error": { "kind": kind, "message": format!("{err:#}"), "exit_code": code }
        });
        eprintln!("{doc}");
    } else {
        eprintln!("error ({kind}): {err:#}");
    }
    code
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::resolve(cli.command.overrides(&cli)).and_then(|s| run(&cli, &s));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => ExitCode::from(report_error(&err, cli.json)),
    }
}
