//! `moer`: corpus generation, toy pretraining, baseline and rerouted
//! generation, ablation sweeps, and analysis export.
//!
//! Every command takes `--config PATH` (flat `key = value` file) plus flag
//! overrides; flags win. The effective configuration is serialized into
//! the output directory before any computation. Errors print a one-line
//! JSON record to stderr and exit with a documented nonzero code.

use clap::{Parser, Subcommand};
use moer_cli::{cmd_ablate, cmd_analyze, cmd_gen_corpus, cmd_generate, cmd_pretrain, cmd_reroute};
use moer_cli::{CliError, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "moer", version, about = "Toy MoE transformer with test-time router adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SessionFlags {
    /// Checkpoint to load.
    #[arg(long)]
    model: Option<String>,
    /// Inline prompt text.
    #[arg(long)]
    prompt: Option<String>,
    /// File holding the prompt text.
    #[arg(long)]
    prompt_file: Option<String>,
    /// Optimization steps per phase (n).
    #[arg(long)]
    steps: Option<usize>,
    /// Re-optimize every this many generated tokens (m).
    #[arg(long)]
    interval: Option<usize>,
    /// Layer selection strategy: hard|soft|random|reverse|last_k|all|none.
    #[arg(long)]
    strategy: Option<String>,
    /// Fraction of layers for the hard-family strategies, in (0,1].
    #[arg(long)]
    ratio: Option<f64>,
    /// Session RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sampling temperature; 0 is greedy.
    #[arg(long)]
    temperature: Option<f64>,
    /// Confidence ranking direction: as_written|negated.
    #[arg(long)]
    confidence_sign: Option<String>,
    /// Stop generation at the `;` terminator.
    #[arg(long)]
    stop_at_eos: bool,
}

impl SessionFlags {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("model", self.model.clone()),
            ("prompt", self.prompt.clone()),
            ("prompt_file", self.prompt_file.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("interval", self.interval.map(|v| v.to_string())),
            ("strategy", self.strategy.clone()),
            ("ratio", self.ratio.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.clone()),
            ("max_new_tokens", self.max_new_tokens.map(|v| v.to_string())),
            ("temperature", self.temperature.map(|v| v.to_string())),
            ("confidence_sign", self.confidence_sign.clone()),
            ("stop_at_eos", self.stop_at_eos.then(|| "true".to_string())),
        ]
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic multi-domain corpus.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        min_payload: Option<usize>,
        #[arg(long)]
        max_payload: Option<usize>,
    },
    /// Train the toy MoE model on a corpus file.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Training steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Baseline generation (no adaptation).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        session: SessionFlags,
    },
    /// Test-time rerouting: optimize router deltas, then generate.
    Reroute {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        session: SessionFlags,
    },
    /// Sweep strategy x continuous-refinement over a prompt set.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        session: SessionFlags,
        /// Built-in task prompts per domain (when no prompt file given).
        #[arg(long)]
        task_prompts: Option<usize>,
        /// Few-shot samples prepended to built-in prompts.
        #[arg(long)]
        prefix_samples: Option<usize>,
    },
    /// Turn session logs into entropy/utilization/edit-distance exports.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        /// Baseline session log (JSONL).
        #[arg(long)]
        baseline: Option<String>,
        /// Rerouted session log (JSONL).
        #[arg(long)]
        rerouted: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus { config, out, size, seed, min_payload, max_payload } => {
            let run = RunConfig::resolve(
                config.as_deref(),
                &[
                    ("out", out),
                    ("size", size.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                    ("min_payload", min_payload.map(|v| v.to_string())),
                    ("max_payload", max_payload.map(|v| v.to_string())),
                ],
            )?;
            cmd_gen_corpus(&run)
        }
        Command::Pretrain { config, corpus, out, steps, seed } => {
            let run = RunConfig::resolve(
                config.as_deref(),
                &[
                    ("corpus", corpus),
                    ("out", out),
                    ("steps", steps.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                ],
            )?;
            cmd_pretrain(&run)
        }
        Command::Generate { config, session } => {
            let run = RunConfig::resolve(config.as_deref(), &session.overrides())?;
            cmd_generate(&run)
        }
        Command::Reroute { config, session } => {
            let run = RunConfig::resolve(config.as_deref(), &session.overrides())?;
            cmd_reroute(&run)
        }
        Command::Ablate { config, session, task_prompts, prefix_samples } => {
            let mut overrides = session.overrides();
            overrides.push(("task_prompts", task_prompts.map(|v| v.to_string())));
            overrides.push(("prefix_samples", prefix_samples.map(|v| v.to_string())));
            let run = RunConfig::resolve(config.as_deref(), &overrides)?;
            cmd_ablate(&run)
        }
        Command::Analyze { config, model, baseline, rerouted, out } => {
            let run = RunConfig::resolve(
                config.as_deref(),
                &[
                    ("model", model),
                    ("baseline", baseline),
                    ("rerouted", rerouted),
                    ("out", out),
                ],
            )?;
            cmd_analyze(&run)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", e.record());
        std::process::exit(e.exit_code());
    }
}
