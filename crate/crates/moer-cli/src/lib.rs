//! Command implementations behind the `moer` binary.
//!
//! The CLI is a thin orchestration layer: all numerics live in the `moer`
//! library. Every command resolves a [`RunConfig`] (config file plus flag
//! overrides, flags winning), serializes the effective configuration and
//! input checksums into the output directory before any computation, and
//! then writes its outputs deterministically. Re-running a command from
//! its own serialized config reproduces the outputs byte for byte.

use moer::analysis;
use moer::kv::KvMap;
use moer::model::checkpoint::{self, CheckpointError};
use moer::model::MoEModel;
use moer::reroute::{run_session, ConfidenceSign, SessionConfig, SessionLog, Strategy};
use moer::tasks::{self, eval::prompt_set, pretrain};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub mod ablate;

pub use ablate::{cmd_ablate, prompt_set_from_tsv};

/// Exit codes, also emitted in the machine-readable error record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, malformed config file, unknown strategy, bad combination.
    Config = 2,
    /// Missing or unreadable input file.
    Io = 3,
    /// Checkpoint failed to load.
    Checkpoint = 4,
    /// Prompt text outside the model alphabet.
    Encoding = 5,
    /// Numeric failure at run time (divergence, non-finite values).
    Runtime = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    /// Single-line JSON error record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": match self.kind {
                ErrorKind::Config => "config",
                ErrorKind::Io => "io",
                ErrorKind::Checkpoint => "checkpoint",
                ErrorKind::Encoding => "encoding",
                ErrorKind::Runtime => "runtime",
            },
            "exit_code": self.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: ErrorKind::Io, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Checkpoint,
        };
        Self { kind, message: format!("checkpoint: {e}") }
    }
}

impl From<tasks::TaskError> for CliError {
    fn from(e: tasks::TaskError) -> Self {
        let kind = match &e {
            tasks::TaskError::Encoding { .. } | tasks::TaskError::TokenRange { .. } => ErrorKind::Encoding,
            tasks::TaskError::Config(_) => ErrorKind::Config,
            tasks::TaskError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<moer::reroute::RerouteError> for CliError {
    fn from(e: moer::reroute::RerouteError) -> Self {
        let kind = match &e {
            moer::reroute::RerouteError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<moer::model::ModelError> for CliError {
    fn from(e: moer::model::ModelError) -> Self {
        Self { kind: ErrorKind::Runtime, message: e.to_string() }
    }
}

impl From<analysis::AnalysisError> for CliError {
    fn from(e: analysis::AnalysisError) -> Self {
        Self { kind: ErrorKind::Runtime, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: ErrorKind::Runtime, message: e.to_string() }
    }
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

/// Merged settings for one run: config-file values overlaid by flags.
/// The serialized form in the output directory uses the same keys as the
/// config file, so any run can be replayed from its own audit trail.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub kv: KvMap,
}

impl RunConfig {
    /// Load the optional config file, then apply flag overrides.
    pub fn resolve(
        config_path: Option<&Path>,
        overrides: &[(&str, Option<String>)],
    ) -> Result<Self, CliError> {
        let mut kv = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError {
                    kind: ErrorKind::Io,
                    message: format!("config {}: {e}", p.display()),
                })?;
                KvMap::parse(&text).map_err(|e| CliError::config(e.to_string()))?
            }
            None => KvMap::default(),
        };
        for (key, value) in overrides {
            if let Some(v) = value {
                kv.set(key, v);
            }
        }
        Ok(Self { kv })
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        self.kv.get_or(key, default).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.kv.get(key)
    }

    pub fn require_str(&self, key: &str) -> Result<&str, CliError> {
        self.get_str(key)
            .ok_or_else(|| CliError::config(format!("missing required setting '{key}'")))
    }

    /// Session settings from the merged map (defaults from the library).
    pub fn session_config(&self) -> Result<SessionConfig, CliError> {
        let d = SessionConfig::default();
        let strategy: Strategy = self
            .get_str("strategy")
            .map(|s| s.parse())
            .transpose()
            .map_err(|e: moer::reroute::RerouteError| CliError::config(e.to_string()))?
            .unwrap_or(d.strategy);
        let confidence_sign: ConfidenceSign = self
            .get_str("confidence_sign")
            .map(|s| s.parse())
            .transpose()
            .map_err(|e: moer::reroute::RerouteError| CliError::config(e.to_string()))?
            .unwrap_or(d.confidence_sign);
        let cfg = SessionConfig {
            opt_steps: self.get("steps", d.opt_steps)?,
            regen_interval: self.get("interval", d.regen_interval)?,
            lr: self.get("lr", d.lr)?,
            weight_decay: self.get("weight_decay", d.weight_decay)?,
            epsilon: self.get("epsilon", d.epsilon)?,
            strategy,
            ratio: self.get("ratio", d.ratio)?,
            max_new_tokens: self.get("max_new_tokens", d.max_new_tokens)?,
            temperature: self.get("temperature", d.temperature)?,
            rng_seed: self.get("seed", d.rng_seed)?,
            eos_token: if self.get("stop_at_eos", false)? {
                Some(tasks::eos_token())
            } else {
                None
            },
            confidence_sign,
        };
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Echo resolved session settings into the serialized config so the run
/// directory records every effective value, defaults included.
pub fn echo_session(kv: &mut KvMap, s: &SessionConfig) {
    kv.set("steps", s.opt_steps);
    kv.set("interval", s.regen_interval);
    kv.set("lr", s.lr);
    kv.set("weight_decay", s.weight_decay);
    kv.set("epsilon", s.epsilon);
    kv.set("ratio", s.ratio);
    kv.set("seed", s.rng_seed);
    kv.set("max_new_tokens", s.max_new_tokens);
    kv.set("temperature", s.temperature);
    kv.set("stop_at_eos", s.eos_token.is_some());
    kv.set(
        "confidence_sign",
        match s.confidence_sign {
            ConfidenceSign::AsWritten => "as_written",
            ConfidenceSign::Negated => "negated",
        },
    );
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError {
        kind: ErrorKind::Io,
        message: format!("{}: {e}", path.display()),
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write the audit trail: effective config plus checksums of every input
/// file. Called before any computation starts.
pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    run: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("effective_config.cfg"), run.kv.to_string_sorted())?;
    let mut checksums = serde_json::Map::new();
    for (name, path) in inputs {
        checksums.insert(
            name.to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
            }),
        );
    }
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": "effective_config.cfg",
        "inputs": checksums,
    });
    fs::write(out_dir.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_model(run: &RunConfig) -> Result<(MoEModel, PathBuf), CliError> {
    let path = PathBuf::from(run.require_str("model")?);
    if !path.exists() {
        return Err(CliError {
            kind: ErrorKind::Io,
            message: format!("model file {} not found", path.display()),
        });
    }
    Ok((checkpoint::load(&path)?, path))
}

/// Resolve the prompt from `prompt` or the contents of `prompt_file`.
fn resolve_prompt(run: &RunConfig) -> Result<(String, Option<PathBuf>), CliError> {
    match (run.get_str("prompt"), run.get_str("prompt_file")) {
        (Some(p), None) => Ok((p.to_string(), None)),
        (None, Some(f)) => {
            let path = PathBuf::from(f);
            let text = fs::read_to_string(&path).map_err(|e| CliError {
                kind: ErrorKind::Io,
                message: format!("{}: {e}", path.display()),
            })?;
            Ok((text.trim_end_matches('\n').to_string(), Some(path)))
        }
        (Some(_), Some(_)) => Err(CliError::config("give either a prompt or a prompt file, not both")),
        (None, None) => Err(CliError::config("a prompt is required (prompt or prompt_file)")),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Generate the synthetic corpus file.
pub fn cmd_gen_corpus(run: &RunConfig) -> Result<(), CliError> {
    let out_dir = PathBuf::from(run.require_str("out")?);
    let size = run.get("size", 2000usize)?;
    let seed = run.get("seed", 0u64)?;
    let mut specs = tasks::default_specs();
    let min_payload = run.get("min_payload", specs[0].min_payload)?;
    let max_payload = run.get("max_payload", specs[0].max_payload)?;
    for s in specs.iter_mut() {
        s.min_payload = min_payload;
        s.max_payload = max_payload;
    }
    let mut run = run.clone();
    run.kv.set("size", size);
    run.kv.set("seed", seed);
    run.kv.set("min_payload", min_payload);
    run.kv.set("max_payload", max_payload);
    write_run_manifest(&out_dir, "gen-corpus", &run, &[])?;
    let corpus = tasks::gen_corpus(&specs, size, seed)?;
    fs::write(out_dir.join("corpus.txt"), tasks::corpus_to_string(&corpus))?;
    println!("wrote {} samples to {}", corpus.len(), out_dir.join("corpus.txt").display());
    Ok(())
}

/// Pretrain the toy model on a corpus file and save the checkpoint.
pub fn cmd_pretrain(run: &RunConfig) -> Result<(), CliError> {
    let out_dir = PathBuf::from(run.require_str("out")?);
    let corpus_path = PathBuf::from(run.require_str("corpus")?);

    let corpus_text = fs::read_to_string(&corpus_path).map_err(|e| CliError {
        kind: ErrorKind::Io,
        message: format!("{}: {e}", corpus_path.display()),
    })?;
    let corpus = tasks::corpus_from_string(&corpus_text)?;

    let tc = pretrain::TrainConfig::from_kv(&run.kv)?;
    let mut mc = moer::ModelConfig::toy_default();
    mc.vocab_size = tasks::vocab_size();
    mc.d_model = run.get("d_model", mc.d_model)?;
    mc.n_layers = run.get("n_layers", mc.n_layers)?;
    mc.n_experts = run.get("n_experts", mc.n_experts)?;
    mc.k_active = run.get("k_active", mc.k_active)?;
    mc.n_shared = run.get("n_shared", mc.n_shared)?;
    mc.d_ff = run.get("d_ff", mc.d_ff)?;
    mc.n_heads = run.get("n_heads", mc.n_heads)?;
    mc.max_seq = run.get("max_seq", mc.max_seq)?;
    mc.rng_seed = run.get("model_seed", mc.rng_seed)?;

    // audit trail with the fully resolved recipe, before training starts
    let mut run = run.clone();
    run.kv.set("steps", tc.steps);
    run.kv.set("batch_size", tc.batch_size);
    run.kv.set("seq_len", tc.seq_len);
    run.kv.set("lr", tc.lr);
    run.kv.set("aux_coef", tc.aux_coef);
    run.kv.set("seed", tc.seed);
    run.kv.set("d_model", mc.d_model);
    run.kv.set("n_layers", mc.n_layers);
    run.kv.set("n_experts", mc.n_experts);
    run.kv.set("k_active", mc.k_active);
    run.kv.set("n_shared", mc.n_shared);
    run.kv.set("d_ff", mc.d_ff);
    run.kv.set("n_heads", mc.n_heads);
    run.kv.set("max_seq", mc.max_seq);
    run.kv.set("model_seed", mc.rng_seed);
    write_run_manifest(&out_dir, "pretrain", &run, &[("corpus", &corpus_path)])?;

    let (model, report) = pretrain::pretrain_toy(&mc, &corpus, &tc)?;
    let model_path = out_dir.join("model.moer");
    checkpoint::save(&model, &model_path)?;
    fs::write(out_dir.join("train_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    for w in &report.collapse_warnings {
        eprintln!(
            "warning: layer {} routes {:.1}% of tokens to expert {}",
            w.layer,
            w.token_share * 100.0,
            w.expert
        );
    }
    println!(
        "trained {} steps (loss {:.4} -> {:.4}), checkpoint at {}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(())
}

fn run_one_session(
    model: &MoEModel,
    prompt_text: &str,
    session: &SessionConfig,
    out_dir: &Path,
) -> Result<(), CliError> {
    let prompt = tasks::tokenize(prompt_text)?;
    let outcome = run_session(model, &prompt, session)?;
    let text = tasks::detokenize(&outcome.tokens)?;
    fs::write(out_dir.join("generation.txt"), format!("{prompt_text}{text}\n"))?;
    let mut buf = Vec::new();
    outcome.log.write_jsonl(&mut buf)?;
    fs::write(out_dir.join("session.jsonl"), buf)?;
    println!("generated {} tokens over {} optimization phases", outcome.tokens.len(), outcome.log.phases());
    println!("{prompt_text}{text}");
    Ok(())
}

/// Baseline decoding: no optimization phases, no deltas applied.
pub fn cmd_generate(run: &RunConfig) -> Result<(), CliError> {
    // generation is always strategy `none`; pin that in the audit trail
    let mut run = run.clone();
    run.kv.set("strategy", Strategy::None.label());
    let session = run.session_config()?;
    echo_session(&mut run.kv, &session);
    let out_dir = PathBuf::from(run.require_str("out")?);
    let (prompt_text, prompt_path) = resolve_prompt(&run)?;
    let (model, model_path) = load_model(&run)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("model", &model_path)];
    if let Some(p) = prompt_path.as_deref() {
        inputs.push(("prompt_file", p));
    }
    write_run_manifest(&out_dir, "generate", &run, &inputs)?;
    run_one_session(&model, &prompt_text, &session, &out_dir)
}

/// Test-time rerouting: the full optimize/generate session.
pub fn cmd_reroute(run: &RunConfig) -> Result<(), CliError> {
    let mut run = run.clone();
    let session = run.session_config()?;
    run.kv.set("strategy", session.strategy.label());
    echo_session(&mut run.kv, &session);
    let out_dir = PathBuf::from(run.require_str("out")?);
    let (prompt_text, prompt_path) = resolve_prompt(&run)?;
    let (model, model_path) = load_model(&run)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("model", &model_path)];
    if let Some(p) = prompt_path.as_deref() {
        inputs.push(("prompt_file", p));
    }
    write_run_manifest(&out_dir, "reroute", &run, &inputs)?;
    run_one_session(&model, &prompt_text, &session, &out_dir)
}

/// Consume baseline and rerouted session logs; emit plot-ready exports.
pub fn cmd_analyze(run: &RunConfig) -> Result<(), CliError> {
    let out_dir = PathBuf::from(run.require_str("out")?);
    let baseline_path = PathBuf::from(run.require_str("baseline")?);
    let rerouted_path = PathBuf::from(run.require_str("rerouted")?);
    let (model, model_path) = load_model(run)?;
    write_run_manifest(
        &out_dir,
        "analyze",
        run,
        &[("model", &model_path), ("baseline", &baseline_path), ("rerouted", &rerouted_path)],
    )?;

    let read_log = |p: &Path| -> Result<SessionLog, CliError> {
        let file = fs::File::open(p).map_err(|e| CliError {
            kind: ErrorKind::Io,
            message: format!("{}: {e}", p.display()),
        })?;
        SessionLog::read_jsonl(std::io::BufReader::new(file)).map_err(CliError::from)
    };
    let baseline = read_log(&baseline_path)?;
    let rerouted = read_log(&rerouted_path)?;
    let cfg = model.config();

    // entropy trajectories, 16-token block means
    let eb = analysis::entropy_blocks(&baseline, analysis::ENTROPY_BLOCK);
    let er = analysis::entropy_blocks(&rerouted, analysis::ENTROPY_BLOCK);
    let mut jsonl = analysis::entropy_jsonl("baseline", &eb);
    jsonl.push_str(&analysis::entropy_jsonl("rerouted", &er));
    fs::write(out_dir.join("entropy.jsonl"), jsonl)?;

    // expert-utilization shift
    let before =
        analysis::UtilizationMatrix::from_log(&baseline, cfg.n_layers, cfg.n_experts, cfg.k_active);
    let after =
        analysis::UtilizationMatrix::from_log(&rerouted, cfg.n_layers, cfg.n_experts, cfg.k_active);
    let shift = analysis::utilization_shift(&before, &after)?;
    fs::write(
        out_dir.join("utilization_shift.csv"),
        analysis::matrix_csv(&shift, cfg.n_layers, cfg.n_experts),
    )?;

    // layer-wise pathway edit distance at matched token positions
    let lev = analysis::layerwise_edit_distance(&baseline, &rerouted, cfg.n_layers)?;
    fs::write(out_dir.join("layerwise_edit_distance.csv"), analysis::layer_csv(&lev))?;

    // operation estimates
    let ops_base = analysis::op_count_estimate(cfg, &baseline)?;
    let ops_reroute = analysis::op_count_estimate(cfg, &rerouted)?;
    let ops = serde_json::json!({
        "baseline_ops": ops_base,
        "rerouted_ops": ops_reroute,
        "overhead_ratio": ops_reroute / ops_base,
    });
    fs::write(out_dir.join("opcount.json"), serde_json::to_string_pretty(&ops)? + "\n")?;

    println!(
        "entropy blocks: baseline {} rerouted {}; op overhead {:.2}x",
        eb.len(),
        er.len(),
        ops_reroute / ops_base
    );
    Ok(())
}

/// Session-level parallelism cap from `REROUTE_THREADS` (default 1).
pub fn reroute_threads() -> usize {
    std::env::var("REROUTE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Build the built-in task prompt set for ablations: `count` prompts per
/// domain with gold continuations, using the evaluation specs.
pub fn builtin_prompt_set(
    count: usize,
    prefix_samples: usize,
    seed: u64,
) -> Result<Vec<(String, String)>, CliError> {
    let set = prompt_set(&tasks::eval::eval_specs(), count, prefix_samples, seed)?;
    Ok(set
        .into_iter()
        .map(|(sample, context)| (context, sample.continuation().to_string()))
        .collect())
}
