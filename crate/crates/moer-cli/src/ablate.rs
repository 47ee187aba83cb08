//! Ablation sweep over layer-selection strategies and continuous
//! refinement, mirroring the library's session machinery over a prompt
//! set with gold continuations.
//!
//! For every strategy in {hard, soft, random, reverse, last_k, all, none}
//! crossed with continuous refinement {on, off}, each prompt runs a full
//! generation session (the phases follow the session schedule; "off"
//! stretches the re-optimization interval past the token budget so
//! exactly one phase runs). The reported metric is the teacher-forced
//! mean continuation loss of the gold continuation under the session's
//! final deltas; win rate counts prompts strictly better than the `none`
//! baseline row. Row order is fixed by the sweep order regardless of the
//! `REROUTE_THREADS` fan-out.

use crate::{reroute_threads, CliError, ErrorKind, RunConfig};
use moer::model::MoEModel;
use moer::reroute::{run_session, SessionConfig, Strategy};
use moer::tasks::{self, eval::continuation_loss};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub prompt_index: usize,
    pub loss: f64,
    pub phases: usize,
    pub generated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub continuous: bool,
    pub prompts: usize,
    pub mean_loss: f64,
    /// Fraction of prompts strictly better than the `none` baseline.
    pub win_rate: f64,
    pub total_phases: usize,
    pub cells: Vec<AblationCell>,
}

/// Parse a prompt set from TSV lines: `prompt<TAB>continuation`.
pub fn prompt_set_from_tsv(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, c) = line.split_once('\t').ok_or_else(|| {
            CliError::config(format!("prompt file line {}: expected prompt<TAB>continuation", i + 1))
        })?;
        if p.is_empty() || c.is_empty() {
            return Err(CliError::config(format!("prompt file line {}: empty field", i + 1)));
        }
        out.push((p.to_string(), c.to_string()));
    }
    if out.is_empty() {
        return Err(CliError::config("prompt file holds no prompts"));
    }
    Ok(out)
}

fn eval_one(
    model: &MoEModel,
    prompt: &str,
    continuation: &str,
    session: &SessionConfig,
) -> Result<AblationCell, CliError> {
    let prompt_toks = tasks::tokenize(prompt)?;
    let cont_toks = tasks::tokenize(continuation)?;
    let outcome = run_session(model, &prompt_toks, session)?;
    let deltas = if session.strategy == Strategy::None { None } else { Some(outcome.deltas.tensors()) };
    let (loss, _) = continuation_loss(model, &prompt_toks, &cont_toks, deltas)?;
    Ok(AblationCell {
        prompt_index: 0,
        loss,
        phases: outcome.log.phases(),
        generated: outcome.tokens.len(),
    })
}

fn eval_combo(
    model: &MoEModel,
    prompts: &[(String, String)],
    session: &SessionConfig,
) -> Result<Vec<AblationCell>, CliError> {
    let threads = reroute_threads().min(prompts.len());
    let mut cells: Vec<Option<Result<AblationCell, CliError>>> = Vec::new();
    cells.resize_with(prompts.len(), || None);
    if threads <= 1 {
        for (i, (p, c)) in prompts.iter().enumerate() {
            cells[i] = Some(eval_one(model, p, c, session));
        }
    } else {
        let slots: Vec<std::sync::Mutex<Option<Result<AblationCell, CliError>>>> =
            prompts.iter().map(|_| std::sync::Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let (p, c) = &prompts[i];
                    let res = eval_one(model, p, c, session);
                    *slots[i].lock().expect("slot lock") = Some(res);
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            cells[i] = slot.into_inner().expect("slot lock");
        }
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (i, cell) in cells.into_iter().enumerate() {
        let mut cell = cell.expect("every prompt evaluated")?;
        cell.prompt_index = i;
        out.push(cell);
    }
    Ok(out)
}

pub fn cmd_ablate(run: &RunConfig) -> Result<(), CliError> {
    let out_dir = PathBuf::from(run.require_str("out")?);
    let (model, model_path) = crate::load_model(run)?;

    // prompt set: an explicit TSV file, or the built-in task set
    let per_domain = run.get("task_prompts", 2usize)?;
    let prefix = run.get("prefix_samples", 8usize)?;
    let seed = run.get("seed", 0u64)?;
    let (prompts, prompt_path): (Vec<(String, String)>, Option<PathBuf>) =
        if let Some(f) = run.get_str("prompt_file") {
            let path = PathBuf::from(f);
            let text = fs::read_to_string(&path).map_err(|e| CliError {
                kind: ErrorKind::Io,
                message: format!("{}: {e}", path.display()),
            })?;
            (prompt_set_from_tsv(&text)?, Some(path))
        } else {
            (crate::builtin_prompt_set(per_domain, prefix, seed)?, None)
        };

    let base = run.session_config()?;
    let mut run = run.clone();
    crate::echo_session(&mut run.kv, &base);
    if prompt_path.is_none() {
        run.kv.set("task_prompts", per_domain);
        run.kv.set("prefix_samples", prefix);
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("model", &model_path)];
    if let Some(p) = prompt_path.as_deref() {
        inputs.push(("prompt_file", p));
    }
    crate::write_run_manifest(&out_dir, "ablate", &run, &inputs)?;
    let strategies = [
        Strategy::Hard,
        Strategy::Soft,
        Strategy::Random,
        Strategy::Reverse,
        Strategy::LastK,
        Strategy::All,
        Strategy::None,
    ];

    let mut rows: Vec<AblationRow> = Vec::new();
    let mut baseline_losses: Option<Vec<f64>> = None;
    // the none row is strategy-independent; compute it first for win rates
    for &continuous in &[true, false] {
        if baseline_losses.is_some() {
            break;
        }
        let mut session = base.clone();
        session.strategy = Strategy::None;
        if !continuous {
            session.regen_interval = session.max_new_tokens.max(1);
        }
        let cells = eval_combo(&model, &prompts, &session)?;
        baseline_losses = Some(cells.iter().map(|c| c.loss).collect());
    }
    let baseline_losses = baseline_losses.expect("baseline computed");

    for &strategy in &strategies {
        for &continuous in &[true, false] {
            let mut session = base.clone();
            session.strategy = strategy;
            if !continuous {
                session.regen_interval = session.max_new_tokens.max(1);
            }
            let cells = eval_combo(&model, &prompts, &session)?;
            let n = cells.len() as f64;
            let mean_loss = cells.iter().map(|c| c.loss).sum::<f64>() / n;
            let wins = cells
                .iter()
                .zip(&baseline_losses)
                .filter(|(c, &b)| c.loss < b)
                .count();
            let total_phases = cells.iter().map(|c| c.phases).sum();
            rows.push(AblationRow {
                strategy: strategy.label().to_string(),
                continuous,
                prompts: cells.len(),
                mean_loss,
                win_rate: wins as f64 / n,
                total_phases,
                cells,
            });
        }
    }

    let mut csv = String::from("strategy,continuous,prompts,mean_loss,win_rate,total_phases\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.strategy,
            if row.continuous { "on" } else { "off" },
            row.prompts,
            row.mean_loss,
            row.win_rate,
            row.total_phases
        ));
    }
    fs::write(out_dir.join("ablation.csv"), &csv)?;
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{csv}");
    Ok(())
}
