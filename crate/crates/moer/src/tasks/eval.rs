//! Continuation evaluation under aligned and shifted few-shot prefixes.
//!
//! For each target-domain prompt the suite measures teacher-forced
//! continuation loss twice — without deltas (baseline) and after one
//! optimization phase on the context (rerouted) — under two prefix
//! conditions: examples from the same domain (aligned, i.e. domain-pure
//! context) and from a different domain (shifted).

use super::{gen_sample, tokenize, DomainSpec, Sample, TaskError};
use crate::model::MoEModel;
use crate::reroute::{optimize_deltas, ConfidenceProfile, DeltaSet, SessionConfig, Strategy};
use crate::tensor::{self, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CONDITION_ALIGNED: &str = "aligned";
pub const CONDITION_SHIFTED: &str = "shifted";

/// Suite settings. Session settings control the rerouted measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompts_per_domain: usize,
    /// Full samples prepended as the few-shot prefix.
    pub prefix_samples: usize,
    pub seed: u64,
    pub session: SessionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prompts_per_domain: 10, prefix_samples: 8, seed: 0, session: SessionConfig::default() }
    }
}

/// Domain specs used for evaluation prompts: slightly longer payloads than
/// the training mixture, so continuations carry enough tokens to measure.
pub fn eval_specs() -> Vec<super::DomainSpec> {
    super::default_specs()
        .into_iter()
        .map(|mut s| {
            s.min_payload = 5;
            s.max_payload = 9;
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: String,
    pub condition: String,
    pub prompt_index: usize,
    pub context_len: usize,
    pub baseline_loss: f64,
    pub rerouted_loss: f64,
    pub baseline_token_acc: f64,
    pub rerouted_token_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub condition: String,
    pub prompts: usize,
    pub mean_baseline_loss: f64,
    pub mean_rerouted_loss: f64,
    /// Mean of (rerouted - baseline); negative means rerouting helped.
    pub mean_delta: f64,
    /// Fraction of prompts where rerouted loss is strictly lower.
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<EvalAggregate>,
}

impl EvalReport {
    /// Recompute aggregates from the per-prompt rows.
    pub fn aggregate(rows: &[EvalRow]) -> Vec<EvalAggregate> {
        let mut out = Vec::new();
        for condition in [CONDITION_ALIGNED, CONDITION_SHIFTED] {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.condition == condition).collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            let mean_b = sel.iter().map(|r| r.baseline_loss).sum::<f64>() / n;
            let mean_r = sel.iter().map(|r| r.rerouted_loss).sum::<f64>() / n;
            let wins = sel.iter().filter(|r| r.rerouted_loss < r.baseline_loss).count();
            out.push(EvalAggregate {
                condition: condition.to_string(),
                prompts: sel.len(),
                mean_baseline_loss: mean_b,
                mean_rerouted_loss: mean_r,
                mean_delta: mean_r - mean_b,
                win_rate: wins as f64 / n,
            });
        }
        out
    }

    pub fn condition(&self, name: &str) -> Option<&EvalAggregate> {
        self.aggregates.iter().find(|a| a.condition == name)
    }
}

/// Mean per-token cross-entropy (and argmax accuracy) of a continuation
/// given a context, teacher-forced.
pub fn continuation_loss(
    model: &MoEModel,
    context: &[u32],
    continuation: &[u32],
    deltas: Option<&[Tensor]>,
) -> Result<(f64, f64), TaskError> {
    if context.is_empty() || continuation.is_empty() {
        return Err(TaskError::Config("empty context or continuation".into()));
    }
    let mut full = context.to_vec();
    full.extend_from_slice(continuation);
    let (logits, _) = model.forward(&full, deltas)?;
    let v = logits.cols();
    let start = context.len() - 1;
    let rows = continuation.len();
    let pred = Tensor::new(
        vec![rows, v],
        logits.data()[start * v..(start + rows) * v].to_vec(),
    )
    .map_err(|e| TaskError::Model(e.into()))?;
    let loss = tensor::cross_entropy(&pred, continuation)
        .map_err(|e| TaskError::Model(e.into()))?
        .item()
        .map_err(|e| TaskError::Model(e.into()))?
        / rows as f64;
    let mut hits = 0usize;
    for (r, &want) in continuation.iter().enumerate() {
        let row = pred.row(r);
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        if best as u32 == want {
            hits += 1;
        }
    }
    Ok((loss, hits as f64 / rows as f64))
}

/// Run one optimization phase on the context and return the adapted deltas.
fn adapt_on_context(
    model: &MoEModel,
    context: &[u32],
    session: &SessionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DeltaSet, TaskError> {
    let mut deltas = DeltaSet::for_model(model);
    if session.strategy == Strategy::None || session.opt_steps == 0 {
        return Ok(deltas);
    }
    let (_, trace) = model.forward(context, Some(deltas.tensors()))?;
    let profile = ConfidenceProfile::from_trace(
        &trace,
        session.strategy,
        session.ratio,
        session.confidence_sign,
        rng,
    )?;
    optimize_deltas(model, context, &mut deltas, &profile, session.opt_steps, &session.adam_params())?;
    Ok(deltas)
}

/// The aligned/shifted continuation suite over every domain in `specs`.
///
/// The shifted prefix for domain `i` uses samples from domain `i + 1`
/// (cyclically) in the spec list.
pub fn eval_shift_suite(
    model: &MoEModel,
    specs: &[DomainSpec],
    config: &EvalConfig,
) -> Result<EvalReport, TaskError> {
    if specs.is_empty() {
        return Err(TaskError::Config("no domain specs".into()));
    }
    config.session.validate()?;
    let mut rows = Vec::new();
    let max_seq = model.config().max_seq;

    for (d, spec) in specs.iter().enumerate() {
        let shifted_spec = &specs[(d + 1) % specs.len()];
        for i in 0..config.prompts_per_domain {
            // independent, reproducible stream per (domain, prompt)
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (d as u64).wrapping_mul(0x9E37_79B9) ^ ((i as u64) << 32),
            );
            let target = gen_sample(spec, &mut rng);
            let aligned_prefix = prefix_text(spec, config.prefix_samples, &mut rng);
            let shifted_prefix = prefix_text(shifted_spec, config.prefix_samples, &mut rng);

            for (condition, prefix) in
                [(CONDITION_ALIGNED, &aligned_prefix), (CONDITION_SHIFTED, &shifted_prefix)]
            {
                let context_text = format!("{prefix}{}", target.prompt());
                let context = tokenize(&context_text)?;
                let continuation = tokenize(target.continuation())?;
                if context.len() + continuation.len() > max_seq {
                    return Err(TaskError::Config(format!(
                        "evaluation context of {} tokens exceeds max_seq {max_seq}",
                        context.len() + continuation.len()
                    )));
                }
                let (baseline_loss, baseline_acc) =
                    continuation_loss(model, &context, &continuation, None)?;
                let deltas = adapt_on_context(model, &context, &config.session, &mut rng)?;
                let (rerouted_loss, rerouted_acc) =
                    continuation_loss(model, &context, &continuation, Some(deltas.tensors()))?;
                rows.push(EvalRow {
                    domain: spec.domain.label().to_string(),
                    condition: condition.to_string(),
                    prompt_index: i,
                    context_len: context.len(),
                    baseline_loss,
                    rerouted_loss,
                    baseline_token_acc: baseline_acc,
                    rerouted_token_acc: rerouted_acc,
                });
            }
        }
    }
    let aggregates = EvalReport::aggregate(&rows);
    Ok(EvalReport { rows, aggregates })
}

fn prefix_text(spec: &DomainSpec, count: usize, rng: &mut ChaCha8Rng) -> String {
    (0..count).map(|_| gen_sample(spec, rng).text).collect()
}

/// Build a domain-pure prompt set: few-shot prefix plus target prompt per
/// sample, with the gold continuation. Used by generation-based runs.
pub fn prompt_set(
    specs: &[DomainSpec],
    per_domain: usize,
    prefix_samples: usize,
    seed: u64,
) -> Result<Vec<(Sample, String)>, TaskError> {
    if specs.is_empty() {
        return Err(TaskError::Config("no domain specs".into()));
    }
    let mut out = Vec::new();
    for (d, spec) in specs.iter().enumerate() {
        for i in 0..per_domain {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (d as u64).wrapping_mul(0xC2B2_AE35) ^ ((i as u64) << 24),
            );
            let target = gen_sample(spec, &mut rng);
            let prefix = prefix_text(spec, prefix_samples, &mut rng);
            let context = format!("{prefix}{}", target.prompt());
            out.push((target, context));
        }
    }
    Ok(out)
}
