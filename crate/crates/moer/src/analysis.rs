//! Routing-behavior analytics: pathway strings compared by Levenshtein
//! distance, routing-entropy trajectories, expert-utilization shifts, and
//! a coarse analytic operation counter.

use crate::model::{ModelConfig, RouterTrace};
use crate::reroute::session::{SessionEvent, SessionLog};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    /// Trace does not cover all layers for the requested token.
    IncompleteTrace { token: usize, layers: usize, expected: usize },
    /// Probability vector does not sum to one.
    NotNormalized { sum: f64 },
    NegativeProbability { value: f64 },
    DimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    TokenOutOfRange { token: usize, tokens: usize },
    /// Session log is missing a required record.
    MalformedLog(String),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::IncompleteTrace { token, layers, expected } => {
                write!(f, "trace for token {token} covers {layers} layers, expected {expected}")
            }
            Self::NotNormalized { sum } => write!(f, "probabilities sum to {sum}, expected 1"),
            Self::NegativeProbability { value } => write!(f, "negative probability {value}"),
            Self::DimMismatch { lhs, rhs } => write!(f, "shape mismatch: {lhs:?} vs {rhs:?}"),
            Self::TokenOutOfRange { token, tokens } => {
                write!(f, "token index {token} out of range ({tokens} traced)")
            }
            Self::MalformedLog(msg) => write!(f, "malformed session log: {msg}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

// ---------------------------------------------------------------------------
// Pathways
// ---------------------------------------------------------------------------

/// One token's expert pathway: per layer, the selected expert indices in
/// descending router probability joined by commas; layers joined by
/// hyphens (e.g. `"3,1-5,2"`). Shared experts are excluded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathwayString(pub String);

impl fmt::Display for PathwayString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Build the pathway string for one traced token.
pub fn pathway_string(trace: &RouterTrace, token: usize) -> Result<PathwayString, AnalysisError> {
    let tok = trace
        .tokens
        .get(token)
        .ok_or(AnalysisError::TokenOutOfRange { token, tokens: trace.tokens.len() })?;
    if tok.layers.len() != trace.n_layers {
        return Err(AnalysisError::IncompleteTrace {
            token,
            layers: tok.layers.len(),
            expected: trace.n_layers,
        });
    }
    Ok(pathway_from_selected(tok.layers.iter().map(|r| r.selected.as_slice())))
}

/// Pathway string from per-layer selected-expert lists (already ordered by
/// descending probability).
pub fn pathway_from_selected<'a>(layers: impl Iterator<Item = &'a [usize]>) -> PathwayString {
    let segments: Vec<String> = layers
        .map(|sel| sel.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","))
        .collect();
    PathwayString(segments.join("-"))
}

/// Character-level Levenshtein distance between two pathway strings,
/// computed with the standard two-row dynamic program.
///
/// Distances are over characters of the rendered string, so multi-digit
/// expert indices weigh more than single-digit ones.
pub fn pathway_edit_distance(a: &PathwayString, b: &PathwayString) -> usize {
    levenshtein(&a.0, &b.0)
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

/// Shannon entropy of an expert-selection distribution, with `0 ln 0 = 0`.
/// The input must be a probability vector (non-negative, sums to 1 within
/// 1e-9).
pub fn routing_entropy(probs: &[f64]) -> Result<f64, AnalysisError> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AnalysisError::NotNormalized { sum });
    }
    if let Some(&bad) = probs.iter().find(|&&p| p < 0.0) {
        return Err(AnalysisError::NegativeProbability { value: bad });
    }
    Ok(probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum())
}

/// Mean per-token routing entropy (averaged over layers) grouped into
/// fixed-size token blocks, from a session log's token events.
pub fn entropy_blocks(log: &SessionLog, block: usize) -> Vec<f64> {
    let per_token: Vec<f64> = log
        .events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Token { entropy_per_layer, .. } => {
                Some(entropy_per_layer.iter().sum::<f64>() / entropy_per_layer.len() as f64)
            }
            _ => None,
        })
        .collect();
    per_token
        .chunks(block.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Entropy trajectories are reported averaged over 16-token blocks.
pub const ENTROPY_BLOCK: usize = 16;

// ---------------------------------------------------------------------------
// Expert utilization
// ---------------------------------------------------------------------------

/// Activation occurrences per layer and expert over a set of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationMatrix {
    pub layers: usize,
    pub experts: usize,
    /// Row-major `[layers][experts]` activation counts.
    pub counts: Vec<f64>,
    /// Number of tokens observed.
    pub tokens: usize,
    /// Selections per token (k).
    pub k: usize,
}

impl UtilizationMatrix {
    pub fn from_trace(trace: &RouterTrace) -> Self {
        let mut m = Self {
            layers: trace.n_layers,
            experts: trace.n_experts,
            counts: vec![0.0; trace.n_layers * trace.n_experts],
            tokens: 0,
            k: trace.k,
        };
        for tok in &trace.tokens {
            m.tokens += 1;
            for (l, route) in tok.layers.iter().enumerate() {
                for &e in &route.selected {
                    m.counts[l * m.experts + e] += 1.0;
                }
            }
        }
        m
    }

    /// Accumulate from the selected-expert lists in a session log.
    pub fn from_log(log: &SessionLog, layers: usize, experts: usize, k: usize) -> Self {
        let mut m = Self { layers, experts, counts: vec![0.0; layers * experts], tokens: 0, k };
        for e in &log.events {
            if let SessionEvent::Token { selected, .. } = e {
                m.tokens += 1;
                for (l, sel) in selected.iter().enumerate() {
                    for &ex in sel {
                        m.counts[l * experts + ex] += 1.0;
                    }
                }
            }
        }
        m
    }

    /// Per-token activation frequencies; each row sums to k.
    pub fn frequencies(&self) -> Vec<f64> {
        if self.tokens == 0 {
            return self.counts.clone();
        }
        self.counts.iter().map(|&c| c / self.tokens as f64).collect()
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.counts[layer * self.experts..(layer + 1) * self.experts]
    }
}

/// Element-wise frequency shift `after - before`, normalized so the largest
/// absolute entry is 1 (an all-zero shift stays all-zero).
pub fn utilization_shift(
    before: &UtilizationMatrix,
    after: &UtilizationMatrix,
) -> Result<Vec<f64>, AnalysisError> {
    if before.layers != after.layers || before.experts != after.experts {
        return Err(AnalysisError::DimMismatch {
            lhs: vec![before.layers, before.experts],
            rhs: vec![after.layers, after.experts],
        });
    }
    let fb = before.frequencies();
    let fa = after.frequencies();
    let mut diff: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
    let max = diff.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max > 0.0 {
        for v in diff.iter_mut() {
            *v /= max;
        }
    }
    Ok(diff)
}

// ---------------------------------------------------------------------------
// Operation counting
// ---------------------------------------------------------------------------

/// Coarse analytic floating-point operation model, counting multiplies and
/// adds of the dense kernels. Per token at (1-based) context position `t`:
///
/// * attention projections: `8 d^2` per layer
/// * attention scores and mixing: `4 t d` per layer
/// * router logits: `2 N d` per layer
/// * active experts: `(k + n_shared) * 4 d d_ff` per layer
/// * norms and residuals: `8 d` per layer
/// * output head: `2 d V`
///
/// A full uncached forward over `T` tokens sums the per-token cost; a
/// backward pass is counted as twice a forward. A generation step at
/// context length `c` costs one full forward over `c` tokens (the
/// implementation recomputes the whole context), and one optimization step
/// costs forward plus backward over the current context; each phase adds
/// one plain forward for confidence measurement.
pub fn ops_per_token(cfg: &ModelConfig, position: usize) -> f64 {
    let d = cfg.d_model as f64;
    let per_layer = 8.0 * d * d
        + 4.0 * position as f64 * d
        + 2.0 * cfg.n_experts as f64 * d
        + (cfg.k_active + cfg.n_shared) as f64 * 4.0 * d * cfg.d_ff as f64
        + 8.0 * d;
    cfg.n_layers as f64 * per_layer + 2.0 * d * cfg.vocab_size as f64
}

/// Operations of one full forward pass over `t_len` tokens.
pub fn ops_forward(cfg: &ModelConfig, t_len: usize) -> f64 {
    (1..=t_len).map(|t| ops_per_token(cfg, t)).sum()
}

/// Total operation estimate for a logged session.
///
/// Reconstructs the work from the event stream: every generated token is a
/// forward over the context at its moment, and every phase contributes one
/// confidence forward plus `opt_steps` forward+backward passes over the
/// phase's context length.
pub fn op_count_estimate(cfg: &ModelConfig, log: &SessionLog) -> Result<f64, AnalysisError> {
    let mut prompt_len = None;
    let mut opt_steps = 0usize;
    for e in &log.events {
        if let SessionEvent::SessionStart { prompt_len: p, opt_steps: n, .. } = e {
            prompt_len = Some(*p);
            opt_steps = *n;
        }
    }
    let prompt_len = prompt_len.ok_or_else(|| AnalysisError::MalformedLog("no session_start".into()))?;

    let mut total = 0.0;
    let mut generated = 0usize;
    for e in &log.events {
        match e {
            SessionEvent::Token { .. } => {
                total += ops_forward(cfg, prompt_len + generated);
                generated += 1;
            }
            SessionEvent::PhaseStart { context_len, .. } => {
                // one confidence forward + n optimization steps (fwd + 2x fwd backward)
                total += ops_forward(cfg, *context_len) * (1.0 + 3.0 * opt_steps as f64);
            }
            _ => {}
        }
    }
    Ok(total)
}

/// Baseline generation cost for the same prompt and token count: no phases.
pub fn op_count_baseline(cfg: &ModelConfig, prompt_len: usize, generated: usize) -> f64 {
    (0..generated).map(|g| ops_forward(cfg, prompt_len + g)).sum()
}

// ---------------------------------------------------------------------------
// Layer-restricted pathway comparison
// ---------------------------------------------------------------------------

/// Mean per-layer edit distance between two session logs, comparing the
/// single-layer pathway strings of tokens at matched positions. The result
/// has one entry per layer, averaged over the common token count.
pub fn layerwise_edit_distance(
    a: &SessionLog,
    b: &SessionLog,
    layers: usize,
) -> Result<Vec<f64>, AnalysisError> {
    let sel = |log: &SessionLog| -> Vec<Vec<Vec<usize>>> {
        log.events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Token { selected, .. } => Some(selected.clone()),
                _ => None,
            })
            .collect()
    };
    let sa = sel(a);
    let sb = sel(b);
    let n = sa.len().min(sb.len());
    if n == 0 {
        return Err(AnalysisError::MalformedLog("no token events to compare".into()));
    }
    let mut out = vec![0.0; layers];
    for i in 0..n {
        if sa[i].len() != layers || sb[i].len() != layers {
            return Err(AnalysisError::MalformedLog(format!(
                "token {i} has {} / {} layer selections, expected {layers}",
                sa[i].len(),
                sb[i].len()
            )));
        }
        for l in 0..layers {
            let pa = pathway_from_selected(std::iter::once(sa[i][l].as_slice()));
            let pb = pathway_from_selected(std::iter::once(sb[i][l].as_slice()));
            out[l] += pathway_edit_distance(&pa, &pb) as f64;
        }
    }
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plot-ready exports
// ---------------------------------------------------------------------------

/// CSV of a `[layers][experts]` matrix: header `layer,e0,...,e{N-1}`.
pub fn matrix_csv(values: &[f64], layers: usize, experts: usize) -> String {
    let mut out = String::from("layer");
    for e in 0..experts {
        out.push_str(&format!(",e{e}"));
    }
    out.push('\n');
    for l in 0..layers {
        out.push_str(&l.to_string());
        for e in 0..experts {
            out.push_str(&format!(",{}", values[l * experts + e]));
        }
        out.push('\n');
    }
    out
}

/// CSV of per-layer values: header `layer,value`.
pub fn layer_csv(values: &[f64]) -> String {
    let mut out = String::from("layer,value\n");
    for (l, v) in values.iter().enumerate() {
        out.push_str(&format!("{l},{v}\n"));
    }
    out
}

/// JSONL entropy trajectory: one record per block.
pub fn entropy_jsonl(label: &str, blocks: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in blocks.iter().enumerate() {
        out.push_str(&format!(
            "{}\n",
            serde_json::json!({ "session": label, "block": i, "entropy": v })
        ));
    }
    out
}
