//! Test-time router adaptation.
//!
//! Routing is steered by per-layer additive logit vectors ("deltas"),
//! initialized to zero and optimized on the current context with Adam to
//! minimize next-token cross-entropy. Which layers get updated is decided
//! per optimization phase from router confidence: the mean negative log
//! probability of the selected top-k experts, aggregated over tokens.

pub mod session;

pub use session::{run_session, SessionConfig, SessionEvent, SessionLog, SessionOutcome};

use crate::model::{LayerRoute, ModelError, MoEModel, RouterTrace};
use crate::tape::{Tape, TapeError};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub enum RerouteError {
    Model(ModelError),
    Tensor(TensorError),
    Tape(TapeError),
    Config(String),
    /// Context has fewer than two tokens; there is no next-token pair.
    DegenerateContext { len: usize },
    /// Confidence aggregation over an empty token set.
    EmptyConfidence,
    NonFiniteLoss { step: usize },
    NonFiniteGradient { layer: usize },
}

impl fmt::Display for RerouteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::Tensor(e) => write!(f, "tensor error: {e}"),
            Self::Tape(e) => write!(f, "tape error: {e}"),
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::DegenerateContext { len } => {
                write!(f, "context of {len} token(s) has no next-token pair to optimize")
            }
            Self::EmptyConfidence => write!(f, "confidence aggregation over empty context"),
            Self::NonFiniteLoss { step } => write!(f, "non-finite loss at optimization step {step}"),
            Self::NonFiniteGradient { layer } => write!(f, "non-finite gradient for layer {layer}"),
        }
    }
}

impl std::error::Error for RerouteError {}

impl From<ModelError> for RerouteError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}
impl From<TensorError> for RerouteError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}
impl From<TapeError> for RerouteError {
    fn from(e: TapeError) -> Self {
        Self::Tape(e)
    }
}

// ---------------------------------------------------------------------------
// DeltaSet
// ---------------------------------------------------------------------------

/// Per-parameter Adam accumulators for one layer's delta vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// The adaptation parameters: one additive logit vector per MoE layer,
/// plus per-layer optimizer state. Model weights never change; these are
/// the only parameters touched at test time.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    deltas: Vec<Tensor>,
    opt: Vec<AdamState>,
}

impl DeltaSet {
    /// Fresh all-zero deltas with fresh optimizer state.
    pub fn zeros(n_layers: usize, n_experts: usize) -> Self {
        Self {
            deltas: (0..n_layers).map(|_| Tensor::zeros(vec![n_experts])).collect(),
            opt: (0..n_layers).map(|_| AdamState::zeros(n_experts)).collect(),
        }
    }

    pub fn for_model(model: &MoEModel) -> Self {
        Self::zeros(model.config().n_layers, model.config().n_experts)
    }

    pub fn n_layers(&self) -> usize {
        self.deltas.len()
    }

    /// Delta tensors in layer order, for feeding the forward pass.
    pub fn tensors(&self) -> &[Tensor] {
        &self.deltas
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.deltas[l]
    }

    pub fn opt_state(&self, l: usize) -> &AdamState {
        &self.opt[l]
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.iter().all(|d| d.data().iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.deltas.iter().all(|d| d.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Confidence
// ---------------------------------------------------------------------------

/// Router confidence of one token at one layer: the negative mean log
/// probability of its selected top-k experts. As written, a *less*
/// concentrated selection yields a *larger* value.
pub fn token_confidence(route: &LayerRoute) -> f64 {
    let k = route.top_probs.len() as f64;
    -route.top_probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).sum::<f64>() / k
}

/// Token-by-layer confidence matrix from a forward trace.
pub fn confidence_matrix(trace: &RouterTrace) -> Vec<Vec<f64>> {
    trace
        .tokens
        .iter()
        .map(|tok| tok.layers.iter().map(token_confidence).collect())
        .collect()
}

/// Per-layer confidence: the arithmetic mean over all tokens observed.
pub fn layer_confidence(token_conf: &[Vec<f64>]) -> Result<Vec<f64>, RerouteError> {
    let rows = token_conf.len();
    if rows == 0 {
        return Err(RerouteError::EmptyConfidence);
    }
    let layers = token_conf[0].len();
    let mut out = vec![0.0; layers];
    for row in token_conf {
        for (o, &c) in out.iter_mut().zip(row) {
            *o += c;
        }
    }
    for o in out.iter_mut() {
        *o /= rows as f64;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layer selection
// ---------------------------------------------------------------------------

/// Which layers receive delta updates during an optimization phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Top `ceil(r*L)` layers by confidence.
    Hard,
    /// Every layer, with the gradient scaled by normalized confidence.
    Soft,
    /// Seeded uniform subset of `ceil(r*L)` layers.
    Random,
    /// Bottom `ceil(r*L)` layers by confidence.
    Reverse,
    /// The last `ceil(r*L)` layers.
    LastK,
    /// Every layer, full strength.
    All,
    /// No adaptation at all (baseline).
    None,
}

impl Strategy {
    pub const ALL_LABELS: [&'static str; 7] =
        ["hard", "soft", "random", "reverse", "last_k", "all", "none"];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
            Self::Random => "random",
            Self::Reverse => "reverse",
            Self::LastK => "last_k",
            Self::All => "all",
            Self::None => "none",
        }
    }
}

impl FromStr for Strategy {
    type Err = RerouteError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "random" => Ok(Self::Random),
            "reverse" => Ok(Self::Reverse),
            "last_k" => Ok(Self::LastK),
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            other => Err(RerouteError::Config(format!(
                "unknown strategy '{other}' (expected one of {:?})",
                Self::ALL_LABELS
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Direction of the confidence ranking used by the hard-family strategies.
///
/// The confidence formula assigns larger values to less concentrated top-k
/// probabilities; `AsWritten` ranks by that value directly, `Negated` flips
/// the ranking. Soft weights always use the non-negative values as written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSign {
    AsWritten,
    Negated,
}

impl FromStr for ConfidenceSign {
    type Err = RerouteError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "negated" => Ok(Self::Negated),
            other => Err(RerouteError::Config(format!(
                "unknown confidence sign '{other}' (expected as_written or negated)"
            ))),
        }
    }
}

/// One phase's confidence measurements and the resulting layer choice.
#[derive(Debug, Clone)]
pub struct ConfidenceProfile {
    /// `[tokens][layers]` confidence values.
    pub token_conf: Vec<Vec<f64>>,
    /// Per-layer mean over tokens.
    pub layer_conf: Vec<f64>,
    pub strategy: Strategy,
    /// Chosen layer set, ascending; `None` for the soft strategy.
    pub selected: Option<Vec<usize>>,
    /// Normalized per-layer weights; `Some` only for the soft strategy.
    pub soft_weights: Option<Vec<f64>>,
}

impl ConfidenceProfile {
    /// Build a profile from a forward trace.
    pub fn from_trace(
        trace: &RouterTrace,
        strategy: Strategy,
        ratio: f64,
        sign: ConfidenceSign,
        rng: &mut impl Rng,
    ) -> Result<Self, RerouteError> {
        let token_conf = confidence_matrix(trace);
        let layer_conf = layer_confidence(&token_conf)?;
        let (selected, soft_weights) = select_layers(&layer_conf, strategy, ratio, sign, rng)?;
        Ok(Self { token_conf, layer_conf, strategy, selected, soft_weights })
    }
}

fn ranked_by_conf(layer_conf: &[f64], sign: ConfidenceSign, ascending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..layer_conf.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = match sign {
            ConfidenceSign::AsWritten => (layer_conf[a], layer_conf[b]),
            ConfidenceSign::Negated => (-layer_conf[a], -layer_conf[b]),
        };
        let ord = if ascending {
            ca.partial_cmp(&cb).expect("finite confidence")
        } else {
            cb.partial_cmp(&ca).expect("finite confidence")
        };
        ord.then(a.cmp(&b))
    });
    idx
}

/// A resolved layer choice: the selected set (hard family) or the
/// per-layer soft weights.
pub type LayerChoice = (Option<Vec<usize>>, Option<Vec<f64>>);

/// Resolve a strategy into a layer set (hard family) or soft weights.
///
/// Hard-family selections contain `ceil(ratio * L)` layers; ties go to the
/// lower layer index. Returned sets are sorted ascending.
pub fn select_layers(
    layer_conf: &[f64],
    strategy: Strategy,
    ratio: f64,
    sign: ConfidenceSign,
    rng: &mut impl Rng,
) -> Result<LayerChoice, RerouteError> {
    let layers = layer_conf.len();
    if layers == 0 {
        return Err(RerouteError::EmptyConfidence);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(RerouteError::Config(format!("ratio must be in (0,1], got {ratio}")));
    }
    let count = ((ratio * layers as f64).ceil() as usize).clamp(1, layers);
    let pick = match strategy {
        Strategy::Hard => {
            let mut s: Vec<usize> = ranked_by_conf(layer_conf, sign, false)[..count].to_vec();
            s.sort_unstable();
            Some(s)
        }
        Strategy::Reverse => {
            let mut s: Vec<usize> = ranked_by_conf(layer_conf, sign, true)[..count].to_vec();
            s.sort_unstable();
            Some(s)
        }
        Strategy::Random => {
            // partial Fisher-Yates over the layer indices
            let mut idx: Vec<usize> = (0..layers).collect();
            for i in 0..count {
                let j = rng.gen_range(i..layers);
                idx.swap(i, j);
            }
            let mut s = idx[..count].to_vec();
            s.sort_unstable();
            Some(s)
        }
        Strategy::LastK => Some((layers - count..layers).collect()),
        Strategy::All => Some((0..layers).collect()),
        Strategy::None => Some(Vec::new()),
        Strategy::Soft => None,
    };
    let weights = match strategy {
        Strategy::Soft => {
            let total: f64 = layer_conf.iter().sum();
            if total > 0.0 {
                Some(layer_conf.iter().map(|&c| c / total).collect())
            } else {
                // degenerate: all top-k probabilities were exactly 1
                Some(vec![1.0 / layers as f64; layers])
            }
        }
        _ => None,
    };
    Ok((pick, weights))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

/// One Adam update with bias correction.
///
/// `lr_scale` multiplies the incoming gradient before it enters the
/// optimizer (soft weighting feeds `w_l * grad`); coupled L2 weight decay
/// is then added to that gradient. Moments decay and the step counter
/// advances even at `lr_scale = 0`.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
    lr_scale: f64,
) -> Result<(), RerouteError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RerouteError::NonFiniteGradient { layer: usize::MAX });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..param.len() {
        let g = lr_scale * grad[i] + hp.weight_decay * param[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Delta optimization (one phase)
// ---------------------------------------------------------------------------

/// Run `n` optimization steps of the context cross-entropy with respect to
/// the deltas, updating layers according to the profile.
///
/// Returns the loss trajectory: the loss before each step plus one final
/// measurement after the last update (`n + 1` values). With `n = 0` the
/// deltas are untouched and no forward pass runs.
pub fn optimize_deltas(
    model: &MoEModel,
    context: &[u32],
    deltas: &mut DeltaSet,
    profile: &ConfidenceProfile,
    steps: usize,
    hp: &AdamParams,
) -> Result<Vec<f64>, RerouteError> {
    if context.len() < 2 {
        return Err(RerouteError::DegenerateContext { len: context.len() });
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let targets = &context[1..];
    let pred_rows: Vec<usize> = (0..context.len() - 1).collect();
    let mut losses = Vec::with_capacity(steps + 1);

    for step in 0..steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let delta_ids: Vec<_> = deltas.deltas.iter().map(|d| tape.var(d.clone())).collect();
        let pass = model.forward_bound(&mut tape, &bound, context, Some(&delta_ids), false)?;
        let pred = tape.gather_rows(pass.logits, &pred_rows)?;
        let loss = tape.cross_entropy(pred, targets)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(RerouteError::NonFiniteLoss { step });
        }
        losses.push(loss_val);

        let grads = tape.backward(loss)?;
        match profile.strategy {
            Strategy::Soft => {
                let weights = profile
                    .soft_weights
                    .as_ref()
                    .ok_or_else(|| RerouteError::Config("soft strategy without weights".into()))?;
                for (l, &w) in weights.iter().enumerate() {
                    let g = grads.get(delta_ids[l])?;
                    adam_step(deltas.deltas[l].data_mut(), g.data(), &mut deltas.opt[l], hp, w)
                        .map_err(|_| RerouteError::NonFiniteGradient { layer: l })?;
                }
            }
            _ => {
                let selected = profile
                    .selected
                    .as_ref()
                    .ok_or_else(|| RerouteError::Config("hard strategy without a layer set".into()))?;
                for &l in selected {
                    let g = grads.get(delta_ids[l])?;
                    adam_step(deltas.deltas[l].data_mut(), g.data(), &mut deltas.opt[l], hp, 1.0)
                        .map_err(|_| RerouteError::NonFiniteGradient { layer: l })?;
                }
            }
        }
        if !deltas.is_finite() {
            return Err(RerouteError::NonFiniteLoss { step });
        }
    }
    losses.push(model.context_loss(context, Some(deltas.tensors()))?);
    Ok(losses)
}
