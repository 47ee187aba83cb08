//! The two-phase generation session: optimize router deltas on the current
//! context, generate with frozen deltas, re-optimize on the extended
//! context every `regen_interval` tokens, until end-of-sequence or the
//! token budget runs out.
//!
//! A session is strictly sequential and owns its deltas, RNG, and log;
//! the model is shared read-only. Optimizer moments persist across phases.

use super::{
    optimize_deltas, AdamParams, ConfidenceProfile, ConfidenceSign, DeltaSet, RerouteError,
    Strategy,
};
use crate::model::{sample_token, MoEModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Session hyperparameters. Defaults: 5 optimization steps at lr 0.05
/// (weight decay 1e-8, epsilon 1e-5) with soft layer weighting, and a
/// re-optimization interval sized for short toy generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Optimization steps per phase (`n`).
    pub opt_steps: usize,
    /// Re-optimize after this many generated tokens (`m`).
    pub regen_interval: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub strategy: Strategy,
    /// Fraction of layers the hard-family strategies update.
    pub ratio: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub rng_seed: u64,
    pub eos_token: Option<u32>,
    pub confidence_sign: ConfidenceSign,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            opt_steps: 5,
            regen_interval: 32,
            lr: 0.05,
            weight_decay: 1e-8,
            epsilon: 1e-5,
            strategy: Strategy::Soft,
            ratio: 0.5,
            max_new_tokens: 64,
            temperature: 0.0,
            rng_seed: 0,
            eos_token: None,
            confidence_sign: ConfidenceSign::AsWritten,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), RerouteError> {
        if self.regen_interval == 0 {
            return Err(RerouteError::Config("regen_interval must be >= 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(RerouteError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(RerouteError::Config(format!("ratio must be in (0,1], got {}", self.ratio)));
        }
        if self.temperature < 0.0 {
            return Err(RerouteError::Config("temperature must be non-negative".into()));
        }
        if self.weight_decay < 0.0 || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RerouteError::Config("bad optimizer constants".into()));
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams { lr: self.lr, weight_decay: self.weight_decay, epsilon: self.epsilon }
    }
}

/// One record of the session event stream (serialized as JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionStart {
        prompt_len: usize,
        strategy: Strategy,
        opt_steps: usize,
        regen_interval: usize,
        temperature: f64,
        seed: u64,
    },
    PhaseStart {
        phase: usize,
        context_len: usize,
    },
    LayerSelection {
        phase: usize,
        layer_conf: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        selected: Option<Vec<usize>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        soft_weights: Option<Vec<f64>>,
    },
    OptStep {
        phase: usize,
        step: usize,
        loss: f64,
    },
    PhaseEnd {
        phase: usize,
        loss_initial: f64,
        loss_final: f64,
    },
    /// Phase-1 aborted; generation continues with the current deltas.
    Fallback {
        phase: usize,
        reason: String,
    },
    Token {
        /// 0-based index among generated tokens.
        index: usize,
        token: u32,
        /// Routing entropy per layer at the position that produced this token.
        entropy_per_layer: Vec<f64>,
        /// Selected experts per layer, descending probability.
        selected: Vec<Vec<usize>>,
    },
    SessionEnd {
        generated: usize,
        phases: usize,
    },
}

/// Event stream of one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub events: Vec<SessionEvent>,
}

impl SessionLog {
    pub fn push(&mut self, e: SessionEvent) {
        self.events.push(e);
    }

    pub fn phases(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, SessionEvent::PhaseStart { .. }))
            .count()
    }

    pub fn generated(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, SessionEvent::Token { .. })).count()
    }

    /// Serialize as line-delimited JSON, one event per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: SessionEvent = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            events.push(e);
        }
        Ok(Self { events })
    }
}

/// Result of one session: the generated tokens (prompt excluded), the
/// event log, and the final adaptation state.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub tokens: Vec<u32>,
    pub log: SessionLog,
    pub deltas: DeltaSet,
}

/// Run one full session: Phase 1 on the prompt, then steered generation
/// with periodic re-optimization. Returns the generated tokens (prompt
/// excluded) and the event log.
///
/// With `opt_steps = 0` or the `none` strategy, no optimization phase runs
/// and no deltas are applied: the output is exactly baseline generation
/// under the same seed.
pub fn run_session(
    model: &MoEModel,
    prompt: &[u32],
    config: &SessionConfig,
) -> Result<SessionOutcome, RerouteError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(RerouteError::Config("empty prompt".into()));
    }
    let cfg = model.config();
    let adapting = config.strategy != Strategy::None && config.opt_steps > 0;
    let hp = config.adam_params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut deltas = DeltaSet::for_model(model);
    let mut log = SessionLog::default();
    log.push(SessionEvent::SessionStart {
        prompt_len: prompt.len(),
        strategy: config.strategy,
        opt_steps: config.opt_steps,
        regen_interval: config.regen_interval,
        temperature: config.temperature,
        seed: config.rng_seed,
    });

    let mut context: Vec<u32> = prompt.to_vec();
    let mut phases = 0usize;

    let run_phase = |context: &[u32],
                         deltas: &mut DeltaSet,
                         rng: &mut ChaCha8Rng,
                         phases: &mut usize,
                         log: &mut SessionLog|
     -> Result<(), RerouteError> {
        *phases += 1;
        let phase = *phases;
        log.push(SessionEvent::PhaseStart { phase, context_len: context.len() });
        let outcome = (|| -> Result<Vec<f64>, RerouteError> {
            let (_, trace) = model.forward(context, Some(deltas.tensors()))?;
            let profile = ConfidenceProfile::from_trace(
                &trace,
                config.strategy,
                config.ratio,
                config.confidence_sign,
                rng,
            )?;
            log.push(SessionEvent::LayerSelection {
                phase,
                layer_conf: profile.layer_conf.clone(),
                selected: profile.selected.clone(),
                soft_weights: profile.soft_weights.clone(),
            });
            optimize_deltas(model, context, deltas, &profile, config.opt_steps, &hp)
        })();
        match outcome {
            Ok(losses) => {
                for (i, &loss) in losses[..losses.len() - 1].iter().enumerate() {
                    log.push(SessionEvent::OptStep { phase, step: i + 1, loss });
                }
                log.push(SessionEvent::PhaseEnd {
                    phase,
                    loss_initial: losses[0],
                    loss_final: *losses.last().expect("n >= 1"),
                });
            }
            Err(e) => {
                log.push(SessionEvent::Fallback { phase, reason: e.to_string() });
            }
        }
        Ok(())
    };

    if adapting {
        run_phase(&context, &mut deltas, &mut rng, &mut phases, &mut log)?;
    }

    let mut generated: Vec<u32> = Vec::new();
    while generated.len() < config.max_new_tokens && context.len() < cfg.max_seq {
        let delta_ref = if adapting { Some(deltas.tensors()) } else { None };
        let (logits, trace) = model.forward(&context, delta_ref)?;
        let last = logits.row(logits.rows() - 1);
        let token = sample_token(last, config.temperature, &mut rng);

        let last_trace = &trace.tokens[context.len() - 1];
        log.push(SessionEvent::Token {
            index: generated.len(),
            token,
            entropy_per_layer: last_trace.layers.iter().map(|r| r.entropy()).collect(),
            selected: last_trace.layers.iter().map(|r| r.selected.clone()).collect(),
        });

        generated.push(token);
        context.push(token);
        if config.eos_token == Some(token) {
            break;
        }
        if adapting
            && generated.len().is_multiple_of(config.regen_interval)
            && generated.len() < config.max_new_tokens
            && context.len() < cfg.max_seq
        {
            run_phase(&context, &mut deltas, &mut rng, &mut phases, &mut log)?;
        }
    }

    log.push(SessionEvent::SessionEnd { generated: generated.len(), phases });
    Ok(SessionOutcome { tokens: generated, log, deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> MoEModel {
        MoEModel::init(ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_experts: 4,
            k_active: 2,
            n_shared: 0,
            d_ff: 24,
            n_heads: 2,
            max_seq: 48,
            rng_seed: 21,
        })
        .unwrap()
    }

    fn base_config() -> SessionConfig {
        SessionConfig {
            opt_steps: 2,
            regen_interval: 4,
            max_new_tokens: 10,
            temperature: 0.7,
            rng_seed: 5,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn zero_steps_matches_none_strategy_exactly() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![1, 2, 3, 4];
        let mut a_cfg = base_config();
        a_cfg.opt_steps = 0;
        let mut b_cfg = base_config();
        b_cfg.strategy = Strategy::None;
        let a = run_session(&model, &prompt, &a_cfg).unwrap();
        let b = run_session(&model, &prompt, &b_cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn session_is_deterministic() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![1, 2, 3, 4, 5];
        let cfg = base_config();
        let a = run_session(&model, &prompt, &cfg).unwrap();
        let b = run_session(&model, &prompt, &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.log.events, b.log.events);
    }

    #[test]
    fn phase_count_follows_interval() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![1, 2, 3, 4];
        // m >= max_new_tokens: exactly one phase
        let mut cfg = base_config();
        cfg.regen_interval = 100;
        cfg.max_new_tokens = 8;
        cfg.eos_token = None;
        let out = run_session(&model, &prompt, &cfg).unwrap();
        assert_eq!(out.log.phases(), 1);
        assert_eq!(out.tokens.len(), 8);

        // m = 3, 8 tokens: 1 + floor((8-1)/3) = 3 phases
        let mut cfg = base_config();
        cfg.regen_interval = 3;
        cfg.max_new_tokens = 8;
        let out = run_session(&model, &prompt, &cfg).unwrap();
        assert_eq!(out.tokens.len(), 8);
        assert_eq!(out.log.phases(), 1 + (out.tokens.len() - 1) / 3);
    }

    #[test]
    fn eos_stops_generation() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![1, 2, 3];
        let mut cfg = base_config();
        cfg.strategy = Strategy::None;
        cfg.temperature = 0.9;
        cfg.max_new_tokens = 30;
        let unbounded = run_session(&model, &prompt, &cfg).unwrap().tokens;
        // pick the first generated token as EOS: the same stream must stop at it
        cfg.eos_token = Some(unbounded[0]);
        let stopped = run_session(&model, &prompt, &cfg).unwrap().tokens;
        assert_eq!(stopped.len(), 1);
        assert_eq!(stopped[0], unbounded[0]);
    }

    #[test]
    fn degenerate_prompt_falls_back_to_generation() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![7]; // one token: Phase 1 cannot run
        let mut cfg = base_config();
        cfg.max_new_tokens = 4;
        let out = run_session(&model, &prompt, &cfg).unwrap();
        assert_eq!(out.tokens.len(), 4);
        assert!(out.log.events.iter().any(|e| matches!(e, SessionEvent::Fallback { .. })));
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let model = tiny_model();
        let prompt: Vec<u32> = vec![1, 2, 3, 4];
        let log = run_session(&model, &prompt, &base_config()).unwrap().log;
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = SessionLog::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = SessionConfig::default();
        cfg.regen_interval = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.ratio = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.temperature = -0.1;
        assert!(cfg.validate().is_err());
    }
}
