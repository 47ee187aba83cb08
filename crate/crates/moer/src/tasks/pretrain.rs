//! Toy pretraining of the MoE baseline on the synthetic mixture.
//!
//! Next-token cross-entropy plus a load-balance auxiliary term so routing
//! does not collapse; plain Adam over all weights; bit-deterministic under
//! the seed. The auxiliary term exists only here — test-time adaptation
//! optimizes pure cross-entropy.

use super::{Sample, TaskError};
use crate::kv::KvMap;
use crate::model::{ModelConfig, MoEModel};
use crate::reroute::{adam_step, AdamParams, AdamState};
use crate::tape::Tape;
use crate::tasks::tokenize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training recipe. The canonical constants live in
/// `configs/pretrain_default.cfg`; this default mirrors that file as a
/// fallback for library use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Load-balance coefficient; 0 disables the auxiliary term.
    pub aux_coef: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            seq_len: 96,
            lr: 2e-3,
            aux_coef: 0.01,
            seed: 6,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self, TaskError> {
        let d = Self::default();
        let get = |e: crate::kv::KvError| TaskError::Config(e.to_string());
        Ok(Self {
            steps: kv.get_or("steps", d.steps).map_err(get)?,
            batch_size: kv.get_or("batch_size", d.batch_size).map_err(get)?,
            seq_len: kv.get_or("seq_len", d.seq_len).map_err(get)?,
            lr: kv.get_or("lr", d.lr).map_err(get)?,
            aux_coef: kv.get_or("aux_coef", d.aux_coef).map_err(get)?,
            seed: kv.get_or("seed", d.seed).map_err(get)?,
            log_every: kv.get_or("log_every", d.log_every).map_err(get)?,
        })
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TaskError::Config("steps and batch_size must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(TaskError::Config("seq_len must be >= 2".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.aux_coef < 0.0 {
            return Err(TaskError::Config("bad lr / aux_coef".into()));
        }
        Ok(())
    }
}

/// Loss curve and routing-health diagnostics from one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token training loss per step (cross-entropy term only).
    pub losses: Vec<f64>,
    /// Per-layer expert token-share on the training mixture after training.
    pub usage: Vec<Vec<f64>>,
    /// Layers where one expert received more than 90% of tokens.
    pub collapse_warnings: Vec<CollapseWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseWarning {
    pub layer: usize,
    pub expert: usize,
    /// Fraction of tokens that routed through this expert.
    pub token_share: f64,
}

/// Train a fresh model (seeded from `model_config.rng_seed`) on the
/// corpus. Deterministic under the combined seeds.
pub fn pretrain_toy(
    model_config: &ModelConfig,
    corpus: &[Sample],
    tc: &TrainConfig,
) -> Result<(MoEModel, TrainReport), TaskError> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(TaskError::Config("empty corpus".into()));
    }
    if tc.seq_len > model_config.max_seq {
        return Err(TaskError::Config(format!(
            "seq_len {} exceeds model max_seq {}",
            tc.seq_len, model_config.max_seq
        )));
    }

    // One token stream per domain. Training windows are drawn domain-pure
    // so routers see long same-domain contexts, the regime the adaptation
    // experiments probe; the mixture is preserved by drawing domains in
    // proportion to their stream lengths.
    let mut streams: std::collections::BTreeMap<&str, Vec<u32>> = std::collections::BTreeMap::new();
    for s in corpus {
        streams.entry(s.domain.label()).or_default().extend(tokenize(&s.text)?);
    }
    let window = tc.seq_len + 1;
    let streams: Vec<Vec<u32>> = streams.into_values().filter(|s| s.len() >= window).collect();
    if streams.is_empty() {
        return Err(TaskError::Config(format!(
            "no domain stream reaches seq_len + 1 = {window} tokens"
        )));
    }
    let total_tokens: usize = streams.iter().map(Vec::len).sum();

    let mut model = MoEModel::init(model_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let hp = AdamParams { lr: tc.lr, weight_decay: 0.0, epsilon: 1e-8 };
    let mut opt: Vec<AdamState> =
        model.params().iter().map(|t| AdamState { m: vec![0.0; t.len()], v: vec![0.0; t.len()], step: 0 }).collect();
    let mut losses = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut grad_acc: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut step_loss = 0.0;
        for _ in 0..tc.batch_size {
            let mut pick = rng.gen_range(0..total_tokens);
            let mut stream = &streams[0];
            for s in &streams {
                if pick < s.len() {
                    stream = s;
                    break;
                }
                pick -= s.len();
            }
            let start = rng.gen_range(0..=stream.len() - window);
            let chunk = &stream[start..start + window];
            let inputs = &chunk[..tc.seq_len];
            let targets = &chunk[1..];

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let pass = model
                .forward_bound(&mut tape, &bound, inputs, None, tc.aux_coef > 0.0)
                .map_err(|_| TaskError::Diverged { step })?;
            let ce = tape.cross_entropy(pass.logits, targets).map_err(|_| TaskError::Diverged { step })?;
            let mean_ce = tape.scale(ce, 1.0 / tc.seq_len as f64).map_err(TaskError::from_tensor)?;
            let mut total = mean_ce;
            if tc.aux_coef > 0.0 {
                let mut aux_sum = pass.aux[0];
                for &a in &pass.aux[1..] {
                    aux_sum = tape.add(aux_sum, a).map_err(TaskError::from_tensor)?;
                }
                let aux = tape
                    .scale(aux_sum, tc.aux_coef / model_config.n_layers as f64)
                    .map_err(TaskError::from_tensor)?;
                total = tape.add(total, aux).map_err(TaskError::from_tensor)?;
            }
            let loss_val = tape.value(total).item().map_err(TaskError::from_tensor)?;
            if !loss_val.is_finite() {
                return Err(TaskError::Diverged { step });
            }
            step_loss += tape.value(mean_ce).item().map_err(TaskError::from_tensor)?;

            let grads = tape.backward(total).map_err(|e| TaskError::Config(e.to_string()))?;
            for (acc, &id) in grad_acc.iter_mut().zip(&bound.flat) {
                let g = grads.get(id).map_err(|e| TaskError::Config(e.to_string()))?;
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        let scale = 1.0 / tc.batch_size as f64;
        for ((param, grad), state) in model.params_mut().into_iter().zip(&mut grad_acc).zip(&mut opt) {
            for g in grad.iter_mut() {
                *g *= scale;
            }
            adam_step(param.data_mut(), grad, state, &hp, 1.0)
                .map_err(|_| TaskError::Diverged { step })?;
        }
        losses.push(step_loss * scale);
    }

    let (usage, collapse_warnings) = routing_health(&model, &streams, tc.seq_len)?;
    Ok((model, TrainReport { losses, usage, collapse_warnings }))
}

impl TaskError {
    fn from_tensor(e: crate::tensor::TensorError) -> Self {
        Self::Model(crate::model::ModelError::Tensor(e))
    }
}

/// Expert token-shares per layer over probe windows from each domain
/// stream, plus collapse warnings for layers dominated by a single expert.
pub fn routing_health(
    model: &MoEModel,
    streams: &[Vec<u32>],
    seq_len: usize,
) -> Result<(Vec<Vec<f64>>, Vec<CollapseWarning>), TaskError> {
    let cfg = model.config();
    let mut counts = vec![vec![0usize; cfg.n_experts]; cfg.n_layers];
    let mut tokens = 0usize;
    for stream in streams {
        let probe = stream.len().min(seq_len * 3);
        for chunk in stream[..probe].chunks(seq_len) {
            if chunk.len() < 2 {
                continue;
            }
            let (_, trace) = model.forward(chunk, None)?;
            for tok in &trace.tokens {
                tokens += 1;
                for (l, route) in tok.layers.iter().enumerate() {
                    for &e in &route.selected {
                        counts[l][e] += 1;
                    }
                }
            }
        }
    }
    let mut usage = Vec::with_capacity(cfg.n_layers);
    let mut warnings = Vec::new();
    for (l, row) in counts.iter().enumerate() {
        let shares: Vec<f64> = row.iter().map(|&c| c as f64 / tokens.max(1) as f64).collect();
        for (e, &share) in shares.iter().enumerate() {
            if share > 0.9 {
                warnings.push(CollapseWarning { layer: l, expert: e, token_share: share });
            }
        }
        usage.push(shares);
    }
    Ok((usage, warnings))
}

/// Per-layer entropy of the expert usage distribution (from token shares,
/// normalized over experts). Full-range value is `ln(n_experts)`.
pub fn usage_entropy(usage: &[Vec<f64>]) -> Vec<f64> {
    usage
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            row.iter()
                .map(|&c| {
                    let p = c / total;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{default_specs, gen_corpus};

    fn mini_model_config() -> ModelConfig {
        ModelConfig {
            vocab_size: crate::tasks::vocab_size(),
            d_model: 16,
            n_layers: 2,
            n_experts: 4,
            k_active: 2,
            n_shared: 0,
            d_ff: 24,
            n_heads: 2,
            max_seq: 64,
            rng_seed: 5,
        }
    }

    fn mini_train_config() -> TrainConfig {
        TrainConfig {
            steps: 12,
            batch_size: 2,
            seq_len: 32,
            lr: 2e-3,
            aux_coef: 0.01,
            seed: 11,
            log_every: 100,
        }
    }

    #[test]
    fn loss_decreases_on_reference_recipe() {
        let corpus = gen_corpus(&default_specs(), 200, 1).unwrap();
        let (_, report) = pretrain_toy(&mini_model_config(), &corpus, &mini_train_config()).unwrap();
        let first = report.losses.first().copied().unwrap();
        let last = report.losses.last().copied().unwrap();
        assert!(last < first, "no descent: first {first}, last {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = gen_corpus(&default_specs(), 120, 2).unwrap();
        let (m1, r1) = pretrain_toy(&mini_model_config(), &corpus, &mini_train_config()).unwrap();
        let (m2, r2) = pretrain_toy(&mini_model_config(), &corpus, &mini_train_config()).unwrap();
        assert_eq!(r1.losses, r2.losses);
        for (a, b) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_aux_coef_is_allowed() {
        let corpus = gen_corpus(&default_specs(), 80, 3).unwrap();
        let mut tc = mini_train_config();
        tc.aux_coef = 0.0;
        tc.steps = 3;
        let (_, report) = pretrain_toy(&mini_model_config(), &corpus, &tc).unwrap();
        assert_eq!(report.losses.len(), 3);
    }

    #[test]
    fn collapse_warning_threshold() {
        // a layer whose counts put >90% of tokens on one expert triggers
        let usage = vec![vec![0.95, 0.55, 0.2, 0.3]];
        let entropy = usage_entropy(&usage);
        assert!(entropy[0] > 0.0);
        // reuse routing_health's rule directly on shares
        let warn: Vec<_> = usage[0]
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.9)
            .collect();
        assert_eq!(warn.len(), 1);
        assert_eq!(warn[0].0, 0);
    }

    #[test]
    fn train_config_from_kv() {
        let kv = KvMap::parse("steps = 5\nlr = 0.01\n").unwrap();
        let tc = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(tc.steps, 5);
        assert_eq!(tc.lr, 0.01);
        assert_eq!(tc.batch_size, TrainConfig::default().batch_size);
    }
}
