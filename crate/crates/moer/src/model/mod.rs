//! The toy decoder-only MoE transformer.
//!
//! Standard causal multi-head attention with RMS pre-normalization, and an
//! MoE feed-forward block per layer: a linear router over `n_experts`
//! experts, top-k selection with renormalized weights, plus optionally a
//! few always-active shared experts whose outputs are added unweighted.
//!
//! The forward pass runs on a [`Tape`] so the same code serves plain
//! inference, router-delta optimization, and full pretraining; callers pick
//! what is differentiable when binding the weights.

pub mod checkpoint;

use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    Tensor(TensorError),
    /// Context longer than `max_seq`.
    Capacity { len: usize, max: usize },
    TokenOutOfRange { token: u32, vocab: usize },
    LayerOutOfRange { layer: usize, layers: usize },
    /// Delta vector count or length does not match the architecture.
    DeltaShape { expected: Vec<usize>, got: Vec<usize> },
    EmptyContext,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "invalid model config: {msg}"),
            Self::Tensor(e) => write!(f, "tensor error: {e}"),
            Self::Capacity { len, max } => write!(f, "context length {len} exceeds max_seq {max}"),
            Self::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} out of range for vocab {vocab}")
            }
            Self::LayerOutOfRange { layer, layers } => {
                write!(f, "layer {layer} out of range (model has {layers})")
            }
            Self::DeltaShape { expected, got } => {
                write!(f, "delta shape mismatch: expected {expected:?}, got {got:?}")
            }
            Self::EmptyContext => write!(f, "empty token context"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Architecture description. Weights are derived deterministically from
/// `rng_seed` at initialization time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub k_active: usize,
    pub n_shared: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Default desk-scale configuration: big enough for experts to
    /// specialize, small enough for CPU test runs.
    pub fn toy_default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_experts: 8,
            k_active: 2,
            n_shared: 0,
            d_ff: 128,
            n_heads: 4,
            max_seq: 256,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k_active == 0 || self.k_active > self.n_experts {
            return Err(ModelError::Config(format!(
                "k_active must satisfy 1 <= k <= n_experts, got k={} N={}",
                self.k_active, self.n_experts
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.max_seq == 0 {
            return Err(ModelError::Config("max_seq must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical parameter walk: names and shapes in a fixed order shared
    /// by initialization, binding, and the checkpoint manifest.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let dh = self.head_dim();
        let mut out = Vec::new();
        out.push(("tok_emb".to_string(), vec![self.vocab_size, d]));
        out.push(("pos_emb".to_string(), vec![self.max_seq, d]));
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![d]));
            for h in 0..self.n_heads {
                out.push((format!("layers.{l}.heads.{h}.wq"), vec![d, dh]));
                out.push((format!("layers.{l}.heads.{h}.wk"), vec![d, dh]));
                out.push((format!("layers.{l}.heads.{h}.wv"), vec![d, dh]));
                out.push((format!("layers.{l}.heads.{h}.wo"), vec![dh, d]));
            }
            out.push((format!("layers.{l}.ffn_norm"), vec![d]));
            out.push((format!("layers.{l}.router"), vec![self.n_experts, d]));
            for e in 0..self.n_experts + self.n_shared {
                out.push((format!("layers.{l}.experts.{e}.w1"), vec![self.d_ff, d]));
                out.push((format!("layers.{l}.experts.{e}.b1"), vec![self.d_ff]));
                out.push((format!("layers.{l}.experts.{e}.w2"), vec![d, self.d_ff]));
                out.push((format!("layers.{l}.experts.{e}.b2"), vec![d]));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![self.vocab_size, d]));
        out
    }
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct ExpertWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub heads: Vec<HeadWeights>,
    pub ffn_norm: Tensor,
    /// Router matrix `[n_experts, d_model]`.
    pub router: Tensor,
    /// Routed experts `0..n_experts`, then shared experts.
    pub experts: Vec<ExpertWeights>,
}

/// Frozen MoE transformer weights. Immutable during inference and
/// rerouting; only router deltas change at test time.
#[derive(Debug, Clone)]
pub struct MoEModel {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<LayerWeights>,
    final_norm: Tensor,
    head: Tensor,
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    // Box-Muller; the clamp keeps ln() finite.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
}

impl MoEModel {
    /// Initialize weights deterministically from `config.rng_seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.rng_seed);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut flat = Vec::new();
        for (name, shape) in config.param_specs() {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("norm") {
                vec![1.0; len]
            } else if name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; len]
            } else if name.ends_with(".w2") || name.ends_with(".wo") {
                (0..len).map(|_| normal(&mut rng, 0.02 * residual_scale)).collect()
            } else {
                (0..len).map(|_| normal(&mut rng, 0.02)).collect()
            };
            flat.push(Tensor::new(shape, data).expect("spec shape"));
        }
        Self::from_flat(config, flat)
    }

    /// Assemble a model from tensors in `param_specs` order.
    pub(crate) fn from_flat(config: ModelConfig, flat: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        if flat.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                flat.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&flat) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = flat.into_iter();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = next();
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadWeights { wq: next(), wk: next(), wv: next(), wo: next() });
            }
            let ffn_norm = next();
            let router = next();
            let mut experts = Vec::with_capacity(config.n_experts + config.n_shared);
            for _ in 0..config.n_experts + config.n_shared {
                experts.push(ExpertWeights { w1: next(), b1: next(), w2: next(), b2: next() });
            }
            layers.push(LayerWeights { attn_norm, heads, ffn_norm, router, experts });
        }
        let final_norm = next();
        let head = next();
        Ok(Self { config, tok_emb, pos_emb, layers, final_norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    /// Parameters in `param_specs` order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.push(&self.tok_emb);
        out.push(&self.pos_emb);
        for l in &self.layers {
            out.push(&l.attn_norm);
            for h in &l.heads {
                out.push(&h.wq);
                out.push(&h.wk);
                out.push(&h.wv);
                out.push(&h.wo);
            }
            out.push(&l.ffn_norm);
            out.push(&l.router);
            for e in &l.experts {
                out.push(&e.w1);
                out.push(&e.b1);
                out.push(&e.w2);
                out.push(&e.b2);
            }
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_emb);
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            for h in &mut l.heads {
                out.push(&mut h.wq);
                out.push(&mut h.wk);
                out.push(&mut h.wv);
                out.push(&mut h.wo);
            }
            out.push(&mut l.ffn_norm);
            out.push(&mut l.router);
            for e in &mut l.experts {
                out.push(&mut e.w1);
                out.push(&mut e.b1);
                out.push(&mut e.w2);
                out.push(&mut e.b2);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    /// Put every weight on the tape. With `trainable` the weights become
    /// differentiable variables (pretraining); otherwise they are constant
    /// leaves and only explicitly bound deltas can carry gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut flat = Vec::new();
        let mut put = |tape: &mut Tape, t: &Tensor| {
            let id = if trainable { tape.var(t.clone()) } else { tape.leaf(t.clone()) };
            flat.push(id);
            id
        };
        let tok_emb = put(tape, &self.tok_emb);
        let pos_emb = put(tape, &self.pos_emb);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let attn_norm = put(tape, &l.attn_norm);
            let mut heads = Vec::with_capacity(l.heads.len());
            for h in &l.heads {
                heads.push(BoundHead {
                    wq: put(tape, &h.wq),
                    wk: put(tape, &h.wk),
                    wv: put(tape, &h.wv),
                    wo: put(tape, &h.wo),
                });
            }
            let ffn_norm = put(tape, &l.ffn_norm);
            let router = put(tape, &l.router);
            let mut experts = Vec::with_capacity(l.experts.len());
            for e in &l.experts {
                experts.push(BoundExpert {
                    w1: put(tape, &e.w1),
                    b1: put(tape, &e.b1),
                    w2: put(tape, &e.w2),
                    b2: put(tape, &e.b2),
                });
            }
            layers.push(BoundLayer { attn_norm, heads, ffn_norm, router, experts });
        }
        let final_norm = put(tape, &self.final_norm);
        let head = put(tape, &self.head);
        BoundModel { tok_emb, pos_emb, layers, final_norm, head, flat }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::Capacity { len: tokens.len(), max: self.config.max_seq });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }

    fn check_deltas(&self, count: usize, shapes: impl Iterator<Item = Vec<usize>>) -> Result<(), ModelError> {
        if count != self.config.n_layers {
            return Err(ModelError::DeltaShape {
                expected: vec![self.config.n_layers, self.config.n_experts],
                got: vec![count],
            });
        }
        for s in shapes {
            if s != [self.config.n_experts] {
                return Err(ModelError::DeltaShape {
                    expected: vec![self.config.n_layers, self.config.n_experts],
                    got: s,
                });
            }
        }
        Ok(())
    }

    /// Full causal forward over a bound model. Returns next-token logits
    /// (`[T, vocab]`) and the routing trace. When `want_aux` is set, also
    /// returns one load-balance scalar per layer (used by pretraining).
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[u32],
        deltas: Option<&[NodeId]>,
        want_aux: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_tokens(tokens)?;
        if let Some(ds) = deltas {
            self.check_deltas(ds.len(), ds.iter().map(|&d| tape.value(d).shape().to_vec()))?;
        }
        let cfg = &self.config;
        let t_len = tokens.len();
        let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos_idx: Vec<usize> = (0..t_len).collect();

        let te = tape.gather_rows(bound.tok_emb, &tok_idx)?;
        let pe = tape.gather_rows(bound.pos_emb, &pos_idx)?;
        let mut x = tape.add(te, pe)?;

        let mut trace = RouterTrace::new(cfg.n_layers, cfg.n_experts, cfg.k_active, t_len);
        let mut aux = Vec::new();
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        for (l, layer) in bound.layers.iter().enumerate() {
            // attention block
            let xn = tape.rms_norm(x, layer.attn_norm)?;
            let mut attn_out: Option<NodeId> = None;
            for head in &layer.heads {
                let q = tape.matmul(xn, head.wq)?;
                let k = tape.matmul(xn, head.wk)?;
                let v = tape.matmul(xn, head.wv)?;
                let scores = tape.matmul_nt(q, k)?;
                let scaled = tape.scale(scores, scale)?;
                let probs = tape.causal_softmax(scaled)?;
                let ctx = tape.matmul(probs, v)?;
                let out = tape.matmul(ctx, head.wo)?;
                attn_out = Some(match attn_out {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
            }
            x = tape.add(x, attn_out.expect("n_heads >= 1"))?;

            // MoE block
            let xn = tape.rms_norm(x, layer.ffn_norm)?;
            let z = tape.matmul_nt(xn, layer.router)?;
            let zt = match deltas {
                Some(ds) => tape.add_bias(z, ds[l])?,
                None => z,
            };
            let mut selected = Vec::with_capacity(t_len);
            for r in 0..t_len {
                let raw = tape.value(z).row(r).to_vec();
                let adj = tape.value(zt).row(r);
                let route = route_from_logits(raw, adj, cfg.k_active);
                selected.push(route.selected.clone());
                trace.tokens[r].layers.push(route);
            }
            let weights = tape.select_softmax(zt, &selected)?;

            let mut expert_rows: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
            for (r, sel) in selected.iter().enumerate() {
                for &e in sel {
                    expert_rows[e].push(r);
                }
            }
            let mut moe_out: Option<NodeId> = None;
            for (e, rows) in expert_rows.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let ex = &layer.experts[e];
                let xi = tape.gather_rows(xn, rows)?;
                let h1 = tape.matmul_nt(xi, ex.w1)?;
                let h1 = tape.add_bias(h1, ex.b1)?;
                let h1 = tape.silu(h1)?;
                let o = tape.matmul_nt(h1, ex.w2)?;
                let o = tape.add_bias(o, ex.b2)?;
                let widx: Vec<usize> = rows.iter().map(|&r| r * cfg.n_experts + e).collect();
                let w = tape.gather_entries(weights, &widx)?;
                let ow = tape.scale_rows(o, w)?;
                let sc = tape.scatter_rows(ow, rows, t_len)?;
                moe_out = Some(match moe_out {
                    Some(acc) => tape.add(acc, sc)?,
                    None => sc,
                });
            }
            // shared experts run on every token, unweighted
            for ex in &layer.experts[cfg.n_experts..] {
                let h1 = tape.matmul_nt(xn, ex.w1)?;
                let h1 = tape.add_bias(h1, ex.b1)?;
                let h1 = tape.silu(h1)?;
                let o = tape.matmul_nt(h1, ex.w2)?;
                let o = tape.add_bias(o, ex.b2)?;
                moe_out = Some(match moe_out {
                    Some(acc) => tape.add(acc, o)?,
                    None => o,
                });
            }
            x = tape.add(x, moe_out.expect("k >= 1"))?;

            if want_aux {
                // Switch-style balance term: N * sum_i f_i * mean_prob_i,
                // where f_i is the fraction of dispatch slots expert i won.
                let probs = tape.softmax(zt)?;
                let pm = tape.mean_rows(probs)?;
                let total = (t_len * cfg.k_active) as f64;
                let f: Vec<f64> =
                    expert_rows.iter().map(|rows| rows.len() as f64 / total).collect();
                let balance = tape.dot(pm, Tensor::from_vec(f))?;
                aux.push(tape.scale(balance, cfg.n_experts as f64)?);
            }
        }

        let xf = tape.rms_norm(x, bound.final_norm)?;
        let logits = tape.matmul_nt(xf, bound.head)?;
        Ok(ForwardPass { logits, trace, aux })
    }

    /// Plain (untraced) forward: logits `[T, vocab]` plus the routing trace.
    pub fn forward(
        &self,
        tokens: &[u32],
        deltas: Option<&[Tensor]>,
    ) -> Result<(Tensor, RouterTrace), ModelError> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, false);
        let ids: Option<Vec<NodeId>> = deltas.map(|ds| ds.iter().map(|d| tape.leaf(d.clone())).collect());
        let pass = self.forward_bound(&mut tape, &bound, tokens, ids.as_deref(), false)?;
        Ok((tape.value(pass.logits).clone(), pass.trace))
    }

    /// Summed next-token cross-entropy of a context under optional deltas.
    pub fn context_loss(&self, tokens: &[u32], deltas: Option<&[Tensor]>) -> Result<f64, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::EmptyContext);
        }
        let (logits, _) = self.forward(tokens, deltas)?;
        let v = logits.cols();
        let rows = tokens.len() - 1;
        let pred = Tensor::new(vec![rows, v], logits.data()[..rows * v].to_vec())?;
        Ok(tensor::cross_entropy(&pred, &tokens[1..])?.item()?)
    }

    /// Route a single hidden state through one layer's router.
    pub fn route_token(
        &self,
        hidden: &Tensor,
        layer: usize,
        delta: Option<&Tensor>,
    ) -> Result<LayerRoute, ModelError> {
        if layer >= self.config.n_layers {
            return Err(ModelError::LayerOutOfRange { layer, layers: self.config.n_layers });
        }
        if hidden.shape() != [self.config.d_model] {
            return Err(ModelError::DeltaShape {
                expected: vec![self.config.d_model],
                got: hidden.shape().to_vec(),
            });
        }
        if let Some(d) = delta {
            self.check_deltas(self.config.n_layers, std::iter::once(d.shape().to_vec()))
                .map_err(|_| ModelError::DeltaShape {
                    expected: vec![self.config.n_experts],
                    got: d.shape().to_vec(),
                })?;
        }
        let w = &self.layers[layer].router;
        let n = self.config.n_experts;
        let mut z = vec![0.0; n];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = w.row(i).iter().zip(hidden.data()).map(|(a, b)| a * b).sum();
        }
        let adjusted: Vec<f64> = match delta {
            Some(d) => z.iter().zip(d.data()).map(|(a, b)| a + b).collect(),
            None => z.clone(),
        };
        Ok(route_from_logits(z, &adjusted, self.config.k_active))
    }

    /// One MoE feed-forward block applied to a single hidden state:
    /// weighted sum of the selected experts plus unweighted shared experts.
    /// Operates on the given vector directly (pre-normalization is part of
    /// the surrounding block, not of this op).
    pub fn moe_layer(
        &self,
        hidden: &Tensor,
        layer: usize,
        delta: Option<&Tensor>,
    ) -> Result<(Tensor, LayerRoute), ModelError> {
        let route = self.route_token(hidden, layer, delta)?;
        let cfg = &self.config;
        let mut out = vec![0.0; cfg.d_model];
        let apply = |ex: &ExpertWeights, weight: f64, out: &mut [f64]| {
            let mut h1 = vec![0.0; cfg.d_ff];
            for (j, h) in h1.iter_mut().enumerate() {
                let dotp: f64 = ex.w1.row(j).iter().zip(hidden.data()).map(|(a, b)| a * b).sum();
                *h = tensor::silu_scalar(dotp + ex.b1.data()[j]);
            }
            for (j, o) in out.iter_mut().enumerate() {
                let dotp: f64 = ex.w2.row(j).iter().zip(&h1).map(|(a, b)| a * b).sum();
                *o += weight * (dotp + ex.b2.data()[j]);
            }
        };
        for (i, &e) in route.selected.iter().enumerate() {
            apply(&self.layers[layer].experts[e], route.weights[i], &mut out);
        }
        for ex in &self.layers[layer].experts[cfg.n_experts..] {
            apply(ex, 1.0, &mut out);
        }
        let t = Tensor::from_vec(out);
        tensor::check_finite(&t, "moe_layer")?;
        Ok((t, route))
    }
}

/// Tape handles for every model weight, in one forward pass.
pub struct BoundModel {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<BoundLayer>,
    pub final_norm: NodeId,
    pub head: NodeId,
    /// All ids in `param_specs` order, for gradient extraction.
    pub flat: Vec<NodeId>,
}

pub struct BoundLayer {
    pub attn_norm: NodeId,
    pub heads: Vec<BoundHead>,
    pub ffn_norm: NodeId,
    pub router: NodeId,
    pub experts: Vec<BoundExpert>,
}

pub struct BoundHead {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

pub struct BoundExpert {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Output of one bound forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    pub trace: RouterTrace,
    /// Per-layer load-balance scalars (empty unless requested).
    pub aux: Vec<NodeId>,
}

/// Routing record for one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRoute {
    /// Raw router logits `z`.
    pub logits: Vec<f64>,
    /// Logits after delta addition (equal to `logits` without deltas).
    pub adjusted: Vec<f64>,
    /// Full softmax over the adjusted logits.
    pub probs: Vec<f64>,
    /// Selected experts, descending probability, ties to the lower index.
    pub selected: Vec<usize>,
    /// Renormalized weights over the selected experts.
    pub weights: Vec<f64>,
    /// Pre-renormalization probabilities of the selected experts.
    pub top_probs: Vec<f64>,
}

impl LayerRoute {
    /// Shannon entropy of the full expert-selection distribution.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
    }
}

/// Per-token, per-layer routing records of one forward pass.
#[derive(Debug, Clone)]
pub struct RouterTrace {
    pub n_layers: usize,
    pub n_experts: usize,
    pub k: usize,
    pub tokens: Vec<TokenTrace>,
}

#[derive(Debug, Clone)]
pub struct TokenTrace {
    pub layers: Vec<LayerRoute>,
}

impl RouterTrace {
    fn new(n_layers: usize, n_experts: usize, k: usize, tokens: usize) -> Self {
        Self {
            n_layers,
            n_experts,
            k,
            tokens: (0..tokens).map(|_| TokenTrace { layers: Vec::with_capacity(n_layers) }).collect(),
        }
    }
}

/// Top-k selection and weight renormalization from one logit row.
///
/// Selection order is descending probability with ties broken by the lower
/// expert index. Renormalized weights are the softmax over the selected
/// logits alone, which equals renormalizing the full softmax over the
/// selected set.
pub fn route_from_logits(raw: Vec<f64>, adjusted: &[f64], k: usize) -> LayerRoute {
    let n = adjusted.len();
    let mut probs = vec![0.0; n];
    tensor::softmax_slice(adjusted, &mut probs);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).expect("finite probs").then(a.cmp(&b))
    });
    let selected: Vec<usize> = order[..k].to_vec();
    let top_probs: Vec<f64> = selected.iter().map(|&i| probs[i]).collect();
    let sel_logits: Vec<f64> = selected.iter().map(|&i| adjusted[i]).collect();
    let mut weights = vec![0.0; k];
    tensor::softmax_slice(&sel_logits, &mut weights);
    LayerRoute { logits: raw, adjusted: adjusted.to_vec(), probs, selected, weights, top_probs }
}

/// Draw a token from logits. Temperature zero is argmax with ties going to
/// the lowest index; otherwise a categorical draw from
/// `softmax(logits / temperature)`.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let mut probs = vec![0.0; scaled.len()];
    tensor::softmax_slice(&scaled, &mut probs);
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}
