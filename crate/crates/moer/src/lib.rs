//! Desk-scale mixture-of-experts transformer with data-free test-time
//! router adaptation.
//!
//! The crate is organized around five pieces:
//!
//! * [`tensor`] / [`tape`] — dense `f64` kernels and reverse-mode
//!   differentiation, enough to backpropagate a context cross-entropy
//!   loss into per-layer router-logit deltas (and, for toy pretraining,
//!   into the model weights).
//! * [`model`] — the toy MoE transformer: top-k routing with renormalized
//!   weights, optional shared experts, checkpoint persistence, sampling.
//! * [`reroute`] — the adaptation engine: router confidence, layer
//!   selection strategies, Adam over delta vectors, and the two-phase
//!   optimize/generate session loop.
//! * [`analysis`] — routing diagnostics: pathway strings and edit
//!   distances, entropy trajectories, expert-utilization shifts, and an
//!   analytic operation counter.
//! * [`tasks`] — synthetic multi-domain corpus, character tokenizer, toy
//!   pretraining, and the aligned/shifted continuation evaluation suite.

pub mod analysis;
pub mod kv;
pub mod model;
pub mod reroute;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use model::{MoEModel, ModelConfig, RouterTrace};
pub use reroute::{run_session, DeltaSet, SessionConfig, SessionLog, Strategy};
pub use tensor::Tensor;
