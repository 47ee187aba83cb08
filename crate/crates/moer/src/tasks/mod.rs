//! Synthetic multi-domain corpus, character tokenizer, toy pretraining,
//! and the aligned/shifted continuation evaluation suite.
//!
//! Five small algorithmic domains (arithmetic, copy, reverse, key-value
//! lookup, sort) stand in for distinct task families: mixture training
//! followed by domain-pure prompting creates the distribution shift that
//! test-time rerouting exploits.

pub mod eval;
pub mod pretrain;

use crate::model::ModelError;
use crate::reroute::RerouteError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum TaskError {
    Config(String),
    /// Character outside the fixed alphabet.
    Encoding { ch: char },
    /// Token index outside the vocabulary.
    TokenRange { token: u32 },
    /// Training loss became non-finite.
    Diverged { step: usize },
    Io(std::io::Error),
    Model(ModelError),
    Reroute(RerouteError),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "task configuration error: {msg}"),
            Self::Encoding { ch } => write!(f, "character {ch:?} is not in the alphabet"),
            Self::TokenRange { token } => write!(f, "token {token} outside the vocabulary"),
            Self::Diverged { step } => write!(f, "training diverged (non-finite loss) at step {step}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::Reroute(e) => write!(f, "reroute error: {e}"),
        }
    }
}

impl std::error::Error for TaskError {}

impl From<std::io::Error> for TaskError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
impl From<ModelError> for TaskError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}
impl From<RerouteError> for TaskError {
    fn from(e: RerouteError) -> Self {
        Self::Reroute(e)
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// The fixed character alphabet: index in this string is the token id.
/// Digits, lowercase letters, the domain tag letters, task punctuation,
/// then reserved symbols padding the vocabulary to 64.
pub const ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyzACKQRS:+-=;?,|!*./<>_()[]{}%";

/// Token id of the sample terminator `;`.
pub fn eos_token() -> u32 {
    encode_char(';').expect("';' is in the alphabet")
}

pub fn vocab_size() -> usize {
    ALPHABET.len()
}

pub fn encode_char(ch: char) -> Result<u32, TaskError> {
    ALPHABET.find(ch).map(|i| i as u32).ok_or(TaskError::Encoding { ch })
}

/// Character-level encoding; a bijection on the alphabet.
pub fn tokenize(text: &str) -> Result<Vec<u32>, TaskError> {
    text.chars().map(encode_char).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<String, TaskError> {
    let chars: Vec<char> = ALPHABET.chars().collect();
    tokens
        .iter()
        .map(|&t| chars.get(t as usize).copied().ok_or(TaskError::TokenRange { token: t }))
        .collect()
}

// ---------------------------------------------------------------------------
// Domains and corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Arithmetic,
    Copy,
    Reverse,
    KeyValue,
    Sort,
}

impl Domain {
    pub const ALL: [Domain; 5] =
        [Domain::Arithmetic, Domain::Copy, Domain::Reverse, Domain::KeyValue, Domain::Sort];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Arithmetic => "arithmetic",
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::KeyValue => "keyvalue",
            Self::Sort => "sort",
        }
    }

    pub fn from_label(s: &str) -> Result<Self, TaskError> {
        match s {
            "arithmetic" => Ok(Self::Arithmetic),
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "keyvalue" => Ok(Self::KeyValue),
            "sort" => Ok(Self::Sort),
            other => Err(TaskError::Config(format!("unknown domain '{other}'"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Generation parameters for one domain: payload length bounds (payload
/// symbols are lowercase letters, or digits 0-99 for arithmetic operands)
/// and the mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub min_payload: usize,
    pub max_payload: usize,
    pub weight: f64,
}

/// Equal-weight mixture over all five domains.
pub fn default_specs() -> Vec<DomainSpec> {
    Domain::ALL
        .iter()
        .map(|&domain| DomainSpec { domain, min_payload: 3, max_payload: 8, weight: 0.2 })
        .collect()
}

/// One corpus sample: the domain tag, the full text, and the byte offset
/// where the answer (continuation) begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub domain: Domain,
    pub text: String,
    pub answer_at: usize,
}

impl Sample {
    /// Everything up to the answer: the natural prompt.
    pub fn prompt(&self) -> &str {
        &self.text[..self.answer_at]
    }

    /// The answer plus terminator: the gold continuation.
    pub fn continuation(&self) -> &str {
        &self.text[self.answer_at..]
    }
}

/// Draw one sample of a domain. All text stays inside [`ALPHABET`].
pub fn gen_sample(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Sample {
    let payload_len = rng.gen_range(spec.min_payload..=spec.max_payload);
    let letters = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
    };
    match spec.domain {
        Domain::Arithmetic => {
            let a: i64 = rng.gen_range(0..100);
            let b: i64 = rng.gen_range(0..100);
            let (a, b, op, c) = if rng.gen_bool(0.5) {
                (a, b, '+', a + b)
            } else {
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                (hi, lo, '-', hi - lo)
            };
            let text = format!("Q:{a}{op}{b}=A:{c};");
            let answer_at = text.find("A:").expect("format") + 2;
            Sample { domain: spec.domain, text, answer_at }
        }
        Domain::Copy => {
            let p = letters(rng, payload_len);
            let text = format!("C:{p}={p};");
            Sample { domain: spec.domain, answer_at: 2 + p.len() + 1, text }
        }
        Domain::Reverse => {
            let p = letters(rng, payload_len);
            let r: String = p.chars().rev().collect();
            let text = format!("R:{p}={r};");
            Sample { domain: spec.domain, answer_at: 2 + p.len() + 1, text }
        }
        Domain::KeyValue => {
            let n = rng.gen_range(2..=4usize);
            let mut keys: Vec<u8> = Vec::new();
            while keys.len() < n {
                let k = b'a' + rng.gen_range(0..26u8);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let vals: Vec<u8> = (0..n).map(|_| b'0' + rng.gen_range(0..10u8)).collect();
            let pairs: String =
                keys.iter().zip(&vals).map(|(&k, &v)| format!("{}{}", k as char, v as char)).collect();
            let q = rng.gen_range(0..n);
            let text =
                format!("K:{pairs}?{}={};", keys[q] as char, vals[q] as char);
            let answer_at = text.find('=').expect("format") + 1;
            Sample { domain: spec.domain, text, answer_at }
        }
        Domain::Sort => {
            let p = letters(rng, payload_len);
            let mut sorted: Vec<char> = p.chars().collect();
            sorted.sort_unstable();
            let s: String = sorted.into_iter().collect();
            let text = format!("S:{p}={s};");
            Sample { domain: spec.domain, answer_at: 2 + p.len() + 1, text }
        }
    }
}

/// Generate a corpus of `size` samples, drawing domains by mixture weight.
/// Deterministic under the seed.
pub fn gen_corpus(specs: &[DomainSpec], size: usize, seed: u64) -> Result<Vec<Sample>, TaskError> {
    if specs.is_empty() {
        return Err(TaskError::Config("no domain specs".into()));
    }
    if size == 0 {
        return Err(TaskError::Config("corpus size must be >= 1".into()));
    }
    let total: f64 = specs.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(TaskError::Config(format!("mixture weights sum to {total}, expected 1")));
    }
    for s in specs {
        if s.min_payload == 0 || s.min_payload > s.max_payload {
            return Err(TaskError::Config(format!(
                "bad payload bounds [{}, {}] for {}",
                s.min_payload, s.max_payload, s.domain
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let mut u: f64 = rng.gen::<f64>() * total;
        let mut chosen = &specs[specs.len() - 1];
        for s in specs {
            if u < s.weight {
                chosen = s;
                break;
            }
            u -= s.weight;
        }
        out.push(gen_sample(chosen, &mut rng));
    }
    Ok(out)
}

/// Corpus file format: one sample per line, `domain<TAB>text`.
pub fn corpus_to_string(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(s.domain.label());
        out.push('\t');
        out.push_str(&s.text);
        out.push('\n');
    }
    out
}

pub fn corpus_from_string(text: &str) -> Result<Vec<Sample>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (tag, body) = line
            .split_once('\t')
            .ok_or_else(|| TaskError::Config(format!("line {}: missing domain tab", i + 1)))?;
        let domain = Domain::from_label(tag)?;
        let answer_at = answer_offset(domain, body)
            .ok_or_else(|| TaskError::Config(format!("line {}: malformed {tag} sample", i + 1)))?;
        out.push(Sample { domain, text: body.to_string(), answer_at });
    }
    Ok(out)
}

fn answer_offset(domain: Domain, text: &str) -> Option<usize> {
    match domain {
        Domain::Arithmetic => text.find("A:").map(|i| i + 2),
        Domain::KeyValue => text.find('=').map(|i| i + 1),
        Domain::Copy | Domain::Reverse | Domain::Sort => text.find('=').map(|i| i + 1),
    }
}
