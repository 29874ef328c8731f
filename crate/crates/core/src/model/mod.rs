//! Cognitive-model abstraction: next-token distributions plus per-head
//! final-token attention activations.
//!
//! The activation tap sits after each head's attention mix and before its
//! output projection, i.e. `x_h^l = Att(P_h^l x_l)` at the last position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod beam;
pub mod planted;
pub mod replay;
pub mod tokenizer;
pub mod toy;
pub mod trace;
pub mod transformer;

pub use planted::{planted_signal_model, PlantedSignalModel};
pub use replay::{replay_model, ReplayModel};
pub use tokenizer::{ByteTokenizer, IndexTokenizer, Tokenizer, WordVocab};
pub use transformer::{TinyTransformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize) -> Result<Self> {
        let dims = Self {
            n_layers,
            n_heads,
            d_head,
            vocab_size,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::config(format!(
                "model dims must be positive, got L={} H={} d_head={}",
                self.n_layers, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        Ok(())
    }

    /// Residual-stream width; fixed to `n_heads * d_head`.
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn n_coords(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn contains(&self, coord: HeadCoord) -> bool {
        coord.layer < self.n_layers && coord.head < self.n_heads
    }
}

/// A (layer, head) coordinate, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadCoord {
    pub layer: usize,
    pub head: usize,
}

impl HeadCoord {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// Non-empty sequence of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::validation("token sequence is empty"));
        }
        Ok(Self(tokens))
    }

    pub fn checked(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        let seq = Self::new(tokens)?;
        seq.check_vocab(vocab_size)?;
        Ok(seq)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some((pos, t)) = self
            .0
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab_size)
        {
            return Err(Error::validation(format!(
                "token {t} at position {pos} is outside vocab of size {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last(&self) -> u32 {
        self.0[self.0.len() - 1]
    }

    pub fn extended(&self, more: &[u32]) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(more);
        Self(v)
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

/// Final-token per-head activations, laid out `[layer][head][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivations {
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    values: Vec<f64>,
}

impl HeadActivations {
    pub fn zeros(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            values: vec![0.0; n_layers * n_heads * d_head],
        }
    }

    pub fn from_vec(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != n_layers * n_heads * d_head {
            return Err(Error::validation(format!(
                "activation buffer has {} values, expected {}x{}x{}",
                values.len(),
                n_layers,
                n_heads,
                d_head
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let per_layer = n_heads * d_head;
            return Err(Error::Numeric {
                layer: i / per_layer,
                head: (i % per_layer) / d_head,
                stage: "activation",
            });
        }
        Ok(Self {
            n_layers,
            n_heads,
            d_head,
            values,
        })
    }

    pub fn for_dims(dims: &ModelDims, values: Vec<f64>) -> Result<Self> {
        Self::from_vec(dims.n_layers, dims.n_heads, dims.d_head, values)
    }

    pub fn from_f32(dims: &ModelDims, values: &[f32]) -> Result<Self> {
        Self::for_dims(dims, values.iter().map(|&v| v as f64).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_layers, self.n_heads, self.d_head)
    }

    pub fn matches(&self, dims: &ModelDims) -> bool {
        self.shape() == (dims.n_layers, dims.n_heads, dims.d_head)
    }

    fn offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_heads + head) * self.d_head
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let o = self.offset(layer, head);
        &self.values[o..o + self.d_head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let o = self.offset(layer, head);
        &mut self.values[o..o + self.d_head]
    }

    pub fn get(&self, coord: HeadCoord) -> Option<&[f64]> {
        (coord.layer < self.n_layers && coord.head < self.n_heads)
            .then(|| self.head(coord.layer, coord.head))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token distribution at the last position.
    pub probs: Vec<f64>,
    pub activations: HeadActivations,
}

/// One proposed next reasoning step.
///
/// `token_ids` is either empty (replayed candidates whose ids were not
/// recorded) or the same length as `token_logprobs`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCandidate {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    pub activations: HeadActivations,
}

impl StepCandidate {
    pub fn token_count(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn sum_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    pub fn mean_logprob(&self) -> f64 {
        self.sum_logprob() / self.token_logprobs.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<StepCandidate>,
    pub requested: usize,
    /// Hypotheses dropped because their text duplicated a better one.
    pub duplicates_removed: usize,
}

/// Parameters for producing candidate next steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// `None` selects deterministic beam search; `Some(t)` samples at temperature `t`.
    pub temperature: Option<f64>,
    pub seed: u64,
    /// Text placed between consecutive steps.
    pub step_separator: String,
    /// Text that opens every step; `separator + marker` ends a candidate.
    pub step_marker: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 1024,
            temperature: None,
            seed: 0,
            step_separator: "\n".to_string(),
            step_marker: "Step".to_string(),
        }
    }
}

impl GenerationParams {
    pub fn delimiter(&self) -> String {
        format!("{}{}", self.step_separator, self.step_marker)
    }
}

pub trait CognitiveModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Next-token distribution and final-token head activations.
    fn forward(&self, tokens: &TokenSeq) -> Result<ForwardOutput>;

    fn next_token_probs(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.probs)
    }

    fn activations(&self, tokens: &TokenSeq) -> Result<HeadActivations> {
        Ok(self.forward(tokens)?.activations)
    }

    fn generate_candidates(
        &self,
        context: &TokenSeq,
        m: usize,
        params: &GenerationParams,
    ) -> Result<CandidateSet> {
        beam::generate(self, context, m, params)
    }

    fn encode(&self, text: &str) -> Result<TokenSeq> {
        TokenSeq::checked(self.tokenizer().encode(text)?, self.dims().vocab_size)
    }
}

/// Free-function form of [`CognitiveModel::forward`].
pub fn forward_with_hooks(model: &dyn CognitiveModel, tokens: &TokenSeq) -> Result<ForwardOutput> {
    model.forward(tokens)
}

pub fn generate_candidates(
    model: &dyn CognitiveModel,
    context: &TokenSeq,
    m: usize,
    params: &GenerationParams,
) -> Result<CandidateSet> {
    model.generate_candidates(context, m, params)
}

pub(crate) fn check_distribution(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution { sum });
    }
    Ok(())
}

/// 64-bit mixing step (splitmix64 finalizer).
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn hash_tokens(seed: u64, tokens: &[u32]) -> u64 {
    tokens
        .iter()
        .fold(mix64(seed ^ tokens.len() as u64), |h, &t| {
            mix64(h ^ t as u64)
        })
}
