//! Planted-signal cognitive model.
//!
//! A rule-based reasoner over the toy arithmetic language whose head
//! activations carry a known, falsifiable truth signal. Every head emits
//! standard-normal noise keyed on the full token sequence; at planted heads
//! the noise is shifted by `±separation · strength` along a fixed unit
//! direction, with the sign given by the ground-truth correctness of the
//! value claims in the sequence. Sequences without a decidable label get
//! noise only.
//!
//! The next-token program writes steps in the toy format. At each value
//! slot the value that follows from the previously written value is ranked
//! first, second or third (chosen per task and step by a seeded hash), so
//! the most likely continuation is often wrong while the truthful one stays
//! among the top candidates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::toy::{Claim, ToyLanguage, ToyTask, MODULUS};
use super::{
    hash_tokens, mix64, CognitiveModel, ForwardOutput, HeadActivations, HeadCoord, ModelDims,
    TokenSeq,
};
use crate::error::{Error, Result};

/// Behaviour of the synthetic reasoner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerProfile {
    /// Probability that the correct value is ranked 1st, 2nd, 3rd.
    pub correct_rank_probs: [f64; 3],
    /// Probability mass given to the values ranked 1st, 2nd, 3rd.
    pub rank_mass: [f64; 3],
    /// Mass spread uniformly over the whole vocabulary at every position.
    pub epsilon: f64,
    /// Self-assessment after `Verdict:`: `P(True) = sigmoid(bias ± gain)`.
    pub verdict_bias: f64,
    pub verdict_gain: f64,
}

impl Default for ReasonerProfile {
    fn default() -> Self {
        Self {
            correct_rank_probs: [0.6, 0.25, 0.15],
            rank_mass: [0.5, 0.3, 0.15],
            epsilon: 1e-3,
            verdict_bias: 1.5,
            verdict_gain: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub dims: ModelDims,
    pub planted: Vec<HeadCoord>,
    pub strength: f64,
    pub seed: u64,
    /// Shift of the class means along the planted direction at strength 1.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub profile: ReasonerProfile,
}

fn default_separation() -> f64 {
    2.5
}

#[derive(Debug, Clone)]
pub struct PlantedSignalModel {
    config: PlantedConfig,
    lang: ToyLanguage,
    /// Unit direction per coordinate, `Some` only for planted heads.
    directions: Vec<Option<Vec<f64>>>,
}

pub fn planted_signal_model(
    dims: ModelDims,
    planted: &[HeadCoord],
    strength: f64,
    seed: u64,
) -> Result<PlantedSignalModel> {
    PlantedSignalModel::new(PlantedConfig {
        dims,
        planted: planted.to_vec(),
        strength,
        seed,
        separation: default_separation(),
        profile: ReasonerProfile::default(),
    })
}

impl PlantedSignalModel {
    pub fn new(config: PlantedConfig) -> Result<Self> {
        let dims = config.dims;
        dims.validate()?;
        if config.planted.is_empty() {
            return Err(Error::config("planted head set is empty"));
        }
        if let Some(c) = config.planted.iter().find(|c| !dims.contains(**c)) {
            return Err(Error::config(format!(
                "planted head {c} outside {}x{} grid",
                dims.n_layers, dims.n_heads
            )));
        }
        if !(config.strength.is_finite() && config.strength >= 0.0) {
            return Err(Error::config(format!(
                "strength must be finite and >= 0, got {}",
                config.strength
            )));
        }
        let p = &config.profile;
        if (p.correct_rank_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || p.rank_mass.iter().sum::<f64>() > 1.0
            || !(0.0..1.0).contains(&p.epsilon)
        {
            return Err(Error::config("invalid reasoner profile"));
        }
        let lang = ToyLanguage::new(dims.vocab_size)?;
        let mut directions = vec![None; dims.n_coords()];
        for c in &config.planted {
            let mut rng = ChaCha8Rng::seed_from_u64(
                mix64(config.seed ^ 0xD1CE) ^ mix64(coord_index(&dims, *c) as u64),
            );
            let mut u: Vec<f64> = (0..dims.d_head)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            directions[coord_index(&dims, *c)] = Some(u);
        }
        Ok(Self {
            config,
            lang,
            directions,
        })
    }

    pub fn config(&self) -> &PlantedConfig {
        &self.config
    }

    pub fn language(&self) -> &ToyLanguage {
        &self.lang
    }

    pub fn planted(&self) -> &[HeadCoord] {
        &self.config.planted
    }

    /// Ground-truth label the model plants for `tokens`.
    pub fn label(&self, tokens: &[u32]) -> Option<bool> {
        self.lang.truth(tokens)
    }

    fn head_activations(&self, tokens: &[u32]) -> HeadActivations {
        let dims = self.config.dims;
        let key = hash_tokens(self.config.seed, tokens);
        let sign = match self.label(tokens) {
            Some(true) => 1.0,
            Some(false) => -1.0,
            None => 0.0,
        };
        let shift = sign * self.config.separation * self.config.strength;
        let mut out = HeadActivations::zeros(dims.n_layers, dims.n_heads, dims.d_head);
        for layer in 0..dims.n_layers {
            for head in 0..dims.n_heads {
                let idx = coord_index(&dims, HeadCoord::new(layer, head));
                let mut rng = ChaCha8Rng::seed_from_u64(key ^ mix64(idx as u64 + 1));
                let slot = out.head_mut(layer, head);
                for v in slot.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                if let Some(u) = &self.directions[idx] {
                    for (v, d) in slot.iter_mut().zip(u) {
                        *v += shift * d;
                    }
                }
            }
        }
        out
    }

    fn point_mass(&self, token: u32) -> Vec<f64> {
        let mut probs = vec![0.0; self.config.dims.vocab_size];
        probs[token as usize] = 1.0;
        self.smooth(probs)
    }

    fn smooth(&self, mut probs: Vec<f64>) -> Vec<f64> {
        let eps = self.config.profile.epsilon;
        let floor = eps / probs.len() as f64;
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p = (1.0 - eps) * *p / total + floor;
        }
        probs
    }

    fn uniform(&self) -> Vec<f64> {
        let v = self.config.dims.vocab_size;
        vec![1.0 / v as f64; v]
    }

    fn value_distribution(&self, task: &ToyTask, index: usize, claims: &[Claim]) -> Vec<f64> {
        let lang = &self.lang;
        let profile = &self.config.profile;
        if index == 0 || index > task.n_steps() {
            let mut probs = vec![0.0; self.config.dims.vocab_size];
            for n in 0..MODULUS {
                probs[lang.number_id(n) as usize] = 1.0;
            }
            return self.smooth(probs);
        }
        let previous = if index == 1 {
            task.start
        } else {
            claims
                .iter()
                .rev()
                .find(|c| c.step == Some(index - 1))
                .map(|c| c.value)
                .unwrap_or_else(|| task.values()[index - 2])
        };
        let (op, operand) = task.ops[index - 1];
        let derived = op.apply(previous, operand);

        let mut key = mix64(self.config.seed ^ 0x5EED) ^ mix64(task.start as u64);
        for (op, n) in &task.ops {
            key = mix64(key ^ ((*op as u64) << 8 | *n as u64));
        }
        key = mix64(key ^ mix64(index as u64) ^ (previous as u64) << 16);
        let u = (key >> 11) as f64 / (1u64 << 53) as f64;
        let ranks = profile.correct_rank_probs;
        let rank = if u < ranks[0] {
            0
        } else if u < ranks[0] + ranks[1] {
            1
        } else {
            2
        };
        let mut order = vec![(derived + 1) % MODULUS, (derived + MODULUS - 1) % MODULUS];
        order.insert(rank, derived);

        let mut probs = vec![0.0; self.config.dims.vocab_size];
        let rest = (1.0 - profile.rank_mass.iter().sum::<f64>()) / (MODULUS as f64 - 3.0);
        for n in 0..MODULUS {
            probs[lang.number_id(n) as usize] = rest;
        }
        for (value, mass) in order.iter().zip(profile.rank_mass) {
            probs[lang.number_id(*value) as usize] = mass;
        }
        self.smooth(probs)
    }

    fn verdict_distribution(&self, tokens: &[u32]) -> Vec<f64> {
        let p = &self.config.profile;
        let s = match self.label(tokens) {
            Some(true) => 1.0,
            Some(false) => -1.0,
            None => 0.0,
        };
        let p_true = 1.0 / (1.0 + (-(p.verdict_bias + p.verdict_gain * s)).exp());
        let mut probs = vec![0.0; self.config.dims.vocab_size];
        probs[self.lang.true_token as usize] = p_true;
        probs[self.lang.false_token as usize] = 1.0 - p_true;
        self.smooth(probs)
    }

    fn next_distribution(&self, tokens: &[u32]) -> Vec<f64> {
        let lang = &self.lang;
        let last = *tokens.last().expect("non-empty");
        if last == lang.verdict {
            return self.verdict_distribution(tokens);
        }
        let parsed = lang.parse(tokens);
        let Some(task) = parsed.task else {
            return self.uniform();
        };
        let n = task.n_steps();
        let last_step = tokens.iter().rposition(|&t| t == lang.step);
        let after_newline = |done: Option<usize>| {
            if done.is_some_and(|i| i >= n) {
                self.point_mass(lang.eos)
            } else {
                self.point_mass(lang.step)
            }
        };
        let completed = parsed.claims.iter().filter_map(|c| c.step).max();

        if let Some(p) = last_step {
            let tail = &tokens[p + 1..];
            let index = tail
                .first()
                .and_then(|&t| lang.number_value(t))
                .map(|v| v as usize);
            let num = |i: usize| tail.get(i).and_then(|&t| lang.number_value(t));
            match (tail.len(), index) {
                (0, _) => {
                    return self.point_mass(lang.number_id(completed.map_or(1, |i| i as u32 + 1)))
                }
                (1, Some(_)) => return self.point_mass(lang.colon),
                (2, Some(i)) if tail[1] == lang.colon => {
                    return if i == n {
                        self.point_mass(lang.boxed_open)
                    } else {
                        self.value_distribution(&task, i, &parsed.claims)
                    };
                }
                (3, Some(i)) if tail[1] == lang.colon && tail[2] == lang.boxed_open => {
                    return self.value_distribution(&task, i, &parsed.claims);
                }
                (3, Some(_)) if tail[1] == lang.colon && num(2).is_some() => {
                    return self.point_mass(lang.newline);
                }
                (4, Some(_)) if tail[2] == lang.boxed_open && num(3).is_some() => {
                    return self.point_mass(lang.boxed_close);
                }
                (5, Some(_)) if tail[4] == lang.boxed_close => return self.point_mass(lang.eos),
                _ => {}
            }
        }
        if last == lang.newline {
            return after_newline(completed);
        }
        self.uniform()
    }
}

fn coord_index(dims: &ModelDims, c: HeadCoord) -> usize {
    c.layer * dims.n_heads + c.head
}

impl CognitiveModel for PlantedSignalModel {
    fn dims(&self) -> ModelDims {
        self.config.dims
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.lang.vocab
    }

    fn forward(&self, tokens: &TokenSeq) -> Result<ForwardOutput> {
        tokens.check_vocab(self.config.dims.vocab_size)?;
        Ok(ForwardOutput {
            probs: self.next_distribution(tokens.as_slice()),
            activations: self.head_activations(tokens.as_slice()),
        })
    }

    fn next_token_probs(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        tokens.check_vocab(self.config.dims.vocab_size)?;
        Ok(self.next_distribution(tokens.as_slice()))
    }

    fn activations(&self, tokens: &TokenSeq) -> Result<HeadActivations> {
        tokens.check_vocab(self.config.dims.vocab_size)?;
        Ok(self.head_activations(tokens.as_slice()))
    }
}
