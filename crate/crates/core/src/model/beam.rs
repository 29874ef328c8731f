//! Candidate next-step generation over any [`CognitiveModel`].
//!
//! Deterministic mode is a beam search of width `m` ranked by cumulative
//! log-probability; sampling mode draws `m` independent continuations at a
//! fixed temperature. A hypothesis ends at end-of-sequence, when it emits
//! `separator + marker` after at least one content token (the delimiter is
//! stripped), or when the token budget runs out. Finished texts are
//! deduplicated, the best `m` kept, and the result ordered by mean token
//! log-probability with ties broken by text.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_distribution, mix64, CandidateSet, CognitiveModel, GenerationParams, StepCandidate,
    TokenSeq,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
    score: f64,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            score: 0.0,
        }
    }

    fn push(&self, token: u32, logprob: f64) -> Self {
        let mut next = self.clone();
        next.tokens.push(token);
        next.logprobs.push(logprob);
        next.score += logprob;
        next
    }
}

enum Outcome {
    Continue(Hypothesis),
    Finished(Hypothesis),
    Dropped,
}

struct Stopper {
    eos: Option<u32>,
    delimiter: Option<Vec<u32>>,
}

impl Stopper {
    fn new<M: CognitiveModel + ?Sized>(model: &M, params: &GenerationParams) -> Self {
        let tok = model.tokenizer();
        Self {
            eos: tok.eos(),
            delimiter: tok.pattern(&params.delimiter()),
        }
    }

    fn classify(&self, hyp: Hypothesis) -> Outcome {
        let last = *hyp.tokens.last().expect("non-empty hypothesis");
        if Some(last) == self.eos {
            let mut h = hyp;
            h.tokens.pop();
            h.logprobs.pop();
            return if h.tokens.is_empty() {
                Outcome::Dropped
            } else {
                Outcome::Finished(h)
            };
        }
        if let Some(delim) = &self.delimiter {
            if hyp.tokens.ends_with(delim) {
                let keep = hyp.tokens.len() - delim.len();
                if keep == 0 {
                    // no content yet; the delimiter opens the step
                    return Outcome::Continue(hyp);
                }
                let mut h = hyp;
                h.tokens.truncate(keep);
                h.logprobs.truncate(keep);
                h.score = h.logprobs.iter().sum();
                return Outcome::Finished(h);
            }
        }
        Outcome::Continue(hyp)
    }
}

pub fn generate<M: CognitiveModel + ?Sized>(
    model: &M,
    context: &TokenSeq,
    m: usize,
    params: &GenerationParams,
) -> Result<CandidateSet> {
    if m == 0 {
        return Err(Error::validation("candidate count m must be at least 1"));
    }
    if params.max_new_tokens == 0 {
        return Err(Error::validation("max_new_tokens must be at least 1"));
    }
    let finished = match params.temperature {
        None => beam_search(model, context, m, params)?,
        Some(t) if t > 0.0 && t.is_finite() => sample(model, context, m, t, params)?,
        Some(t) => {
            return Err(Error::validation(format!(
                "temperature must be positive, got {t}"
            )))
        }
    };
    finalize(model, context, m, finished)
}

fn beam_search<M: CognitiveModel + ?Sized>(
    model: &M,
    context: &TokenSeq,
    width: usize,
    params: &GenerationParams,
) -> Result<Vec<Hypothesis>> {
    let stopper = Stopper::new(model, params);
    let mut alive = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..params.max_new_tokens {
        let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
        for (i, hyp) in alive.iter().enumerate() {
            let probs = model.next_token_probs(&context.extended(&hyp.tokens))?;
            check_distribution(&probs)?;
            expansions.extend(
                probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(t, &p)| (i, t as u32, hyp.score + p.ln())),
            );
        }
        // stable order: score, then parent rank, then token id
        expansions.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let mut next = Vec::with_capacity(width);
        for (parent, token, score) in expansions {
            if next.len() == width {
                break;
            }
            let hyp = alive[parent].push(token, score - alive[parent].score);
            match stopper.classify(hyp) {
                Outcome::Continue(h) => next.push(h),
                Outcome::Finished(h) => finished.push(h),
                Outcome::Dropped => {}
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= width {
            // scores only decrease, so no live hypothesis can overtake the current top `width`
            let mut scores: Vec<f64> = finished.iter().map(|h| h.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let best_alive = alive
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_alive <= scores[width - 1] {
                break;
            }
        }
    }
    finished.extend(alive.into_iter().filter(|h| !h.tokens.is_empty()));
    finished.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(finished)
}

fn sample<M: CognitiveModel + ?Sized>(
    model: &M,
    context: &TokenSeq,
    m: usize,
    temperature: f64,
    params: &GenerationParams,
) -> Result<Vec<Hypothesis>> {
    let stopper = Stopper::new(model, params);
    let mut out = Vec::with_capacity(m);
    for draw in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(params.seed ^ mix64(draw as u64 + 1)));
        let mut hyp = Hypothesis::root();
        let mut done = None;
        for _ in 0..params.max_new_tokens {
            let probs = model.next_token_probs(&context.extended(&hyp.tokens))?;
            check_distribution(&probs)?;
            let token = sample_index(&probs, temperature, &mut rng);
            match stopper.classify(hyp.push(token as u32, probs[token].ln())) {
                Outcome::Continue(h) => hyp = h,
                Outcome::Finished(h) => {
                    done = Some(h);
                    break;
                }
                Outcome::Dropped => {
                    hyp = Hypothesis::root();
                    break;
                }
            }
        }
        match done {
            Some(h) => out.push(h),
            None if !hyp.tokens.is_empty() => out.push(hyp),
            None => {}
        }
    }
    Ok(out)
}

/// Index drawn from `probs` sharpened or flattened by `temperature`.
pub fn sample_index(probs: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let weights: Vec<f64> = probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p.ln() / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn finalize<M: CognitiveModel + ?Sized>(
    model: &M,
    context: &TokenSeq,
    m: usize,
    hyps: Vec<Hypothesis>,
) -> Result<CandidateSet> {
    if hyps.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let tok = model.tokenizer();
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut duplicates_removed = 0;
    for h in hyps {
        let text = tok.decode(&h.tokens);
        if text.trim().is_empty() {
            continue;
        }
        if !seen.insert(text.clone()) {
            duplicates_removed += 1;
            continue;
        }
        kept.push((text, h));
    }
    if kept.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    kept.truncate(m);
    let mut candidates = kept
        .into_iter()
        .map(|(text, h)| {
            let activations = model.activations(&context.extended(&h.tokens))?;
            Ok(StepCandidate {
                text,
                token_ids: h.tokens,
                token_logprobs: h.logprobs,
                activations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_candidates(&mut candidates);
    Ok(CandidateSet {
        candidates,
        requested: m,
        duplicates_removed,
    })
}

/// Mean token log-probability descending, ties by text ascending.
pub fn sort_candidates(candidates: &mut [StepCandidate]) {
    candidates.sort_by(|a, b| {
        b.mean_logprob()
            .total_cmp(&a.mean_logprob())
            .then_with(|| a.text.cmp(&b.text))
    });
}
