//! Stepwise chain-of-thought decoding.
//!
//! Every strategy runs the same loop: generate candidate next steps for the
//! current chain, pick one, append it, and stop once a step carries a
//! `\boxed{...}` answer or a limit is hit. Strategies differ only in how
//! candidates are produced and picked:
//!
//! * `guided`: `M` beam candidates ranked by `λ·β + (1−λ)·P̄`, where `β` is the
//!   confidence predictor's output and `P̄` the geometric-mean token probability.
//! * `greedy_fewshot`: one greedy candidate per step.
//! * `self_consistency`: several sampled paths, answers decided by vote.
//! * `random_select`: `M` beam candidates, one picked uniformly at random.
//! * `self_eval`: like `guided` with `β` replaced by the model's own
//!   probability of judging the step true, candidates drawn by sampling.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{is_true_probability, VerificationTemplate};
use crate::dataset::format_cot;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::beam::sort_candidates;
use crate::model::toy::ToyTask;
use crate::model::{mix64, CognitiveModel, GenerationParams, StepCandidate};
use crate::predictor::ConfidencePredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Guided,
    GreedyFewshot,
    SelfConsistency,
    RandomSelect,
    SelfEval,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Guided,
        Strategy::GreedyFewshot,
        Strategy::SelfConsistency,
        Strategy::RandomSelect,
        Strategy::SelfEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Guided => "guided",
            Strategy::GreedyFewshot => "greedy_fewshot",
            Strategy::SelfConsistency => "self_consistency",
            Strategy::RandomSelect => "random_select",
            Strategy::SelfEval => "self_eval",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which activations feed the predictor when scoring a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSource {
    /// Re-run the model on the step-probe prompt built from the question,
    /// the chain so far and the candidate.
    #[default]
    Reframe,
    /// Use the activations the candidate was generated with.
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub strategy: Strategy,
    pub m: usize,
    pub lambda: f64,
    pub max_steps: usize,
    /// Token budget for the whole chain.
    pub max_new_tokens: usize,
    pub correction_threshold: Option<f64>,
    pub correction_template: String,
    pub seed: u64,
    /// `None` generates candidates by beam search.
    pub candidate_temperature: Option<f64>,
    pub self_consistency_paths: usize,
    pub self_consistency_temperature: f64,
    /// Tried in order while sampled candidates collapse into duplicates.
    pub self_eval_temperatures: Vec<f64>,
    pub verification: VerificationTemplate,
    pub beta_source: BetaSource,
    pub step_separator: String,
    pub step_marker: String,
}

pub const DEFAULT_MAX_STEPS: usize = 8;
pub const MULTIMODAL_MAX_STEPS: usize = 15;

impl Default for DecodeParams {
    fn default() -> Self {
        let gen = GenerationParams::default();
        Self {
            strategy: Strategy::Guided,
            m: 3,
            lambda: 0.5,
            max_steps: DEFAULT_MAX_STEPS,
            max_new_tokens: 1024,
            correction_threshold: None,
            correction_template: "Let us check the previous steps and give a correct next step.\n"
                .into(),
            seed: 0,
            candidate_temperature: None,
            self_consistency_paths: 3,
            self_consistency_temperature: 0.7,
            self_eval_temperatures: vec![0.5, 0.7, 0.9, 1.1, 1.3],
            verification: VerificationTemplate::default(),
            beta_source: BetaSource::Reframe,
            step_separator: gen.step_separator,
            step_marker: gen.step_marker,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.m == 0
            || self.max_steps == 0
            || self.max_new_tokens == 0
            || self.self_consistency_paths == 0
        {
            return Err(Error::validation(
                "m, max_steps, max_new_tokens and path count must be at least 1",
            ));
        }
        if let Some(t) = self.correction_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::validation(format!(
                    "correction threshold must be in [0, 1], got {t}"
                )));
            }
        }
        let temps = self
            .self_eval_temperatures
            .iter()
            .chain([&self.self_consistency_temperature])
            .chain(&self.candidate_temperature);
        if temps.clone().any(|t| !(t.is_finite() && *t > 0.0))
            || self.self_eval_temperatures.is_empty()
        {
            return Err(Error::validation(
                "temperatures must be positive and finite",
            ));
        }
        Ok(())
    }

    fn generation(&self, seed: u64, budget: usize, temperature: Option<f64>) -> GenerationParams {
        GenerationParams {
            max_new_tokens: budget,
            temperature,
            seed,
            step_separator: self.step_separator.clone(),
            step_marker: self.step_marker.clone(),
        }
    }
}

/// `exp` of the mean token log-probability.
pub fn mean_logprob_score(c: &StepCandidate) -> Result<f64> {
    if c.token_logprobs.is_empty() {
        return Err(Error::validation("candidate has no tokens"));
    }
    if c.token_logprobs.iter().any(|lp| !lp.is_finite()) {
        return Err(Error::validation(
            "candidate has non-finite log-probabilities",
        ));
    }
    Ok(c.mean_logprob().exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: StepCandidate,
    pub beta: f64,
    pub pbar: f64,
    pub score: f64,
}

pub fn combine(lambda: f64, beta: f64, pbar: f64) -> f64 {
    lambda * beta + (1.0 - lambda) * pbar
}

pub fn score_with_beta(c: StepCandidate, beta: f64, lambda: f64) -> Result<ScoredCandidate> {
    let pbar = mean_logprob_score(&c)?;
    Ok(ScoredCandidate {
        candidate: c,
        beta,
        pbar,
        score: combine(lambda, beta, pbar),
    })
}

/// β from the predictor on the candidate's own activations.
pub fn score_candidate(
    c: StepCandidate,
    predictor: &ConfidencePredictor,
    lambda: f64,
) -> Result<ScoredCandidate> {
    let beta = predictor.confidence(&c.activations)?;
    score_with_beta(c, beta, lambda)
}

/// Index of the highest score; equal scores go to the smaller text.
pub fn argmax_score(scored: &[ScoredCandidate]) -> Option<usize> {
    (0..scored.len()).reduce(|best, i| {
        let (a, b) = (&scored[best], &scored[i]);
        match b.score.total_cmp(&a.score) {
            std::cmp::Ordering::Greater => i,
            std::cmp::Ordering::Equal if b.candidate.text < a.candidate.text => i,
            _ => best,
        }
    })
}

/// Contents of the last `\boxed{...}`, trimmed.
pub fn extract_boxed_answer(text: &str) -> Result<Option<String>> {
    const OPEN: &str = "\\boxed{";
    let mut last = None;
    let mut from = 0;
    while let Some(rel) = text[from..].find(OPEN) {
        let start = from + rel;
        let body = start + OPEN.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, ch) in text[body..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(body + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let end = end.ok_or(Error::UnbalancedBraces { offset: start })?;
        last = Some(text[body..end].trim().to_string());
        from = end + 1;
    }
    Ok(last)
}

/// Most frequent non-empty answer; ties go to the smallest string.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers.iter().map(AsRef::as_ref).filter(|a| !a.is_empty()) {
        *counts.entry(a).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(a, _)| a.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    StepLimit,
    TokenBudget,
    NoCandidates,
}

/// One appended step. `beta` is absent for strategies that do not score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub text: String,
    pub beta: Option<f64>,
    pub pbar: f64,
    pub score: f64,
    pub candidates: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub corrected: bool,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub correction_failed: bool,
    #[serde(skip)]
    pub candidate: Option<StepCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub question: String,
    /// Exemplars followed by the question.
    pub context: String,
    pub steps: Vec<ChainStep>,
    pub finished: bool,
    pub final_answer: Option<String>,
    pub termination: Option<Termination>,
    pub tokens_used: usize,
}

impl ReasoningChain {
    pub fn new(question: &str, exemplars: &[String]) -> Self {
        let mut context = String::new();
        for e in exemplars {
            context.push_str(e);
            context.push_str("\n\n");
        }
        context.push_str(question);
        Self {
            question: question.to_string(),
            context,
            steps: Vec::new(),
            finished: false,
            final_answer: None,
            termination: None,
            tokens_used: 0,
        }
    }

    pub fn step_texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Context plus every step, each followed by the separator.
    pub fn text(&self, separator: &str) -> String {
        let mut s = self.context.clone();
        for step in &self.steps {
            s.push_str(&step.text);
            s.push_str(separator);
        }
        s
    }

    fn finish(&mut self, reason: Termination) {
        self.finished = true;
        self.termination = Some(reason);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub generation_calls: usize,
    pub candidates_generated: usize,
    pub duplicates_removed: usize,
    pub corrections: usize,
    pub correction_failures: usize,
    pub unbalanced_answers: usize,
    /// Answers of every sampled path, for self-consistency.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub path_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub answer: String,
    pub chain: ReasoningChain,
    pub diagnostics: Diagnostics,
}

struct Decoder<'a> {
    model: &'a dyn CognitiveModel,
    predictor: Option<&'a ConfidencePredictor>,
    params: &'a DecodeParams,
    diag: Diagnostics,
}

enum Picked {
    Scored(ScoredCandidate, usize),
    Plain(StepCandidate, usize),
}

impl<'a> Decoder<'a> {
    fn step_seed(&self, chain: &ReasoningChain, salt: u64) -> u64 {
        mix64(
            self.params.seed
                ^ mix64(chain.steps.len() as u64 + 1)
                ^ mix64(salt.wrapping_add(0x5EED)),
        )
    }

    fn generate(
        &mut self,
        text: &str,
        m: usize,
        budget: usize,
        temperature: Option<f64>,
        seed: u64,
    ) -> Result<Vec<StepCandidate>> {
        let ctx = self.model.encode(text)?;
        let set = self.model.generate_candidates(
            &ctx,
            m,
            &self.params.generation(seed, budget, temperature),
        )?;
        self.diag.generation_calls += 1;
        self.diag.candidates_generated += set.candidates.len();
        self.diag.duplicates_removed += set.duplicates_removed;
        Ok(set.candidates)
    }

    /// Sampling at rising temperatures until `m` distinct texts are found.
    fn generate_self_eval(
        &mut self,
        chain: &ReasoningChain,
        budget: usize,
    ) -> Result<Vec<StepCandidate>> {
        let text = chain.text(&self.params.step_separator);
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut last_err = None;
        for (i, &t) in self
            .params
            .self_eval_temperatures
            .clone()
            .iter()
            .enumerate()
        {
            match self.generate(
                &text,
                self.params.m,
                budget,
                Some(t),
                self.step_seed(chain, i as u64),
            ) {
                Ok(cands) => {
                    for c in cands {
                        if out.len() < self.params.m && seen.insert(c.text.clone()) {
                            out.push(c);
                        }
                    }
                }
                Err(Error::EmptyCandidates) => last_err = Some(Error::EmptyCandidates),
                Err(e) => return Err(e),
            }
            if out.len() >= self.params.m {
                break;
            }
        }
        if out.is_empty() {
            return Err(last_err.unwrap_or(Error::EmptyCandidates));
        }
        sort_candidates(&mut out);
        Ok(out)
    }

    fn beta(&self, chain: &ReasoningChain, c: &StepCandidate) -> Result<f64> {
        match self.params.strategy {
            Strategy::SelfEval => {
                let prefix = format!(
                    "{}{}",
                    chain.question,
                    chain.step_texts().join(&self.params.step_separator)
                );
                is_true_probability(self.model, &prefix, &c.text, &self.params.verification)
            }
            _ => {
                let predictor = self
                    .predictor
                    .ok_or_else(|| Error::config("this strategy needs a confidence predictor"))?;
                match self.params.beta_source {
                    BetaSource::Candidate => predictor.confidence(&c.activations),
                    BetaSource::Reframe => {
                        let prompt = format_cot(&chain.question, &chain.step_texts(), &c.text)?;
                        let acts = self.model.activations(&self.model.encode(&prompt)?)?;
                        predictor.confidence(&acts)
                    }
                }
            }
        }
    }

    fn score_all(
        &self,
        chain: &ReasoningChain,
        cands: Vec<StepCandidate>,
    ) -> Result<Vec<ScoredCandidate>> {
        cands
            .into_iter()
            .map(|c| {
                let beta = self.beta(chain, &c)?;
                score_with_beta(c, beta, self.params.lambda)
            })
            .collect()
    }

    /// Generate, score and pick one candidate for the next step.
    fn pick(
        &mut self,
        chain: &ReasoningChain,
        budget: usize,
        path: u64,
    ) -> Result<(Picked, bool, bool)> {
        let p = self.params;
        let text = chain.text(&p.step_separator);
        let seed = self.step_seed(chain, path);
        match p.strategy {
            Strategy::GreedyFewshot => {
                let mut c = self.generate(&text, 1, budget, None, seed)?;
                Ok((Picked::Plain(c.remove(0), 1), false, false))
            }
            Strategy::SelfConsistency => {
                let mut c =
                    self.generate(&text, 1, budget, Some(p.self_consistency_temperature), seed)?;
                Ok((Picked::Plain(c.remove(0), 1), false, false))
            }
            Strategy::RandomSelect => {
                let mut c = self.generate(&text, p.m, budget, p.candidate_temperature, seed)?;
                let n = c.len();
                let i = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xA11)).random_range(0..n);
                Ok((Picked::Plain(c.swap_remove(i), n), false, false))
            }
            Strategy::Guided | Strategy::SelfEval => {
                let cands = if p.strategy == Strategy::SelfEval {
                    self.generate_self_eval(chain, budget)?
                } else {
                    self.generate(&text, p.m, budget, p.candidate_temperature, seed)?
                };
                let n = cands.len();
                let mut scored = self.score_all(chain, cands)?;
                let (mut corrected, mut failed) = (false, false);
                if let Some(threshold) = p.correction_threshold {
                    let (s, c, f) = self.self_correct(chain, scored, threshold, budget)?;
                    scored = s;
                    corrected = c;
                    failed = f;
                }
                let best = argmax_score(&scored).expect("non-empty candidates");
                Ok((
                    Picked::Scored(scored.swap_remove(best), n),
                    corrected,
                    failed,
                ))
            }
        }
    }

    /// One regeneration pass when every score is below `threshold`; returns
    /// the pooled candidates and whether a correction happened or failed.
    fn self_correct(
        &mut self,
        chain: &ReasoningChain,
        scored: Vec<ScoredCandidate>,
        threshold: f64,
        budget: usize,
    ) -> Result<(Vec<ScoredCandidate>, bool, bool)> {
        let max = scored
            .iter()
            .map(|s| s.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if max >= threshold {
            return Ok((scored, false, false));
        }
        self.diag.corrections += 1;
        let text = format!(
            "{}{}",
            chain.text(&self.params.step_separator),
            self.params.correction_template
        );
        let seed = self.step_seed(chain, 0xC0);
        let regenerated = self
            .generate(
                &text,
                self.params.m,
                budget,
                self.params.candidate_temperature,
                seed,
            )
            .and_then(|c| self.score_all(chain, c));
        match regenerated {
            Ok(mut more) => {
                let mut pooled = scored;
                pooled.append(&mut more);
                Ok((pooled, true, false))
            }
            Err(Error::EmptyCandidates)
            | Err(Error::ReplayMiss { .. })
            | Err(Error::Unsupported(_)) => {
                self.diag.correction_failures += 1;
                Ok((scored, true, true))
            }
            Err(e) => Err(e),
        }
    }

    fn run_chain(&mut self, chain: &mut ReasoningChain, path: u64) -> Result<()> {
        while !chain.finished {
            self.advance(chain, path)?;
        }
        Ok(())
    }

    /// Append one step, or mark the chain finished when no step can be added.
    fn advance(&mut self, chain: &mut ReasoningChain, path: u64) -> Result<()> {
        let p = self.params;
        if chain.steps.len() >= p.max_steps {
            chain.finish(Termination::StepLimit);
            return Ok(());
        }
        let budget = p.max_new_tokens.saturating_sub(chain.tokens_used);
        if budget == 0 {
            chain.finish(Termination::TokenBudget);
            return Ok(());
        }
        let (picked, corrected, correction_failed) = match self.pick(chain, budget, path) {
            Ok(x) => x,
            Err(Error::EmptyCandidates) => {
                chain.finish(Termination::NoCandidates);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let step = match picked {
            Picked::Scored(s, n) => ChainStep {
                text: s.candidate.text.clone(),
                beta: Some(s.beta),
                pbar: s.pbar,
                score: s.score,
                candidates: n,
                corrected,
                correction_failed,
                candidate: Some(s.candidate),
            },
            Picked::Plain(c, n) => {
                let pbar = mean_logprob_score(&c)?;
                ChainStep {
                    text: c.text.clone(),
                    beta: None,
                    pbar,
                    score: pbar,
                    candidates: n,
                    corrected,
                    correction_failed,
                    candidate: Some(c),
                }
            }
        };
        chain.tokens_used += step
            .candidate
            .as_ref()
            .map_or(0, StepCandidate::token_count);
        let answer = extract_boxed_answer(&step.text);
        chain.steps.push(step);
        match answer {
            Ok(Some(a)) => {
                chain.final_answer = Some(a);
                chain.finish(Termination::Answer);
            }
            Ok(None) => {}
            Err(_) => self.diag.unbalanced_answers += 1,
        }
        if !chain.finished && chain.steps.len() >= p.max_steps {
            chain.finish(Termination::StepLimit);
        }
        Ok(())
    }
}

/// One step of confidence-guided decoding.
pub fn guided_step(
    model: &dyn CognitiveModel,
    predictor: &ConfidencePredictor,
    chain: &ReasoningChain,
    params: &DecodeParams,
) -> Result<ReasoningChain> {
    if chain.finished {
        return Err(Error::validation("chain is already finished"));
    }
    let params = DecodeParams {
        strategy: Strategy::Guided,
        ..params.clone()
    };
    params.validate()?;
    let mut dec = Decoder {
        model,
        predictor: Some(predictor),
        params: &params,
        diag: Diagnostics::default(),
    };
    let mut next = chain.clone();
    dec.advance(&mut next, 0)?;
    Ok(next)
}

pub fn decode(
    model: &dyn CognitiveModel,
    predictor: Option<&ConfidencePredictor>,
    question: &str,
    exemplars: &[String],
    params: &DecodeParams,
) -> Result<DecodeOutcome> {
    params.validate()?;
    if matches!(params.strategy, Strategy::Guided) && predictor.is_none() {
        return Err(Error::config(
            "guided decoding needs a confidence predictor",
        ));
    }
    if matches!(params.strategy, Strategy::Guided | Strategy::SelfEval) {
        if let Some(p) = predictor {
            p.selection.check_dims(&model.dims())?;
        }
    }
    let mut dec = Decoder {
        model,
        predictor,
        params,
        diag: Diagnostics::default(),
    };
    if params.strategy == Strategy::SelfConsistency {
        let mut paths = Vec::with_capacity(params.self_consistency_paths);
        for p in 0..params.self_consistency_paths {
            let mut chain = ReasoningChain::new(question, exemplars);
            dec.run_chain(&mut chain, p as u64 + 1)?;
            paths.push(chain);
        }
        let answers: Vec<String> = paths
            .iter()
            .map(|c| c.final_answer.clone().unwrap_or_default())
            .collect();
        let winner = majority_vote(&answers).unwrap_or_default();
        let chain = paths
            .iter()
            .position(|c| c.final_answer.as_deref() == Some(winner.as_str()))
            .map_or_else(|| paths[0].clone(), |i| paths[i].clone());
        let mut diagnostics = dec.diag;
        diagnostics.path_answers = answers;
        return Ok(DecodeOutcome {
            answer: winner,
            chain,
            diagnostics,
        });
    }
    let mut chain = ReasoningChain::new(question, exemplars);
    dec.run_chain(&mut chain, 0)?;
    Ok(DecodeOutcome {
        answer: chain.final_answer.clone().unwrap_or_default(),
        chain,
        diagnostics: dec.diag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub question_id: String,
    pub strategy: Strategy,
    pub params: DecodeParams,
    pub chain: Vec<ChainStep>,
    pub answer: String,
    pub termination: Option<Termination>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub question_id: String,
    pub strategy: Strategy,
    pub correct: bool,
    pub steps: usize,
    /// Seconds; only recorded when timing is requested.
    pub wall_time: Option<f64>,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("question_id,strategy,correct,steps,wall_time\n");
    for r in rows {
        let wall = r
            .wall_time
            .map_or_else(|| "NA".to_string(), |t| format!("{t:.6}"));
        s.push_str(&format!(
            "{},{},{},{},{wall}\n",
            r.question_id,
            r.strategy,
            u8::from(r.correct),
            r.steps
        ));
    }
    s
}

/// A question with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub id: String,
    pub question: String,
    pub answer: String,
}

/// Seeded arithmetic chains for the planted reasoner.
pub fn toy_benchmark(n: usize, min_ops: usize, max_ops: usize, seed: u64) -> Vec<BenchmarkTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = ToyTask::random(&mut rng, min_ops, max_ops);
            BenchmarkTask {
                id: format!("task-{i:04}"),
                question: t.question(),
                answer: t.answer().to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub strategy: Strategy,
    pub rows: Vec<ResultRow>,
    pub manifests: Vec<RunManifest>,
}

impl BenchmarkRun {
    pub fn accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.correct).count() as f64 / self.rows.len() as f64
    }
}

/// Decode every task independently; per-task seeds derive from `params.seed`.
pub fn run_benchmark(
    model: &dyn CognitiveModel,
    predictor: Option<&ConfidencePredictor>,
    tasks: &[BenchmarkTask],
    exemplars: &[String],
    params: &DecodeParams,
    exec: Execution,
    timings: bool,
) -> Result<BenchmarkRun> {
    params.validate()?;
    let indexed: Vec<(usize, &BenchmarkTask)> = tasks.iter().enumerate().collect();
    let results = exec.try_map(&indexed, |&(i, task)| -> Result<(ResultRow, RunManifest)> {
        let task_params = DecodeParams {
            seed: mix64(params.seed ^ mix64(i as u64 + 1)),
            ..params.clone()
        };
        let start = std::time::Instant::now();
        let out =
            decode(model, predictor, &task.question, exemplars, &task_params).map_err(|e| {
                Error::Record {
                    id: task.id.clone(),
                    source: Box::new(e),
                }
            })?;
        let wall = timings.then(|| start.elapsed().as_secs_f64());
        // empty answers count as incorrect
        let correct = !out.answer.is_empty() && out.answer == task.answer;
        Ok((
            ResultRow {
                question_id: task.id.clone(),
                strategy: params.strategy,
                correct,
                steps: out.chain.steps.len(),
                wall_time: wall,
            },
            RunManifest {
                question_id: task.id.clone(),
                strategy: params.strategy,
                params: task_params,
                answer: out.answer,
                termination: out.chain.termination,
                chain: out.chain.steps,
                diagnostics: out.diagnostics,
            },
        ))
    })?;
    let (rows, manifests) = results.into_iter().unzip();
    Ok(BenchmarkRun {
        strategy: params.strategy,
        rows,
        manifests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadActivations;

    fn cand(text: &str, probs: &[f64]) -> StepCandidate {
        StepCandidate {
            text: text.into(),
            token_ids: vec![],
            token_logprobs: probs.iter().map(|p| p.ln()).collect(),
            activations: HeadActivations::zeros(1, 1, 1),
        }
    }

    #[test]
    fn pbar_fixtures() {
        assert!((mean_logprob_score(&cand("a", &[0.5])).unwrap() - 0.5).abs() < 1e-15);
        assert!((mean_logprob_score(&cand("a", &[0.9, 0.4])).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(mean_logprob_score(&cand("a", &[1.0, 1.0])).unwrap(), 1.0);
        assert!(mean_logprob_score(&cand("a", &[])).is_err());
        let once = mean_logprob_score(&cand("a", &[0.3, 0.7])).unwrap();
        let twice = mean_logprob_score(&cand("a", &[0.3, 0.7, 0.3, 0.7])).unwrap();
        assert!((once - twice).abs() < 1e-15);
    }

    #[test]
    fn combined_score_fixture() {
        assert!((combine(0.5, 0.8, 0.6) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ties_break_on_text() {
        let s = |t: &str, score: f64| ScoredCandidate {
            candidate: cand(t, &[0.5]),
            beta: 0.0,
            pbar: 0.5,
            score,
        };
        assert_eq!(
            argmax_score(&[s("b", 0.5), s("a", 0.5), s("c", 0.4)]),
            Some(1)
        );
        assert_eq!(argmax_score(&[s("b", 0.5), s("a", 0.4)]), Some(0));
        assert_eq!(argmax_score(&[]), None);
    }

    #[test]
    fn boxed_answers() {
        assert_eq!(
            extract_boxed_answer("so \\boxed{42}").unwrap().as_deref(),
            Some("42")
        );
        assert_eq!(
            extract_boxed_answer("\\boxed{a} then \\boxed{b}")
                .unwrap()
                .as_deref(),
            Some("b")
        );
        assert_eq!(
            extract_boxed_answer("\\boxed{\\frac{1}{2}}")
                .unwrap()
                .as_deref(),
            Some("\\frac{1}{2}")
        );
        assert_eq!(
            extract_boxed_answer("Step 3 : \\boxed{ 9 }")
                .unwrap()
                .as_deref(),
            Some("9")
        );
        assert_eq!(extract_boxed_answer("no answer").unwrap(), None);
        assert!(matches!(
            extract_boxed_answer("x \\boxed{1 {2}"),
            Err(Error::UnbalancedBraces { offset: 2 })
        ));
    }

    #[test]
    fn votes() {
        assert_eq!(majority_vote(&["4", "4", "5"]).as_deref(), Some("4"));
        assert_eq!(majority_vote(&["5", "4"]).as_deref(), Some("4"));
        assert_eq!(majority_vote(&["", "", "7"]).as_deref(), Some("7"));
        assert_eq!(majority_vote::<&str>(&["", ""]), None);
    }

    #[test]
    fn params_validation() {
        assert!(DecodeParams::default().validate().is_ok());
        for bad in [
            DecodeParams {
                lambda: 1.5,
                ..Default::default()
            },
            DecodeParams {
                m: 0,
                ..Default::default()
            },
            DecodeParams {
                correction_threshold: Some(-0.1),
                ..Default::default()
            },
            DecodeParams {
                self_eval_temperatures: vec![],
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn csv_marks_missing_timings() {
        let rows = vec![ResultRow {
            question_id: "q".into(),
            strategy: Strategy::Guided,
            correct: true,
            steps: 3,
            wall_time: None,
        }];
        assert_eq!(
            results_csv(&rows),
            "question_id,strategy,correct,steps,wall_time\nq,guided,1,3,NA\n"
        );
    }
}
