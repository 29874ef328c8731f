//! A cognitive model served from recorded traces.
//!
//! Text is tokenized as raw UTF-8 bytes, so a token sequence decodes back to
//! the exact recorded context string. Candidate sets are looked up by the
//! SHA-256 of that string; candidate activations are also reachable through
//! [`CognitiveModel::activations`] on `context + candidate text`. Anything
//! not recorded is a [`Error::ReplayMiss`]; next-token distributions are not
//! recorded at all and are refused.

use std::collections::HashMap;
use std::path::Path;

use super::beam::sort_candidates;
use super::trace::{context_hash, read_replay_file, read_trace_file, ReplayLine, Trace};
use super::{
    ByteTokenizer, CandidateSet, CognitiveModel, ForwardOutput, GenerationParams, HeadActivations,
    ModelDims, StepCandidate, TokenSeq, Tokenizer,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReplayModel {
    dims: ModelDims,
    trace: Option<Trace>,
    candidates: HashMap<String, Vec<StepCandidate>>,
    activations: HashMap<String, HeadActivations>,
    tokenizer: ByteTokenizer,
}

pub fn replay_model(trace_path: &Path, replay_path: &Path) -> Result<ReplayModel> {
    let trace = read_trace_file(trace_path)?;
    let lines = read_replay_file(replay_path)?;
    let dims = trace.header.dims()?;
    ReplayModel::new(dims, Some(trace), lines)
}

impl ReplayModel {
    pub fn new(dims: ModelDims, trace: Option<Trace>, lines: Vec<ReplayLine>) -> Result<Self> {
        if let Some(t) = &trace {
            let h = &t.header;
            if (h.n_layers, h.n_heads, h.d_head) != (dims.n_layers, dims.n_heads, dims.d_head) {
                return Err(Error::Format {
                    offset: 12,
                    message: "trace header dims differ from replay dims".into(),
                });
            }
        }
        let mut candidates = HashMap::new();
        let mut activations = HashMap::new();
        let expected = dims.n_layers * dims.n_heads * dims.d_head;
        for (lineno, line) in lines.into_iter().enumerate() {
            let mut set = Vec::with_capacity(line.candidates.len());
            for (ci, c) in line.candidates.into_iter().enumerate() {
                let bad = |msg: String| Error::Parse {
                    path: "<replay>".into(),
                    line: lineno + 1,
                    message: format!("candidate {ci}: {msg}"),
                };
                if c.activations.len() != expected {
                    return Err(bad(format!(
                        "{} activations, header dims need {expected}",
                        c.activations.len()
                    )));
                }
                if c.token_logprobs.is_empty()
                    || c.token_logprobs
                        .iter()
                        .any(|lp| !lp.is_finite() || *lp > 0.0)
                {
                    return Err(bad("token log-probabilities must be finite and <= 0".into()));
                }
                let token_ids = c.token_ids.unwrap_or_default();
                if !token_ids.is_empty() && token_ids.len() != c.token_logprobs.len() {
                    return Err(bad("token_ids and token_logprobs differ in length".into()));
                }
                let acts = HeadActivations::from_f32(&dims, &c.activations)
                    .map_err(|e| bad(e.to_string()))?;
                set.push(StepCandidate {
                    text: c.text,
                    token_ids,
                    token_logprobs: c.token_logprobs,
                    activations: acts,
                });
            }
            if candidates
                .insert(line.context_sha256.clone(), set)
                .is_some()
            {
                return Err(Error::Parse {
                    path: "<replay>".into(),
                    line: lineno + 1,
                    message: format!("context {} recorded twice", line.context_sha256),
                });
            }
        }
        // keyed by hash(context) + candidate text; contexts are only known by hash
        for (hash, set) in &candidates {
            for c in set {
                activations.insert(format!("{hash}\u{0}{}", c.text), c.activations.clone());
            }
        }
        Ok(Self {
            dims,
            trace,
            candidates,
            activations,
            tokenizer: ByteTokenizer,
        })
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn contexts(&self) -> usize {
        self.candidates.len()
    }

    fn text(&self, tokens: &TokenSeq) -> String {
        self.tokenizer.decode(tokens.as_slice())
    }

    /// Final-token activations of `candidate` appended to `context`.
    pub fn candidate_activations(
        &self,
        context: &str,
        candidate: &str,
    ) -> Result<&HeadActivations> {
        let hash = context_hash(context);
        self.activations
            .get(&format!("{hash}\u{0}{candidate}"))
            .ok_or(Error::ReplayMiss {
                context_hash: context_hash(&format!("{context}{candidate}")),
            })
    }
}

impl CognitiveModel for ReplayModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn forward(&self, _tokens: &TokenSeq) -> Result<ForwardOutput> {
        Err(Error::Unsupported(
            "replay traces carry no next-token distributions".into(),
        ))
    }

    fn activations(&self, tokens: &TokenSeq) -> Result<HeadActivations> {
        let text = self.text(tokens);
        // try every split point where the prefix is a recorded context
        for (i, _) in text.char_indices().skip(1) {
            let (ctx, cand) = text.split_at(i);
            if let Ok(a) = self.candidate_activations(ctx, cand) {
                return Ok(a.clone());
            }
        }
        Err(Error::ReplayMiss {
            context_hash: context_hash(&text),
        })
    }

    fn generate_candidates(
        &self,
        context: &TokenSeq,
        m: usize,
        _params: &GenerationParams,
    ) -> Result<CandidateSet> {
        if m == 0 {
            return Err(Error::validation("candidate count m must be at least 1"));
        }
        let hash = context_hash(&self.text(context));
        let recorded = self.candidates.get(&hash).ok_or(Error::ReplayMiss {
            context_hash: hash.clone(),
        })?;
        let mut all = recorded.clone();
        sort_candidates(&mut all);
        let mut seen = std::collections::HashSet::new();
        let total = all.len();
        let mut out: Vec<StepCandidate> = all
            .into_iter()
            .filter(|c| seen.insert(c.text.clone()))
            .collect();
        let duplicates_removed = total - out.len();
        if out.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        out.truncate(m);
        Ok(CandidateSet {
            candidates: out,
            requested: m,
            duplicates_removed,
        })
    }

    fn encode(&self, text: &str) -> Result<TokenSeq> {
        TokenSeq::new(self.tokenizer.encode(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::trace::ReplayCandidate;

    fn dims() -> ModelDims {
        ModelDims::new(1, 2, 2, 257).unwrap()
    }

    fn cand(text: &str, lp: f64, a: f32) -> ReplayCandidate {
        ReplayCandidate {
            text: text.into(),
            token_logprobs: vec![lp, lp],
            activations: vec![a; 4],
            token_ids: None,
            truncated: false,
        }
    }

    fn model() -> ReplayModel {
        let lines = vec![ReplayLine {
            context_sha256: context_hash("Q\n"),
            candidates: vec![
                cand("A", -0.5, 1.0),
                cand("B", -0.1, 2.0),
                cand("A", -0.2, 3.0),
            ],
        }];
        ReplayModel::new(dims(), None, lines).unwrap()
    }

    #[test]
    fn serves_recorded_candidates_in_order() {
        let m = model();
        let ctx = m.encode("Q\n").unwrap();
        let set = m
            .generate_candidates(&ctx, 3, &GenerationParams::default())
            .unwrap();
        let texts: Vec<_> = set.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["B", "A"]);
        assert_eq!(set.duplicates_removed, 1);
        let a = m.activations(&m.encode("Q\nB").unwrap()).unwrap();
        assert_eq!(a.values(), &[2.0; 4]);
    }

    #[test]
    fn misses_are_explicit() {
        let m = model();
        let ctx = m.encode("unknown").unwrap();
        match m.generate_candidates(&ctx, 1, &GenerationParams::default()) {
            Err(Error::ReplayMiss { context_hash: h }) => assert_eq!(h, context_hash("unknown")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(m.activations(&ctx), Err(Error::ReplayMiss { .. })));
        assert!(matches!(m.forward(&ctx), Err(Error::Unsupported(_))));
    }

    #[test]
    fn wrong_activation_width_is_rejected() {
        let mut bad = cand("A", -0.1, 1.0);
        bad.activations.pop();
        let lines = vec![ReplayLine {
            context_sha256: context_hash("Q"),
            candidates: vec![bad],
        }];
        assert!(matches!(
            ReplayModel::new(dims(), None, lines),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
