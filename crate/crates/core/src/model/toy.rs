//! A toy multi-step arithmetic language used by the planted-signal model.
//!
//! A task reads `start 3 add 4 times 2` and is solved by one step per
//! operation: `Step 1 : 7`, then a final `Step 2 : \boxed{ 14 }`. All
//! arithmetic is modulo [`MODULUS`]. The parser recovers the task and every
//! value claim from any token sequence, which makes ground truth decidable
//! for prompts in either probing template and for decoding contexts alike.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, WordVocab};
use crate::dataset::{LabeledAnswer, LabeledStep, Record};
use crate::error::Result;

pub const MODULUS: u32 = 20;

pub const BOXED_OPEN: &str = "\\boxed{";
pub const BOXED_CLOSE: &str = "}";
pub const VERDICT: &str = "Verdict:";
pub const TRUE_TOKEN: &str = "True";
pub const FALSE_TOKEN: &str = "False";

const KEYWORDS: &[&str] = &[
    "start",
    "add",
    "sub",
    "times",
    "Step",
    ":",
    BOXED_OPEN,
    BOXED_CLOSE,
    "Question:",
    "Answer:",
    VERDICT,
    TRUE_TOKEN,
    FALSE_TOKEN,
    "What",
    "is",
    "the",
    "next",
    "step",
    "of",
    "reasoning?",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Times,
}

impl Op {
    pub fn word(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Times => "times",
        }
    }

    pub fn apply(self, acc: u32, operand: u32) -> u32 {
        match self {
            Op::Add => (acc + operand) % MODULUS,
            Op::Sub => (acc + MODULUS - operand % MODULUS) % MODULUS,
            Op::Times => (acc * operand) % MODULUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub start: u32,
    pub ops: Vec<(Op, u32)>,
}

impl ToyTask {
    pub fn random(rng: &mut impl Rng, min_ops: usize, max_ops: usize) -> Self {
        let n = rng.random_range(min_ops..=max_ops);
        let ops = (0..n)
            .map(|_| {
                let op = match rng.random_range(0..3) {
                    0 => Op::Add,
                    1 => Op::Sub,
                    _ => Op::Times,
                };
                let operand = match op {
                    Op::Times => rng.random_range(2..6),
                    _ => rng.random_range(1..10),
                };
                (op, operand)
            })
            .collect();
        Self {
            start: rng.random_range(0..MODULUS),
            ops,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.ops.len()
    }

    /// Question text; always ends with a newline so steps can follow directly.
    pub fn question(&self) -> String {
        let mut q = format!("start {}", self.start);
        for (op, n) in &self.ops {
            q.push_str(&format!(" {} {}", op.word(), n));
        }
        q.push('\n');
        q
    }

    /// Correct value after each step.
    pub fn values(&self) -> Vec<u32> {
        self.ops
            .iter()
            .scan(self.start, |acc, &(op, n)| {
                *acc = op.apply(*acc, n);
                Some(*acc)
            })
            .collect()
    }

    pub fn answer(&self) -> u32 {
        self.values().last().copied().unwrap_or(self.start)
    }

    /// Rendered text of step `index` (1-based) claiming `value`.
    pub fn step_text(&self, index: usize, value: u32) -> String {
        if index == self.n_steps() {
            format!("Step {index} : {BOXED_OPEN} {value} {BOXED_CLOSE}")
        } else {
            format!("Step {index} : {value}")
        }
    }

    pub fn solution_steps(&self) -> Vec<String> {
        self.values()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.step_text(i + 1, v))
            .collect()
    }
}

/// A plausible wrong value near `correct`.
pub fn near_miss(rng: &mut impl Rng, correct: u32) -> u32 {
    let offset = [1, MODULUS - 1, 2, MODULUS - 2][rng.random_range(0..4)];
    (correct + offset) % MODULUS
}

pub fn vocab_words() -> Vec<String> {
    let mut words: Vec<String> = KEYWORDS.iter().map(|s| s.to_string()).collect();
    words.extend((0..MODULUS).map(|n| n.to_string()));
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Claim {
    /// Step index for `Step i : v` claims; `None` for `Answer: v`.
    pub step: Option<usize>,
    pub value: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Parsed {
    pub task: Option<ToyTask>,
    pub claims: Vec<Claim>,
}

/// Resolved ids for the toy language inside a [`WordVocab`].
#[derive(Debug, Clone)]
pub struct ToyLanguage {
    pub vocab: WordVocab,
    pub start: u32,
    pub add: u32,
    pub sub: u32,
    pub times: u32,
    pub step: u32,
    pub colon: u32,
    pub boxed_open: u32,
    pub boxed_close: u32,
    pub answer: u32,
    pub verdict: u32,
    pub true_token: u32,
    pub false_token: u32,
    pub newline: u32,
    pub eos: u32,
    numbers: Vec<u32>,
}

impl ToyLanguage {
    /// Toy vocabulary padded with filler words up to `vocab_size`.
    pub fn new(vocab_size: usize) -> Result<Self> {
        let mut words = vocab_words();
        let base = WordVocab::new(words.clone())?.vocab_size();
        if vocab_size < base {
            return Err(crate::Error::config(format!(
                "toy language needs vocab_size >= {base}, got {vocab_size}"
            )));
        }
        words.extend((0..vocab_size - base).map(|i| format!("<extra{i}>")));
        let vocab = WordVocab::new(words)?;
        let id = |w: &str| vocab.token_id(w).expect("toy keyword in vocab");
        Ok(Self {
            start: id("start"),
            add: id("add"),
            sub: id("sub"),
            times: id("times"),
            step: id("Step"),
            colon: id(":"),
            boxed_open: id(BOXED_OPEN),
            boxed_close: id(BOXED_CLOSE),
            answer: id("Answer:"),
            verdict: id(VERDICT),
            true_token: id(TRUE_TOKEN),
            false_token: id(FALSE_TOKEN),
            newline: vocab.newline(),
            eos: vocab.eos().expect("word vocab has eos"),
            numbers: (0..MODULUS).map(|n| id(&n.to_string())).collect(),
            vocab,
        })
    }

    pub fn number_id(&self, n: u32) -> u32 {
        self.numbers[(n % MODULUS) as usize]
    }

    pub fn number_value(&self, id: u32) -> Option<u32> {
        self.numbers.iter().position(|&x| x == id).map(|n| n as u32)
    }

    fn op(&self, id: u32) -> Option<Op> {
        match id {
            x if x == self.add => Some(Op::Add),
            x if x == self.sub => Some(Op::Sub),
            x if x == self.times => Some(Op::Times),
            _ => None,
        }
    }

    pub fn parse(&self, tokens: &[u32]) -> Parsed {
        let mut parsed = Parsed::default();
        let num = |i: usize| tokens.get(i).and_then(|&t| self.number_value(t));

        if let Some(pos) = tokens.iter().position(|&t| t == self.start) {
            if let Some(start) = num(pos + 1) {
                let mut ops = Vec::new();
                let mut i = pos + 2;
                while let (Some(op), Some(n)) =
                    (tokens.get(i).and_then(|&t| self.op(t)), num(i + 1))
                {
                    ops.push((op, n));
                    i += 2;
                }
                parsed.task = Some(ToyTask { start, ops });
            }
        }

        let mut i = 0;
        while i < tokens.len() {
            let t = tokens[i];
            if t == self.step && tokens.get(i + 2) == Some(&self.colon) {
                if let Some(index) = num(i + 1) {
                    if let Some(v) = num(i + 3) {
                        parsed.claims.push(Claim {
                            step: Some(index as usize),
                            value: v,
                        });
                        i += 4;
                        continue;
                    }
                    if tokens.get(i + 3) == Some(&self.boxed_open) {
                        if let Some(v) = num(i + 4) {
                            parsed.claims.push(Claim {
                                step: Some(index as usize),
                                value: v,
                            });
                            i += 5;
                            continue;
                        }
                    }
                }
            } else if t == self.answer {
                if let Some(v) = num(i + 1) {
                    parsed.claims.push(Claim {
                        step: None,
                        value: v,
                    });
                    i += 2;
                    continue;
                }
            }
            i += 1;
        }
        parsed
    }

    /// Whether every value claimed in `tokens` is correct; `None` when the
    /// sequence holds no task or no claims.
    pub fn truth(&self, tokens: &[u32]) -> Option<bool> {
        let parsed = self.parse(tokens);
        let task = parsed.task?;
        if parsed.claims.is_empty() {
            return None;
        }
        let values = task.values();
        let ok = parsed.claims.iter().all(|c| match c.step {
            Some(i) => i >= 1 && i <= values.len() && values[i - 1] == c.value,
            None => c.value == task.answer(),
        });
        Some(ok)
    }
}

/// Up to `n` tasks with pairwise distinct questions; fewer only when the
/// task space is nearly exhausted.
pub fn distinct_tasks(
    rng: &mut impl Rng,
    n: usize,
    min_ops: usize,
    max_ops: usize,
) -> Vec<ToyTask> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < 1000 * (n + 1) {
        attempts += 1;
        let task = ToyTask::random(rng, min_ops, max_ops);
        if seen.insert(task.question()) {
            out.push(task);
        }
    }
    out
}

/// One correct and one incorrect answer per generated question.
pub fn noncot_records(
    rng: &mut impl Rng,
    n_questions: usize,
    min_ops: usize,
    max_ops: usize,
) -> Vec<Record> {
    let mut out = Vec::with_capacity(2 * n_questions);
    for (q, task) in distinct_tasks(rng, n_questions, min_ops, max_ops)
        .into_iter()
        .enumerate()
    {
        let question = task.question();
        let answer = task.answer();
        let wrong = near_miss(rng, answer);
        for (label, value) in [(true, answer), (false, wrong)] {
            out.push(Record::Answer(LabeledAnswer {
                id: Some(format!("q{q}-{}", u8::from(label))),
                question: question.clone(),
                answer: value.to_string(),
                label,
            }));
        }
    }
    out
}

/// One correct and one incorrect next step per generated question, at a
/// random depth with correct previous steps.
pub fn cot_records(
    rng: &mut impl Rng,
    n_questions: usize,
    min_ops: usize,
    max_ops: usize,
) -> Vec<Record> {
    let mut out = Vec::with_capacity(2 * n_questions);
    for (q, task) in distinct_tasks(rng, n_questions, min_ops, max_ops)
        .into_iter()
        .enumerate()
    {
        let steps = task.solution_steps();
        let values = task.values();
        let k = rng.random_range(1..=task.n_steps());
        let wrong = near_miss(rng, values[k - 1]);
        for (label, step) in [
            (true, steps[k - 1].clone()),
            (false, task.step_text(k, wrong)),
        ] {
            out.push(Record::Step(LabeledStep {
                id: Some(format!("q{q}-{}", u8::from(label))),
                question: task.question(),
                previous_steps: steps[..k - 1].to_vec(),
                step,
                label,
            }));
        }
    }
    out
}
