//! Binary-labeled records, probing prompt templates and seeded splits.
//!
//! Records are stored as JSON-lines, one object per line:
//!
//! ```text
//! {"id": "q1-1", "question": "...", "answer": "...", "label": 1}
//! {"question": "...", "previous_steps": ["..."], "step": "...", "label": 0}
//! ```
//!
//! `id` is optional; records without one are identified by their line
//! number.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COT_QUESTION: &str = "\n\nWhat is the next step of reasoning?\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledAnswer {
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledStep {
    pub id: Option<String>,
    pub question: String,
    pub previous_steps: Vec<String>,
    pub step: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Answer(LabeledAnswer),
    Step(LabeledStep),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `Question: {q}\nAnswer: {a}`
    NonCot,
    /// `{q}{previous steps}\n\nWhat is the next step of reasoning?\n{step}`
    Cot,
}

/// `"Question: " + q + "\n" + "Answer: " + a`.
pub fn format_noncot(question: &str, answer: &str) -> Result<String> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::validation("question and answer must be non-empty"));
    }
    Ok(format!("Question: {question}\nAnswer: {answer}"))
}

/// Inverse of [`format_noncot`] for questions without `"\nAnswer: "` in them.
pub fn parse_noncot(prompt: &str) -> Option<(&str, &str)> {
    prompt.strip_prefix("Question: ")?.split_once("\nAnswer: ")
}

/// Question, newline-joined previous steps, the interrogative block, then the step.
pub fn format_cot<S: AsRef<str>>(
    question: &str,
    previous_steps: &[S],
    step: &str,
) -> Result<String> {
    if step.is_empty() {
        return Err(Error::validation("step must be non-empty"));
    }
    let prev: Vec<&str> = previous_steps.iter().map(AsRef::as_ref).collect();
    Ok(format!("{question}{}{COT_QUESTION}{step}", prev.join("\n")))
}

impl Record {
    pub fn id(&self) -> Option<&str> {
        match self {
            Record::Answer(a) => a.id.as_deref(),
            Record::Step(s) => s.id.as_deref(),
        }
    }

    fn set_id(&mut self, id: String) {
        match self {
            Record::Answer(a) => a.id = Some(id),
            Record::Step(s) => s.id = Some(id),
        }
    }

    pub fn question(&self) -> &str {
        match self {
            Record::Answer(a) => &a.question,
            Record::Step(s) => &s.question,
        }
    }

    pub fn label(&self) -> bool {
        match self {
            Record::Answer(a) => a.label,
            Record::Step(s) => s.label,
        }
    }

    pub fn template(&self) -> Template {
        match self {
            Record::Answer(_) => Template::NonCot,
            Record::Step(_) => Template::Cot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Record::Answer(a) => {
                if a.question.is_empty() || a.answer.is_empty() {
                    return Err(Error::validation("question and answer must be non-empty"));
                }
            }
            Record::Step(s) => {
                if s.step.is_empty() {
                    return Err(Error::validation("step must be non-empty"));
                }
            }
        }
        Ok(())
    }

    /// Prompt in the record's own template.
    pub fn render(&self) -> String {
        self.render_with(self.template())
            .expect("record matches its own template")
    }

    pub fn render_with(&self, template: Template) -> Result<String> {
        match (self, template) {
            (Record::Answer(a), Template::NonCot) => format_noncot(&a.question, &a.answer),
            (Record::Step(s), Template::Cot) => format_cot(&s.question, &s.previous_steps, &s.step),
            (_, t) => Err(Error::validation(format!(
                "record {} cannot be rendered with the {t:?} template",
                self.id().unwrap_or("?")
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    previous_steps: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<String>,
    label: u8,
}

impl TryFrom<RawRecord> for Record {
    type Error = Error;

    fn try_from(raw: RawRecord) -> Result<Self> {
        let label = match raw.label {
            0 => false,
            1 => true,
            other => {
                return Err(Error::validation(format!(
                    "label must be 0 or 1, got {other}"
                )))
            }
        };
        let record = match (raw.answer, raw.step) {
            (Some(answer), None) => {
                if raw.previous_steps.is_some() {
                    return Err(Error::validation("previous_steps is only valid with step"));
                }
                Record::Answer(LabeledAnswer {
                    id: raw.id,
                    question: raw.question,
                    answer,
                    label,
                })
            }
            (None, Some(step)) => Record::Step(LabeledStep {
                id: raw.id,
                question: raw.question,
                previous_steps: raw.previous_steps.unwrap_or_default(),
                step,
                label,
            }),
            _ => {
                return Err(Error::validation(
                    "exactly one of answer or step is required",
                ))
            }
        };
        record.validate()?;
        Ok(record)
    }
}

impl From<&Record> for RawRecord {
    fn from(r: &Record) -> Self {
        match r {
            Record::Answer(a) => RawRecord {
                id: a.id.clone(),
                question: a.question.clone(),
                answer: Some(a.answer.clone()),
                previous_steps: None,
                step: None,
                label: a.label.into(),
            },
            Record::Step(s) => RawRecord {
                id: s.id.clone(),
                question: s.question.clone(),
                answer: None,
                previous_steps: Some(s.previous_steps.clone()),
                step: Some(s.step.clone()),
                label: s.label.into(),
            },
        }
    }
}

pub fn parse_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let mut record = Record::try_from(raw).map_err(|e| at(e.to_string()))?;
        let id = match record.id() {
            Some(id) => id.to_string(),
            None => {
                let id = format!("line-{lineno}");
                record.set_id(id.clone());
                id
            }
        };
        if !ids.insert(id.clone()) {
            return Err(at(format!("duplicate example id {id:?}")));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_records(std::io::BufReader::new(f), path)
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &RawRecord::from(r))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing records", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation(
                "split ratios must be finite and non-negative",
            ));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split ratios must sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub negative: usize,
    pub positive: usize,
}

impl LabelCounts {
    pub fn of(records: &[Record]) -> Self {
        let positive = records.iter().filter(|r| r.label()).count();
        Self {
            negative: records.len() - positive,
            positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub balanced: bool,
    pub counts: SplitCounts,
    pub labels: BTreeMap<String, LabelCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Record>,
    pub validation: Vec<Record>,
    pub test: Vec<Record>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub balanced: bool,
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        let labels = [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), LabelCounts::of(v)))
        .collect();
        SplitManifest {
            seed: self.seed,
            ratios: self.ratios,
            balanced: self.balanced,
            counts: SplitCounts {
                train: self.train.len(),
                validation: self.validation.len(),
                test: self.test.len(),
            },
            labels,
        }
    }
}

/// Seeded partition into train/validation/test.
///
/// With `balanced`, every question must contribute both labels; one positive
/// and one negative record are kept per question and a question's records
/// always land in the same split.
pub fn split_records(
    records: Vec<Record>,
    ratios: SplitRatios,
    seed: u64,
    balanced: bool,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<Record>> = if balanced {
        let mut order: Vec<String> = Vec::new();
        let mut by_q: HashMap<String, (Vec<Record>, Vec<Record>)> = HashMap::new();
        for r in records {
            let entry = by_q.entry(r.question().to_string()).or_insert_with(|| {
                order.push(r.question().to_string());
                Default::default()
            });
            if r.label() {
                entry.0.push(r);
            } else {
                entry.1.push(r);
            }
        }
        let mut groups = Vec::with_capacity(order.len());
        for q in order {
            let (mut pos, mut neg) = by_q.remove(&q).expect("question was grouped");
            if pos.is_empty() || neg.is_empty() {
                return Err(Error::validation(format!(
                    "question {:?} does not contribute both labels",
                    truncate(&q, 60)
                )));
            }
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            groups.push(vec![pos.swap_remove(0), neg.swap_remove(0)]);
        }
        groups
    } else {
        records.into_iter().map(|r| vec![r]).collect()
    };
    groups.shuffle(&mut rng);

    let n = groups.len();
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.validation * n as f64).round() as usize).min(n - n_train);
    let mut iter = groups.into_iter();
    let take = |iter: &mut std::vec::IntoIter<Vec<Record>>, k: usize| -> Vec<Record> {
        iter.by_ref().take(k).flatten().collect()
    };
    let train = take(&mut iter, n_train);
    let validation = take(&mut iter, n_val);
    let test = iter.flatten().collect();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
        ratios,
        balanced,
    })
}

pub fn load_and_split(
    path: &Path,
    ratios: SplitRatios,
    seed: u64,
    balanced: bool,
) -> Result<DatasetSplit> {
    split_records(load_records(path)?, ratios, seed, balanced)
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
