//! Calibration metrics and untrained baseline confidence scorers.
//!
//! Bins are equal-width on `[0, 1]` and right-closed: bin `b` of `B` holds
//! confidences in `(b/B, (b+1)/B]`, with `0.0` going to the first bin.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CognitiveModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    confidences: Vec<f64>,
    labels: Vec<bool>,
}

impl PredictionSet {
    pub fn new(confidences: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if confidences.is_empty() {
            return Err(Error::validation("prediction set is empty"));
        }
        if confidences.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} confidences but {} labels",
                confidences.len(),
                labels.len()
            )));
        }
        if let Some(i) = confidences.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation(format!(
                "confidence {} at index {i} is outside [0, 1]",
                confidences[i]
            )));
        }
        Ok(Self {
            confidences,
            labels,
        })
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Upper edge of bin `b - 1`, i.e. `b / n_bins`.
pub fn bin_edge(b: usize, n_bins: usize) -> f64 {
    b as f64 / n_bins as f64
}

pub fn bin_index(p: f64, n_bins: usize) -> usize {
    let mut b = ((p * n_bins as f64).ceil() as usize)
        .saturating_sub(1)
        .min(n_bins - 1);
    // float rounding in p * B can land one bin off; settle against the edges
    while b > 0 && p <= bin_edge(b, n_bins) {
        b -= 1;
    }
    while b + 1 < n_bins && p > bin_edge(b + 1, n_bins) {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

fn check_bins(n_bins: usize) -> Result<()> {
    if n_bins == 0 {
        return Err(Error::validation("n_bins must be at least 1"));
    }
    Ok(())
}

/// Populated bins only, in ascending order.
pub fn reliability_curve(preds: &PredictionSet, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_bins(n_bins)?;
    let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
    for (&p, &y) in preds.confidences.iter().zip(&preds.labels) {
        let s = &mut sums[bin_index(p, n_bins)];
        s.0 += 1;
        s.1 += p;
        s.2 += usize::from(y);
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(b, (n, conf, pos))| ReliabilityBin {
            index: b,
            lower: bin_edge(b, n_bins),
            upper: bin_edge(b + 1, n_bins),
            midpoint: (b as f64 + 0.5) / n_bins as f64,
            confidence: conf / n as f64,
            accuracy: pos as f64 / n as f64,
            count: n,
        })
        .collect())
}

pub fn ece(preds: &PredictionSet, n_bins: usize) -> Result<f64> {
    let n = preds.len() as f64;
    Ok(reliability_curve(preds, n_bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn brier(preds: &PredictionSet) -> f64 {
    preds
        .confidences
        .iter()
        .zip(&preds.labels)
        .map(|(p, &y)| (p - f64::from(u8::from(y))).powi(2))
        .sum::<f64>()
        / preds.len() as f64
}

/// Probability that a random positive outranks a random negative, ties 0.5.
pub fn auc(preds: &PredictionSet) -> Result<f64> {
    let n_pos = preds.labels.iter().filter(|&&y| y).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(
            "AUC is undefined for single-class labels",
        ));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.confidences[a].total_cmp(&preds.confidences[b]));
    // Mann-Whitney U from midranks of tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds.confidences[order[j + 1]] == preds.confidences[order[i]]
        {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos = order[i..=j].iter().filter(|&&k| preds.labels[k]).count();
        rank_sum_pos += midrank * pos as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub n_bins: usize,
    pub ece: f64,
    pub brier: f64,
    pub auc: f64,
    pub bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn compute(preds: &PredictionSet, n_bins: usize) -> Result<Self> {
        Ok(Self {
            n: preds.len(),
            n_bins,
            ece: ece(preds, n_bins)?,
            brier: brier(preds),
            auc: auc(preds)?,
            bins: reliability_curve(preds, n_bins)?,
        })
    }
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut s = String::from("midpoint,confidence,accuracy,count\n");
    for b in bins {
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{}\n",
            b.midpoint, b.confidence, b.accuracy, b.count
        ));
    }
    s
}

pub fn write_reliability_csv(bins: &[ReliabilityBin], path: &Path) -> Result<()> {
    std::fs::write(path, reliability_csv(bins))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Likelihood {
    pub score: f64,
    /// Set when a token had zero probability or the product underflowed.
    pub underflow: bool,
}

/// Geometric mean of the answer's token probabilities given the question.
pub fn sequence_likelihood(
    model: &dyn CognitiveModel,
    question: &str,
    answer: &str,
) -> Result<Likelihood> {
    let context = model.encode(question)?;
    let answer_ids = model.tokenizer().encode(answer)?;
    if answer_ids.is_empty() {
        return Err(Error::validation("answer has no tokens"));
    }
    let mut seq = context;
    let mut sum = 0.0;
    let mut zero = false;
    for &t in &answer_ids {
        let probs = model.next_token_probs(&seq)?;
        let p = *probs
            .get(t as usize)
            .ok_or_else(|| Error::validation(format!("token {t} outside vocabulary")))?;
        if p <= 0.0 {
            zero = true;
        } else {
            sum += p.ln();
        }
        seq = seq.extended(&[t]);
    }
    let score = (sum / answer_ids.len() as f64).exp();
    if zero || score == 0.0 {
        return Ok(Likelihood {
            score: f64::MIN_POSITIVE,
            underflow: true,
        });
    }
    Ok(Likelihood {
        score,
        underflow: false,
    })
}

/// Prompt asking the model to judge an answer, read off at one target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationTemplate {
    /// Must contain `{question}` and `{answer}`.
    pub text: String,
    pub target: String,
}

impl Default for VerificationTemplate {
    fn default() -> Self {
        Self {
            text: "Question: {question}\nAnswer: {answer}\nVerdict:".into(),
            target: "True".into(),
        }
    }
}

impl VerificationTemplate {
    pub fn render(&self, question: &str, answer: &str) -> Result<String> {
        if !self.text.contains("{question}") || !self.text.contains("{answer}") {
            return Err(Error::config(
                "verification template needs {question} and {answer} slots",
            ));
        }
        Ok(self
            .text
            .replace("{question}", question)
            .replace("{answer}", answer))
    }
}

/// Probability of the template's target token right after the rendered prompt.
pub fn is_true_probability(
    model: &dyn CognitiveModel,
    question: &str,
    answer: &str,
    template: &VerificationTemplate,
) -> Result<f64> {
    let target = model
        .tokenizer()
        .token_id(&template.target)
        .filter(|&id| (id as usize) < model.dims().vocab_size)
        .ok_or_else(|| {
            Error::config(format!(
                "target token {:?} is not in the vocabulary",
                template.target
            ))
        })?;
    let tokens = model.encode(&template.render(question, answer)?)?;
    Ok(model.next_token_probs(&tokens)?[target as usize])
}
