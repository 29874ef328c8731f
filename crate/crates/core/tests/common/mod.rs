//! Independent reference implementations and shared fixtures.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use veritas::dataset::{split_records, DatasetSplit, Record, SplitRatios};
use veritas::decoding::DecodeParams;
use veritas::model::planted::PlantedConfig;
use veritas::model::toy::{cot_records, noncot_records};
use veritas::model::trace::{ReplayBuilder, ReplayCandidate};
use veritas::model::{HeadCoord, ModelDims, PlantedSignalModel, ReplayModel, TinyTransformer};
use veritas::predictor::{
    compute_soft_targets, train_ece, train_mse, ConfidencePredictor, LabeledFeatures, LossKind,
    TrainHyper, TrainingMeta,
};
use veritas::probing::{
    collect_activations, fit_probe_grid, select_top_k, HeadSelection, ProbeGrid, ProbeHyper,
};
use veritas::Execution;

// ---------------------------------------------------------------- metrics

/// ECE by scanning every bin over every example.
pub fn naive_ece(conf: &[f64], labels: &[bool], n_bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let (mut count, mut sum_conf, mut sum_acc) = (0.0, 0.0, 0.0);
        for (&p, &y) in conf.iter().zip(labels) {
            let inside = (p > lo && p <= hi) || (b == 0 && p == 0.0);
            if inside {
                count += 1.0;
                sum_conf += p;
                sum_acc += if y { 1.0 } else { 0.0 };
            }
        }
        if count > 0.0 {
            total += count / n * (sum_acc / count - sum_conf / count).abs();
        }
    }
    total
}

pub fn naive_brier(conf: &[f64], labels: &[bool]) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in conf.iter().zip(labels) {
        let t = if y { 1.0 } else { 0.0 };
        s += (p - t) * (p - t);
    }
    s / conf.len() as f64
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn naive_auc(conf: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..conf.len() {
        for j in 0..conf.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if conf[i] > conf[j] {
                    wins += 1.0;
                } else if conf[i] == conf[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------- forward

fn naive_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) * inv * gain[i] + bias[i])
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `y[r] = sum_c w[r][c] * x[c]` with explicit loops.
fn matvec(w: &ndarray::Array2<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.dim();
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w[[r, c]] * x[c];
        }
        y[r] = acc;
    }
    y
}

pub struct NaiveOutput {
    pub probs: Vec<f64>,
    /// `[layer][head][d]` flattened.
    pub activations: Vec<f64>,
    /// `attention[layer][head][i][j]`
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Token-by-token loop implementation of the pre-norm decoder block.
pub fn naive_forward(model: &TinyTransformer, tokens: &[u32]) -> NaiveOutput {
    let w = model.weights();
    let dims = model.config().dims;
    let (n, dh, dm) = (tokens.len(), dims.d_head, dims.d_model());
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            (0..dm)
                .map(|c| w.token_embedding[[tokens[p] as usize, c]] + w.position_embedding[[p, c]])
                .collect()
        })
        .collect();
    let mut activations = Vec::new();
    let mut attention = Vec::new();
    for layer in &w.layers {
        let g1 = layer.ln1_gain.to_vec();
        let b1 = layer.ln1_bias.to_vec();
        let xn: Vec<Vec<f64>> = x.iter().map(|r| naive_layer_norm(r, &g1, &b1)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&layer.w_q, r)).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&layer.w_k, r)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|r| matvec(&layer.w_v, r)).collect();
        let mut mixed = vec![vec![0.0; dims.n_heads * dh]; n];
        let mut layer_attn = Vec::new();
        for h in 0..dims.n_heads {
            let mut head_attn = Vec::new();
            for i in 0..n {
                let mut scores = vec![0.0; n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[i][h * dh + d] * k[j][h * dh + d];
                    }
                    scores[j] = dot / (dh as f64).sqrt();
                    max = max.max(scores[j]);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in scores.iter_mut().take(i + 1) {
                    *s /= z;
                }
                for j in 0..=i {
                    for d in 0..dh {
                        mixed[i][h * dh + d] += scores[j] * v[j][h * dh + d];
                    }
                }
                head_attn.push(scores);
            }
            layer_attn.push(head_attn);
            for d in 0..dh {
                activations.push(mixed[n - 1][h * dh + d]);
            }
        }
        attention.push(layer_attn);
        for i in 0..n {
            let proj = matvec(&layer.w_o, &mixed[i]);
            for c in 0..dm {
                x[i][c] += proj[c];
            }
            let xn2 = naive_layer_norm(&x[i], &layer.ln2_gain.to_vec(), &layer.ln2_bias.to_vec());
            let mut hidden = matvec(&layer.w_in, &xn2);
            for (j, hv) in hidden.iter_mut().enumerate() {
                *hv = naive_gelu(*hv + layer.b_in[j]);
            }
            let out = matvec(&layer.w_out, &hidden);
            for c in 0..dm {
                x[i][c] += out[c] + layer.b_out[c];
            }
        }
    }
    let last = naive_layer_norm(&x[n - 1], &w.lnf_gain.to_vec(), &w.lnf_bias.to_vec());
    let logits = matvec(&w.unembedding, &last);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    NaiveOutput {
        probs: exps.iter().map(|e| e / z).collect(),
        activations,
        attention,
    }
}

// ---------------------------------------------------------------- planted pipeline

pub fn planted_dims() -> ModelDims {
    ModelDims::new(8, 8, 16, 64).unwrap()
}

/// Ten distinct planted heads spread over the grid.
pub fn planted_heads() -> Vec<HeadCoord> {
    [
        (0, 3),
        (1, 6),
        (2, 0),
        (2, 5),
        (3, 2),
        (4, 7),
        (5, 1),
        (5, 4),
        (6, 6),
        (7, 2),
    ]
    .into_iter()
    .map(|(l, h)| HeadCoord::new(l, h))
    .collect()
}

pub fn planted_model(strength: f64, seed: u64) -> PlantedSignalModel {
    PlantedSignalModel::new(PlantedConfig {
        dims: planted_dims(),
        planted: planted_heads(),
        strength,
        seed,
        separation: 2.5,
        profile: Default::default(),
    })
    .unwrap()
}

pub fn noncot_split(questions: usize, ratios: (f64, f64, f64), seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = noncot_records(&mut rng, questions, 2, 4);
    split_records(
        records,
        SplitRatios::new(ratios.0, ratios.1, ratios.2).unwrap(),
        seed,
        true,
    )
    .unwrap()
}

pub fn cot_split(questions: usize, ratios: (f64, f64, f64), seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = cot_records(&mut rng, questions, 2, 4);
    split_records(
        records,
        SplitRatios::new(ratios.0, ratios.1, ratios.2).unwrap(),
        seed,
        true,
    )
    .unwrap()
}

pub struct Fitted {
    pub grid: ProbeGrid,
    pub selection: HeadSelection,
    pub train: LabeledFeatures,
    pub test: LabeledFeatures,
    pub stats: Vec<veritas::probing::HeadStats>,
}

/// Probe grid on train/validation, top-`k` heads, standardized features.
pub fn fit_features(
    model: &PlantedSignalModel,
    split: &DatasetSplit,
    k: usize,
    exec: Execution,
) -> Fitted {
    let acts = |r: &[Record]| collect_activations(model, r, None, exec).unwrap();
    let (train, val, test) = (
        acts(&split.train),
        acts(&split.validation),
        acts(&split.test),
    );
    let grid = fit_probe_grid(&train, &val, &ProbeHyper::default(), exec).unwrap();
    let selection = select_top_k(&grid, k).unwrap();
    let stats = grid.stats_for(&selection).unwrap();
    Fitted {
        train: LabeledFeatures::from_activations(&train, &selection, Some(&stats)).unwrap(),
        test: LabeledFeatures::from_activations(&test, &selection, Some(&stats)).unwrap(),
        grid,
        selection,
        stats,
    }
}

pub fn train_predictor(
    f: &Fitted,
    loss: LossKind,
    seed: u64,
    exec: Execution,
) -> ConfidencePredictor {
    let hyper = TrainHyper::default();
    match loss {
        LossKind::Mse => train_mse(&f.train, Some(f.stats.clone()), &hyper).unwrap(),
        LossKind::Ece => {
            let table = compute_soft_targets(&f.train, 5, 10, &hyper, seed, exec).unwrap();
            train_ece(&f.train, Some(f.stats.clone()), &table, &hyper).unwrap()
        }
    }
}

/// Step-truth predictor for decoding on the planted reasoner.
pub fn step_predictor(
    model: &PlantedSignalModel,
    seed: u64,
    exec: Execution,
) -> ConfidencePredictor {
    let split = cot_split(600, (0.6, 0.2, 0.2), seed);
    let f = fit_features(model, &split, model.config().dims.n_heads, exec);
    train_predictor(&f, LossKind::Mse, seed, exec)
}

// ---------------------------------------------------------------- self-correction fixture

pub const CORRECTION: &str = "Re-check the last step.\n";

/// Replay dims: one head of width one, so `beta = sigmoid(activation)`.
pub fn fixture_dims() -> ModelDims {
    ModelDims::new(1, 1, 1, 257).unwrap()
}

/// `beta = sigmoid(a)` on the single activation.
pub fn identity_predictor() -> ConfidencePredictor {
    ConfidencePredictor {
        selection: HeadSelection::new(vec![HeadCoord::new(0, 0)]).unwrap(),
        weights: vec![1.0],
        bias: 0.0,
        stats: None,
        training: TrainingMeta {
            loss: LossKind::Mse,
            n_folds: None,
            n_bins: None,
            seed: None,
            iterations: 0,
            final_loss: 0.0,
            loss_history: Vec::new(),
        },
    }
}

/// A candidate whose tokens all have probability `p` and whose activation gives `beta`.
pub fn fixture_candidate(text: &str, p: f64, beta: f64) -> ReplayCandidate {
    let a = (beta / (1.0 - beta)).ln();
    ReplayCandidate {
        text: text.into(),
        token_logprobs: vec![p.ln(); 3],
        activations: vec![a as f32],
        token_ids: None,
        truncated: false,
    }
}

pub struct FixtureTask {
    pub question: String,
    pub answer: String,
    pub first: Vec<ReplayCandidate>,
    /// Candidates after the correction prompt, if recorded.
    pub corrected: Option<Vec<ReplayCandidate>>,
}

pub fn fixture_model(tasks: &[FixtureTask]) -> ReplayModel {
    let mut b = ReplayBuilder::default();
    for t in tasks {
        b.add(&t.question, t.first.clone()).unwrap();
        if let Some(c) = &t.corrected {
            b.add(&format!("{}{CORRECTION}", t.question), c.clone())
                .unwrap();
        }
    }
    ReplayModel::new(fixture_dims(), None, b.finish()).unwrap()
}

/// Fixture suite: every first-pass candidate scores below 0.5; where the
/// correction pass is recorded it holds a higher-scoring truthful step.
pub fn correction_suite() -> Vec<FixtureTask> {
    let boxed = |v: u32| format!("\\boxed{{{v}}}");
    let mut tasks = Vec::new();
    for i in 0..6u32 {
        let answer = 10 + i;
        let corrected = match i {
            // regeneration recorded with a confident truthful step
            0..=3 => Some(vec![
                fixture_candidate(&boxed(answer), 0.8, 0.9),
                fixture_candidate(&boxed(answer + 2), 0.6, 0.3),
            ]),
            // regeneration only yields worse candidates
            4 => Some(vec![fixture_candidate(&boxed(answer + 5), 0.2, 0.1)]),
            // nothing recorded: the correction fails and the first pass stands
            _ => None,
        };
        tasks.push(FixtureTask {
            question: format!("Q{i}: what is the value?\n"),
            answer: answer.to_string(),
            first: vec![
                fixture_candidate(&boxed(answer + 1), 0.5, 0.2),
                fixture_candidate(&boxed(answer + 3), 0.4, 0.3),
            ],
            corrected,
        });
    }
    tasks
}

pub fn fixture_params(threshold: Option<f64>) -> DecodeParams {
    DecodeParams {
        m: 2,
        lambda: 0.5,
        correction_threshold: threshold,
        correction_template: CORRECTION.into(),
        beta_source: veritas::decoding::BetaSource::Candidate,
        ..DecodeParams::default()
    }
}
