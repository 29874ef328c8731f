//! Sigmoid-linear confidence predictor over concatenated head activations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{bin_edge, bin_index};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::HeadActivations;
use crate::probing::{
    read_json, sigmoid, write_json, HeadSelection, HeadStats, LabeledActivations,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub selection: HeadSelection,
    pub standardized: bool,
}

/// Concatenate the selected heads in selection order, standardizing each
/// segment with `stats[i]` when given.
pub fn extract_features(
    tensor: &HeadActivations,
    selection: &HeadSelection,
    stats: Option<&[HeadStats]>,
) -> Result<FeatureVector> {
    let mut values = Vec::new();
    extract_into(tensor, selection, stats, &mut values)?;
    Ok(FeatureVector {
        values,
        selection: selection.clone(),
        standardized: stats.is_some(),
    })
}

fn extract_into(
    tensor: &HeadActivations,
    selection: &HeadSelection,
    stats: Option<&[HeadStats]>,
    out: &mut Vec<f64>,
) -> Result<()> {
    if let Some(s) = stats {
        if s.len() != selection.len() {
            return Err(Error::validation("stats and selection differ in length"));
        }
    }
    let (l, h, _) = tensor.shape();
    for (i, c) in selection.coords.iter().enumerate() {
        let seg = tensor.get(*c).ok_or_else(|| {
            Error::validation(format!(
                "selected head {c} outside {l}x{h} activation tensor"
            ))
        })?;
        match stats {
            Some(s) => s[i].apply_into(seg, out),
            None => out.extend_from_slice(seg),
        }
    }
    Ok(())
}

/// Row-major `n x dim` feature matrix with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub selection: HeadSelection,
    pub standardized: bool,
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledFeatures {
    pub fn from_activations(
        set: &LabeledActivations,
        selection: &HeadSelection,
        stats: Option<&[HeadStats]>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for t in &set.tensors {
            extract_into(t, selection, stats, &mut rows)?;
        }
        let dim = if set.is_empty() {
            0
        } else {
            rows.len() / set.len()
        };
        Ok(Self {
            selection: selection.clone(),
            standardized: stats.is_some(),
            dim,
            rows,
            labels: set.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut rows = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            rows.extend_from_slice(self.row(i));
        }
        Self {
            selection: self.selection.clone(),
            standardized: self.standardized,
            dim: self.dim,
            rows,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn targets(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| f64::from(u8::from(l)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ece,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Stop once one step improves the loss by less than this.
    pub tol: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_iter: 2000,
            tol: 1e-8,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.max_iter == 0
            || self.tol < 0.0
        {
            return Err(Error::validation("predictor hyperparameters out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub loss: LossKind,
    pub n_folds: Option<usize>,
    pub n_bins: Option<usize>,
    pub seed: Option<u64>,
    pub iterations: usize,
    pub final_loss: f64,
    /// Loss after every iteration, starting with the initial loss.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePredictor {
    pub selection: HeadSelection,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub stats: Option<Vec<HeadStats>>,
    pub training: TrainingMeta,
}

impl ConfidencePredictor {
    pub fn features(&self, tensor: &HeadActivations) -> Result<FeatureVector> {
        extract_features(tensor, &self.selection, self.stats.as_deref())
    }

    /// β for a raw activation tensor.
    pub fn confidence(&self, tensor: &HeadActivations) -> Result<f64> {
        predict_confidence(self, &self.features(tensor)?)
    }

    pub fn pre_activation(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn predict_rows(&self, features: &LabeledFeatures) -> Result<Vec<f64>> {
        self.check(&features.selection, features.standardized)?;
        Ok((0..features.len())
            .map(|i| sigmoid(self.pre_activation(features.row(i))))
            .collect())
    }

    fn check(&self, selection: &HeadSelection, standardized: bool) -> Result<()> {
        if *selection != self.selection {
            return Err(Error::validation(
                "feature selection differs from the predictor's",
            ));
        }
        if standardized != self.stats.is_some() {
            return Err(Error::validation(
                "feature standardization differs from the predictor's",
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if !d.is_multiple_of(self.selection.len())
            || !self.bias.is_finite()
            || self.weights.iter().any(|w| !w.is_finite())
        {
            return Err(Error::validation("predictor parameters are malformed"));
        }
        if let Some(s) = &self.stats {
            let seg = d / self.selection.len();
            if s.len() != self.selection.len()
                || s.iter().any(|h| h.mean.len() != seg || h.std.len() != seg)
            {
                return Err(Error::validation(
                    "predictor stats do not match its selection",
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = read_json(path)?;
        p.validate()?;
        Ok(p)
    }
}

/// σ(W·v + b).
pub fn predict_confidence(p: &ConfidencePredictor, v: &FeatureVector) -> Result<f64> {
    p.check(&v.selection, v.standardized)?;
    if v.values.len() != p.weights.len() {
        return Err(Error::validation(format!(
            "feature length {} differs from predictor width {}",
            v.values.len(),
            p.weights.len()
        )));
    }
    Ok(sigmoid(p.pre_activation(&v.values)))
}

/// Mean of (target − σ(W·x + b))² by full-batch gradient descent from zero.
fn fit_targets(
    features: &LabeledFeatures,
    targets: &[f64],
    hyper: &TrainHyper,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    hyper.validate()?;
    let (n, d) = (features.len(), features.dim);
    if n == 0 {
        return Err(Error::validation("no training examples"));
    }
    let inv_n = 1.0 / n as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    let mut history = Vec::with_capacity(hyper.max_iter + 1);
    let loss_and_grad = |w: &[f64], b: f64, gw: &mut [f64]| -> (f64, f64) {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let (mut loss, mut gb) = (0.0, 0.0);
        for (row, t) in features.rows.chunks_exact(d.max(1)).zip(targets) {
            let z = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            let p = sigmoid(z);
            let r = p - t;
            loss += r * r;
            let g = 2.0 * r * p * (1.0 - p) * inv_n;
            gb += g;
            gw.iter_mut().zip(row).for_each(|(gi, a)| *gi += g * a);
        }
        (loss * inv_n, gb)
    };
    let (mut loss, mut gb) = loss_and_grad(&w, b, &mut gw);
    history.push(loss);
    for _ in 0..hyper.max_iter {
        w.iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= hyper.learning_rate * g);
        b -= hyper.learning_rate * gb;
        let (next, next_gb) = loss_and_grad(&w, b, &mut gw);
        history.push(next);
        if !next.is_finite() {
            return Err(Error::Divergence(format!("loss became {next}")));
        }
        if next > loss + 1e-12 * loss.max(1e-300) {
            return Err(Error::Divergence(format!(
                "loss rose from {loss} to {next}"
            )));
        }
        let improvement = loss - next;
        loss = next;
        gb = next_gb;
        if improvement < hyper.tol {
            break;
        }
    }
    w.push(b);
    Ok((w, loss, history))
}

fn build(
    features: &LabeledFeatures,
    stats: Option<Vec<HeadStats>>,
    fitted: (Vec<f64>, f64, Vec<f64>),
    loss: LossKind,
    table: Option<&SoftTargetTable>,
) -> ConfidencePredictor {
    let (mut weights, final_loss, history) = fitted;
    let bias = weights.pop().expect("bias appended");
    ConfidencePredictor {
        selection: features.selection.clone(),
        weights,
        bias,
        stats,
        training: TrainingMeta {
            loss,
            n_folds: table.map(|t| t.n_folds),
            n_bins: table.map(|t| t.n_bins),
            seed: table.map(|t| t.seed),
            iterations: history.len() - 1,
            final_loss,
            loss_history: history,
        },
    }
}

fn check_both_labels(labels: &[bool]) -> Result<()> {
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::validation("training labels contain a single class"));
    }
    Ok(())
}

/// Hard-label regression. `stats` are the standardization statistics the
/// features were built with, kept so inference applies the same transform.
pub fn train_mse(
    features: &LabeledFeatures,
    stats: Option<Vec<HeadStats>>,
    hyper: &TrainHyper,
) -> Result<ConfidencePredictor> {
    check_both_labels(&features.labels)?;
    check_stats(features, &stats)?;
    let fitted = fit_targets(features, &features.targets(), hyper)?;
    Ok(build(features, stats, fitted, LossKind::Mse, None))
}

fn check_stats(features: &LabeledFeatures, stats: &Option<Vec<HeadStats>>) -> Result<()> {
    if features.standardized != stats.is_some() {
        return Err(Error::validation(
            "stats must be given exactly when features are standardized",
        ));
    }
    Ok(())
}

/// Cross-validated confidences binned into per-bin empirical accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTargetTable {
    pub n_folds: usize,
    pub n_bins: usize,
    pub seed: u64,
    pub boundaries: Vec<f64>,
    /// `None` for empty bins.
    pub bin_accuracy: Vec<Option<f64>>,
    pub bin_count: Vec<usize>,
    pub fold: Vec<usize>,
    pub confidences: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Stratified fold assignment: labels are shuffled separately and dealt
/// round-robin so every fold gets a share of each class.
pub fn stratified_folds(labels: &[bool], n_folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % n_folds;
            next += 1;
        }
    }
    fold
}

pub fn compute_soft_targets(
    features: &LabeledFeatures,
    n_folds: usize,
    n_bins: usize,
    hyper: &TrainHyper,
    seed: u64,
    exec: Execution,
) -> Result<SoftTargetTable> {
    if n_folds < 2 {
        return Err(Error::validation("n_folds must be at least 2"));
    }
    if n_bins == 0 {
        return Err(Error::validation("n_bins must be at least 1"));
    }
    let n = features.len();
    let fold = stratified_folds(&features.labels, n_folds, seed);
    let parts: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds)
        .map(|k| (0..n).partition(|&i| fold[i] != k))
        .collect();
    for (k, (train, held)) in parts.iter().enumerate() {
        let labels: Vec<bool> = train.iter().map(|&i| features.labels[i]).collect();
        if held.is_empty() || check_both_labels(&labels).is_err() {
            return Err(Error::validation(format!(
                "fold {k} is too small: {} held out, training part needs both labels",
                held.len()
            )));
        }
    }
    let fold_preds = exec.try_map(&parts, |(train, held)| -> Result<Vec<(usize, f64)>> {
        let sub = features.subset(train);
        let (mut w, _, _) = fit_targets(&sub, &sub.targets(), hyper)?;
        let b = w.pop().expect("bias appended");
        Ok(held
            .iter()
            .map(|&i| {
                let z = features
                    .row(i)
                    .iter()
                    .zip(&w)
                    .map(|(a, w)| a * w)
                    .sum::<f64>()
                    + b;
                (i, sigmoid(z))
            })
            .collect())
    })?;
    let mut confidences = vec![0.0; n];
    for (i, p) in fold_preds.into_iter().flatten() {
        confidences[i] = p;
    }
    let mut counts = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let bins: Vec<usize> = confidences.iter().map(|&p| bin_index(p, n_bins)).collect();
    for (b, &l) in bins.iter().zip(&features.labels) {
        counts[*b] += 1;
        correct[*b] += usize::from(l);
    }
    let bin_accuracy: Vec<Option<f64>> = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let targets = bins
        .iter()
        .map(|&b| bin_accuracy[b].expect("populated"))
        .collect();
    Ok(SoftTargetTable {
        n_folds,
        n_bins,
        seed,
        boundaries: (0..=n_bins).map(|b| bin_edge(b, n_bins)).collect(),
        bin_accuracy,
        bin_count: counts,
        fold,
        confidences,
        targets,
    })
}

/// Regression toward each example's soft target.
pub fn train_ece(
    features: &LabeledFeatures,
    stats: Option<Vec<HeadStats>>,
    table: &SoftTargetTable,
    hyper: &TrainHyper,
) -> Result<ConfidencePredictor> {
    check_stats(features, &stats)?;
    if table.targets.len() != features.len() {
        return Err(Error::validation(format!(
            "soft-target table covers {} examples, feature set has {}",
            table.targets.len(),
            features.len()
        )));
    }
    let fitted = fit_targets(features, &table.targets, hyper)?;
    Ok(build(features, stats, fitted, LossKind::Ece, Some(table)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadCoord;
    use proptest::prelude::*;

    fn sel(coords: &[(usize, usize)]) -> HeadSelection {
        HeadSelection::new(coords.iter().map(|&(l, h)| HeadCoord::new(l, h)).collect()).unwrap()
    }

    fn features(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> LabeledFeatures {
        let dim = rows[0].len();
        LabeledFeatures {
            selection: sel(&[(0, 0)]),
            standardized: false,
            dim,
            rows: rows.concat(),
            labels,
        }
    }

    fn separable(n: usize) -> LabeledFeatures {
        let rows = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (2.0 + (i % 7) as f64 * 0.1), (i % 5) as f64 * 0.1]
            })
            .collect();
        features(rows, (0..n).map(|i| i % 2 == 0).collect())
    }

    #[test]
    fn segments_follow_selection_order() {
        let t = HeadActivations::from_vec(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let v = extract_features(&t, &sel(&[(1, 0), (0, 1)]), None).unwrap();
        assert_eq!(v.values, vec![4.0, 5.0, 2.0, 3.0]);
        let v = extract_features(&t, &sel(&[(0, 1), (1, 0)]), None).unwrap();
        assert_eq!(v.values, vec![2.0, 3.0, 4.0, 5.0]);
        match extract_features(&t, &sel(&[(0, 0), (2, 1)]), None) {
            Err(Error::Validation(m)) => assert!(m.contains("(2, 1)")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn zero_predictor(d: usize) -> ConfidencePredictor {
        ConfidencePredictor {
            selection: sel(&[(0, 0)]),
            weights: vec![0.0; d],
            bias: 0.0,
            stats: None,
            training: TrainingMeta {
                loss: LossKind::Mse,
                n_folds: None,
                n_bins: None,
                seed: None,
                iterations: 0,
                final_loss: 0.0,
                loss_history: vec![],
            },
        }
    }

    #[test]
    fn sigmoid_fixtures() {
        let mut p = zero_predictor(1);
        let v = FeatureVector {
            values: vec![1.0],
            selection: sel(&[(0, 0)]),
            standardized: false,
        };
        assert_eq!(predict_confidence(&p, &v).unwrap(), 0.5);
        p.bias = 3f64.ln();
        assert!((predict_confidence(&p, &v).unwrap() - 0.75).abs() < 1e-15);
        let other = FeatureVector {
            selection: sel(&[(0, 1)]),
            ..v.clone()
        };
        assert!(predict_confidence(&p, &other).is_err());
    }

    #[test]
    fn mse_training_behaviour() {
        let f = separable(200);
        let p = train_mse(&f, None, &TrainHyper::default()).unwrap();
        assert!((p.training.loss_history[0] - 0.25).abs() < 1e-15);
        assert!(
            p.training.final_loss < 0.05,
            "loss {}",
            p.training.final_loss
        );
        assert!(p.training.loss_history.windows(2).all(|w| w[1] <= w[0]));

        let mut one = f.clone();
        one.labels.iter_mut().for_each(|l| *l = true);
        assert!(train_mse(&one, None, &TrainHyper::default()).is_err());
    }

    #[test]
    fn all_positive_targets_push_outputs_up() {
        let f = separable(100);
        let table = SoftTargetTable {
            n_folds: 2,
            n_bins: 1,
            seed: 0,
            boundaries: vec![0.0, 1.0],
            bin_accuracy: vec![Some(1.0)],
            bin_count: vec![100],
            fold: vec![0; 100],
            confidences: vec![0.5; 100],
            targets: vec![1.0; 100],
        };
        // the sigmoid-MSE gradient vanishes near 1, so the limit needs a longer run
        let hyper = TrainHyper {
            max_iter: 20_000,
            tol: 0.0,
            ..TrainHyper::default()
        };
        let p = train_ece(&f, None, &table, &hyper).unwrap();
        assert!(p.predict_rows(&f).unwrap().iter().all(|&c| c >= 0.95));
    }

    #[test]
    fn constant_soft_targets_are_matched() {
        let f = separable(120);
        let mut table =
            compute_soft_targets(&f, 5, 10, &TrainHyper::default(), 1, Execution::Sequential)
                .unwrap();
        table.targets = vec![0.75; 120];
        let p = train_ece(&f, None, &table, &TrainHyper::default()).unwrap();
        let out = p.predict_rows(&f).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 0.75).abs() <= 0.05, "mean {mean}");
    }

    #[test]
    fn single_bin_targets_are_global_accuracy() {
        let f = separable(60);
        let t = compute_soft_targets(&f, 3, 1, &TrainHyper::default(), 4, Execution::Sequential)
            .unwrap();
        assert!(t.targets.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn fold_too_small_is_an_error() {
        let f = separable(4);
        assert!(
            compute_soft_targets(&f, 5, 10, &TrainHyper::default(), 0, Execution::Sequential)
                .is_err()
        );
        assert!(
            compute_soft_targets(&f, 1, 10, &TrainHyper::default(), 0, Execution::Sequential)
                .is_err()
        );
    }

    #[test]
    fn sequential_and_parallel_tables_agree() {
        let f = separable(90);
        let a = compute_soft_targets(&f, 5, 10, &TrainHyper::default(), 2, Execution::Sequential)
            .unwrap();
        let b = compute_soft_targets(&f, 5, 10, &TrainHyper::default(), 2, Execution::Parallel)
            .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn folds_are_a_stratified_cover(labels in proptest::collection::vec(any::<bool>(), 1..200), k in 2usize..8, seed in any::<u64>()) {
            let fold = stratified_folds(&labels, k, seed);
            prop_assert_eq!(fold.len(), labels.len());
            prop_assert!(fold.iter().all(|&f| f < k));
            for class in [true, false] {
                let mut per = vec![0usize; k];
                for (f, _) in fold.iter().zip(&labels).filter(|(_, &l)| l == class) {
                    per[*f] += 1;
                }
                let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }

        #[test]
        fn soft_targets_are_populated_bin_accuracies(seed in any::<u64>(), bins in 1usize..12) {
            let f = separable(40);
            let t = compute_soft_targets(&f, 4, bins, &TrainHyper { max_iter: 50, ..TrainHyper::default() }, seed, Execution::Sequential).unwrap();
            let n = f.len() as f64;
            let mut total = 0.0;
            for (i, &target) in t.targets.iter().enumerate() {
                let b = bin_index(t.confidences[i], bins);
                prop_assert_eq!(Some(target), t.bin_accuracy[b]);
                prop_assert!((0.0..=1.0).contains(&target));
            }
            for (acc, &c) in t.bin_accuracy.iter().zip(&t.bin_count) {
                if let Some(a) = acc { total += a * c as f64 / n; }
            }
            prop_assert!((total - 0.5).abs() < 1e-12);
            prop_assert!(t.boundaries.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
