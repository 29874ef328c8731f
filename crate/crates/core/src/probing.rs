//! Per-head logistic probes over final-token activations.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_cot, format_noncot, Record, Template};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::trace::Trace;
use crate::model::{CognitiveModel, HeadActivations, HeadCoord, ModelDims};

/// Activation tensors paired with binary labels, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledActivations {
    pub ids: Vec<String>,
    pub tensors: Vec<HeadActivations>,
    pub labels: Vec<bool>,
}

impl LabeledActivations {
    pub fn new(ids: Vec<String>, tensors: Vec<HeadActivations>, labels: Vec<bool>) -> Result<Self> {
        if ids.len() != tensors.len() || tensors.len() != labels.len() {
            return Err(Error::validation(
                "ids, tensors and labels differ in length",
            ));
        }
        if let Some(first) = tensors.first() {
            if let Some(i) = tensors.iter().position(|t| t.shape() != first.shape()) {
                return Err(Error::validation(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    ids[i],
                    tensors[i].shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self {
            ids,
            tensors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.tensors.first().map(HeadActivations::shape)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            tensors: idx.iter().map(|&i| self.tensors[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Labeled trace records; unlabeled records are rejected.
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let dims = trace.header.dims()?;
        let mut out = Self {
            ids: Vec::with_capacity(trace.records.len()),
            tensors: Vec::with_capacity(trace.records.len()),
            labels: Vec::with_capacity(trace.records.len()),
        };
        for r in &trace.records {
            let label = r.label.ok_or_else(|| {
                Error::validation(format!("trace record {} is unlabeled", r.example_id))
            })?;
            out.ids.push(r.example_id.to_string());
            out.tensors
                .push(HeadActivations::from_f32(&dims, &r.activations)?);
            out.labels.push(label);
        }
        Ok(out)
    }
}

/// Render every record with its template (or the one given) and read off
/// final-token activations.
pub fn collect_activations(
    model: &dyn CognitiveModel,
    records: &[Record],
    template: Option<Template>,
    exec: Execution,
) -> Result<LabeledActivations> {
    let tensors = exec.try_map(records, |r| {
        let wrap = |e: Error| Error::Record {
            id: r.id().unwrap_or("?").to_string(),
            source: Box::new(e),
        };
        let prompt = match template {
            Some(t) => r.render_with(t).map_err(wrap)?,
            None => r.render(),
        };
        let tokens = model.encode(&prompt).map_err(wrap)?;
        model.activations(&tokens).map_err(wrap)
    })?;
    let ids = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.id().map_or_else(|| format!("record-{i}"), str::to_string))
        .collect();
    LabeledActivations::new(ids, tensors, records.iter().map(Record::label).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeHyper {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iter: usize,
    /// Converged once the gradient max-norm falls below this.
    pub tol: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l2: 1e-3,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.l2 < 0.0
            || self.max_iter == 0
        {
            return Err(Error::validation("probe hyperparameters out of range"));
        }
        Ok(())
    }
}

/// Per-dimension mean and standard deviation from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl HeadStats {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        // constant dimensions are left unscaled
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(
            x.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((x, m), s)| (x - m) / s),
        );
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        self.apply_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub stats: HeadStats,
    pub val_accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Probe {
    pub fn coord(&self) -> HeadCoord {
        HeadCoord::new(self.layer, self.head)
    }

    /// Probability of the positive class for a raw head activation.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self
            .weights
            .iter()
            .zip(x.iter().zip(&self.stats.mean).zip(&self.stats.std))
            .map(|(w, ((x, m), s))| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        sigmoid(z)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit one probe on one head's slice. Data are row-major `n x d`, already
/// standardized.
fn fit_logistic(
    x: &[f64],
    y: &[f64],
    d: usize,
    hyper: &ProbeHyper,
) -> (Vec<f64>, f64, bool, usize) {
    let n = y.len();
    let inv_n = 1.0 / n as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for it in 0..hyper.max_iter {
        gw.iter_mut().zip(&w).for_each(|(g, w)| *g = hyper.l2 * w);
        let mut gb = 0.0;
        for (row, t) in x.chunks_exact(d).zip(y) {
            let z = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = (sigmoid(z) - t) * inv_n;
            gb += r;
            gw.iter_mut().zip(row).for_each(|(g, a)| *g += r * a);
        }
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax < hyper.tol {
            return (w, b, true, it);
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= hyper.learning_rate * g);
        b -= hyper.learning_rate * gb;
    }
    (w, b, false, hyper.max_iter)
}

fn head_rows(set: &LabeledActivations, c: HeadCoord) -> Vec<&[f64]> {
    set.tensors
        .iter()
        .map(|t| t.head(c.layer, c.head))
        .collect()
}

pub fn fit_probe(
    train: &LabeledActivations,
    val: &LabeledActivations,
    coord: HeadCoord,
    hyper: &ProbeHyper,
) -> Result<Probe> {
    let (_, _, d) = train
        .shape()
        .ok_or_else(|| Error::validation("empty training set"))?;
    let rows = head_rows(train, coord);
    let stats = HeadStats::fit(&rows);
    let mut x = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        stats.apply_into(r, &mut x);
    }
    let y: Vec<f64> = train
        .labels
        .iter()
        .map(|&l| f64::from(u8::from(l)))
        .collect();
    let (weights, bias, converged, iterations) = fit_logistic(&x, &y, d, hyper);
    if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
        return Err(Error::Numeric {
            layer: coord.layer,
            head: coord.head,
            stage: "probe weights",
        });
    }
    let mut probe = Probe {
        layer: coord.layer,
        head: coord.head,
        weights,
        bias,
        stats,
        val_accuracy: 0.0,
        converged,
        iterations,
    };
    let correct = val
        .tensors
        .iter()
        .zip(&val.labels)
        .filter(|(t, &l)| (probe.predict(t.head(coord.layer, coord.head)) >= 0.5) == l)
        .count();
    probe.val_accuracy = correct as f64 / val.len() as f64;
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

/// One probe per (layer, head), stored row-major by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub dims: GridDims,
    pub probes: Vec<Probe>,
}

impl ProbeGrid {
    pub fn probe(&self, c: HeadCoord) -> Option<&Probe> {
        (c.layer < self.dims.n_layers && c.head < self.dims.n_heads)
            .then(|| &self.probes[c.layer * self.dims.n_heads + c.head])
    }

    pub fn accuracies(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.dims.n_layers, self.dims.n_heads), |(l, h)| {
            self.probes[l * self.dims.n_heads + h].val_accuracy
        })
    }

    pub fn validate(&self) -> Result<()> {
        let GridDims {
            n_layers,
            n_heads,
            d_head,
        } = self.dims;
        if self.probes.len() != n_layers * n_heads {
            return Err(Error::validation("probe count does not match grid dims"));
        }
        for (i, p) in self.probes.iter().enumerate() {
            if (p.layer, p.head) != (i / n_heads, i % n_heads)
                || p.weights.len() != d_head
                || p.stats.mean.len() != d_head
                || p.stats.std.len() != d_head
                || !(0.0..=1.0).contains(&p.val_accuracy)
                || p.weights.iter().any(|w| !w.is_finite())
            {
                return Err(Error::validation(format!(
                    "probe at ({}, {}) is malformed",
                    p.layer, p.head
                )));
            }
        }
        Ok(())
    }

    /// Stats for each selected head, in selection order.
    pub fn stats_for(&self, selection: &HeadSelection) -> Result<Vec<HeadStats>> {
        selection
            .coords
            .iter()
            .map(|c| {
                self.probe(*c)
                    .map(|p| p.stats.clone())
                    .ok_or_else(|| Error::validation(format!("head {c} outside probe grid")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let grid: Self = read_json(path)?;
        grid.validate()?;
        Ok(grid)
    }
}

fn check_both_labels(labels: &[bool], what: &str) -> Result<()> {
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::validation(format!("{what} contains a single class")));
    }
    Ok(())
}

pub fn fit_probe_grid(
    train: &LabeledActivations,
    val: &LabeledActivations,
    hyper: &ProbeHyper,
    exec: Execution,
) -> Result<ProbeGrid> {
    hyper.validate()?;
    check_both_labels(&train.labels, "probe training split")?;
    if val.is_empty() {
        return Err(Error::validation("probe validation split is empty"));
    }
    let (n_layers, n_heads, d_head) = train.shape().expect("non-empty");
    if val.shape() != train.shape() {
        return Err(Error::validation(
            "train and validation activations differ in shape",
        ));
    }
    let probes = exec
        .map_range(n_layers * n_heads, |i| {
            fit_probe(train, val, HeadCoord::new(i / n_heads, i % n_heads), hyper)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeGrid {
        dims: GridDims {
            n_layers,
            n_heads,
            d_head,
        },
        probes,
    })
}

/// Ordered, distinct head coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub coords: Vec<HeadCoord>,
}

impl HeadSelection {
    pub fn new(coords: Vec<HeadCoord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if coords.is_empty() {
            return Err(Error::validation("head selection is empty"));
        }
        if let Some(c) = coords.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::validation(format!("head {c} selected twice")));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        match self.coords.iter().find(|c| !dims.contains(**c)) {
            Some(c) => Err(Error::validation(format!(
                "head {c} outside {}x{} activation grid",
                dims.n_layers, dims.n_heads
            ))),
            None => Ok(()),
        }
    }
}

/// Top `k` heads by accuracy; ties go to the smaller (layer, head).
pub fn select_top_k(grid: &ProbeGrid, k: usize) -> Result<HeadSelection> {
    select_top_k_from(&grid.accuracies(), k)
}

pub fn select_top_k_from(acc: &Array2<f64>, k: usize) -> Result<HeadSelection> {
    let (l, h) = acc.dim();
    if k == 0 || k > l * h {
        return Err(Error::validation(format!("k = {k} outside 1..={}", l * h)));
    }
    let mut coords: Vec<HeadCoord> = (0..l)
        .flat_map(|layer| (0..h).map(move |head| HeadCoord::new(layer, head)))
        .collect();
    coords.sort_by(|a, b| {
        acc[[b.layer, b.head]]
            .total_cmp(&acc[[a.layer, a.head]])
            .then(a.cmp(b))
    });
    coords.truncate(k);
    HeadSelection::new(coords)
}

pub fn heatmap_csv_string(acc: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in acc.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn write_heatmap_csv(acc: &Array2<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv_string(acc))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn parse_heatmap_csv(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "ragged row".into(),
            });
        }
        rows.push(row);
    }
    let w = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), w), rows.concat())
        .map_err(|e| Error::validation(e.to_string()))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Array2<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_heatmap_csv(&text, path)
}

/// Heatmap as a standalone SVG, one cell per head, darker = more accurate.
pub fn heatmap_svg(acc: &Array2<f64>) -> String {
    const CELL: usize = 28;
    const MARGIN: usize = 40;
    let (l, h) = acc.dim();
    let (w, ht) = (MARGIN + h * CELL + 10, MARGIN + l * CELL + 10);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" font-family=\"monospace\" font-size=\"10\">\n"
    );
    s.push_str("<text x=\"4\" y=\"12\">layer \\ head</text>\n");
    for head in 0..h {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{head}</text>\n",
            MARGIN + head * CELL + CELL / 3,
            MARGIN - 6
        ));
    }
    for layer in 0..l {
        s.push_str(&format!(
            "<text x=\"8\" y=\"{}\">{layer}</text>\n",
            MARGIN + layer * CELL + CELL / 2 + 4
        ));
        for head in 0..h {
            let v = acc[[layer, head]].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\"><title>({layer}, {head}) {v:.6}</title></rect>\n",
                MARGIN + head * CELL,
                MARGIN + layer * CELL
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_heatmap_svg(acc: &Array2<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_svg(acc)).map_err(|e| Error::io(path.display().to_string(), e))
}

fn render_answer(question: &str, answer: &str, template: Template) -> Result<String> {
    match template {
        Template::NonCot => format_noncot(question, answer),
        Template::Cot => format_cot::<&str>(question, &[], answer),
    }
}

/// Per-head probe probability on `answer_a` minus that on `answer_b`.
pub fn answer_diff_map(
    grid: &ProbeGrid,
    model: &dyn CognitiveModel,
    question: &str,
    answer_a: &str,
    answer_b: &str,
    template: Template,
) -> Result<Array2<f64>> {
    let acts = |a: &str| -> Result<HeadActivations> {
        let tokens = model.encode(&render_answer(question, a, template)?)?;
        model.activations(&tokens)
    };
    let (xa, xb) = (acts(answer_a)?, acts(answer_b)?);
    let dims = &grid.dims;
    if xa.shape() != (dims.n_layers, dims.n_heads, dims.d_head) {
        return Err(Error::validation("model dims differ from the probe grid"));
    }
    Ok(Array2::from_shape_fn(
        (dims.n_layers, dims.n_heads),
        |(l, h)| {
            let p = &grid.probes[l * dims.n_heads + h];
            p.predict(xa.head(l, h)) - p.predict(xb.head(l, h))
        },
    ))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
