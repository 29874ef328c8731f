use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DataConfig, RunConfig};
use crate::calibration::{
    is_true_probability, reliability_csv, sequence_likelihood, CalibrationReport, PredictionSet,
};
use crate::dataset::{
    format_cot, load_records, split_records, DatasetSplit, LabelCounts, Record, SplitCounts,
    SplitManifest, SplitRatios, Template,
};
use crate::decoding::{
    results_csv, run_benchmark, toy_benchmark, BenchmarkRun, BenchmarkTask, Strategy,
};
use crate::model::toy::{cot_records, noncot_records};
use crate::model::trace::read_trace_file;
use crate::model::CognitiveModel;
use crate::predictor::{
    compute_soft_targets, train_ece, train_mse, ConfidencePredictor, LabeledFeatures, LossKind,
};
use crate::probing::{
    answer_diff_map, collect_activations, fit_probe_grid, heatmap_csv_string, heatmap_svg,
    read_heatmap_csv, select_top_k, write_json, LabeledActivations, ProbeGrid,
};
use crate::{Error, Execution};

/// Everything a subcommand needs: the resolved config and where to write.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub exec: Execution,
    pub plot: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(name), value)?;
        Ok(())
    }

    fn model(&self) -> Result<Box<dyn CognitiveModel>> {
        Ok(self.cfg.model()?.build(self.cfg.seed)?)
    }
}

/// Activation sets for the three splits.
struct Splits {
    train: LabeledActivations,
    validation: LabeledActivations,
    test: LabeledActivations,
    manifest: SplitManifest,
    /// The record split, when data came as records rather than a trace.
    records: Option<DatasetSplit>,
}

fn ratios(d: &DataConfig) -> Result<SplitRatios> {
    let [a, b, c] = d.ratios;
    Ok(SplitRatios::new(a, b, c)?)
}

fn load_data_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    let d = cfg.data()?;
    if let Some(path) = &d.path {
        return Ok(load_records(path)?);
    }
    if let Some(s) = &d.synthetic {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        return Ok(match s.kind {
            Template::NonCot => noncot_records(&mut rng, s.questions, s.min_ops, s.max_ops),
            Template::Cot => cot_records(&mut rng, s.questions, s.min_ops, s.max_ops),
        });
    }
    bail!(Error::config("[data] has no record source"))
}

fn split_data(ctx: &Ctx) -> Result<DatasetSplit> {
    let d = ctx.cfg.data()?;
    let records = load_data_records(&ctx.cfg)?;
    Ok(split_records(
        records,
        ratios(d)?,
        ctx.cfg.seed,
        d.balanced,
    )?)
}

fn load_splits(ctx: &Ctx) -> Result<Splits> {
    let d = ctx.cfg.data()?;
    if let Some(trace_path) = &d.trace {
        let trace = read_trace_file(trace_path)?;
        let all = LabeledActivations::from_trace(&trace)?;
        let (train, validation, test) = split_indices(all.len(), ratios(d)?, ctx.cfg.seed);
        let counts = |idx: &[usize]| {
            let positive = idx.iter().filter(|&&i| all.labels[i]).count();
            LabelCounts {
                negative: idx.len() - positive,
                positive,
            }
        };
        let manifest = SplitManifest {
            seed: ctx.cfg.seed,
            ratios: ratios(d)?,
            balanced: false,
            counts: SplitCounts {
                train: train.len(),
                validation: validation.len(),
                test: test.len(),
            },
            labels: BTreeMap::from([
                ("train".to_string(), counts(&train)),
                ("validation".to_string(), counts(&validation)),
                ("test".to_string(), counts(&test)),
            ]),
        };
        return Ok(Splits {
            train: all.subset(&train),
            validation: all.subset(&validation),
            test: all.subset(&test),
            manifest,
            records: None,
        });
    }
    let split = split_data(ctx)?;
    let model = ctx.model()?;
    let collect = |r: &[Record]| collect_activations(model.as_ref(), r, d.template, ctx.exec);
    Ok(Splits {
        train: collect(&split.train).context("collecting train activations")?,
        validation: collect(&split.validation).context("collecting validation activations")?,
        test: collect(&split.test).context("collecting test activations")?,
        manifest: split.manifest(),
        records: Some(split),
    })
}

/// Seeded index partition for trace data, rounding like the record split.
fn split_indices(n: usize, ratios: SplitRatios, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.validation * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

fn probe_grid(ctx: &Ctx, splits: Option<&Splits>) -> Result<ProbeGrid> {
    if let Some(path) = &ctx.cfg.probe.bundle {
        return Ok(ProbeGrid::load(path)?);
    }
    let s = splits.context("probe fitting needs data")?;
    Ok(fit_probe_grid(
        &s.train,
        &s.validation,
        &ctx.cfg.probe.hyper(),
        ctx.exec,
    )?)
}

struct Trained {
    predictor: ConfidencePredictor,
    soft_targets: Option<crate::predictor::SoftTargetTable>,
}

fn train_predictor(ctx: &Ctx, splits: &Splits) -> Result<Trained> {
    let grid = probe_grid(ctx, Some(splits))?;
    let pc = &ctx.cfg.predictor;
    let k = ctx.cfg.selection.k.unwrap_or(grid.dims.n_heads);
    let selection = select_top_k(&grid, k)?;
    let stats = if pc.standardize {
        Some(grid.stats_for(&selection)?)
    } else {
        None
    };
    let features = LabeledFeatures::from_activations(&splits.train, &selection, stats.as_deref())?;
    let hyper = pc.hyper();
    Ok(match pc.loss {
        LossKind::Mse => Trained {
            predictor: train_mse(&features, stats, &hyper)?,
            soft_targets: None,
        },
        LossKind::Ece => {
            let table = compute_soft_targets(
                &features,
                pc.n_folds,
                pc.n_bins,
                &hyper,
                ctx.cfg.seed,
                ctx.exec,
            )?;
            Trained {
                predictor: train_ece(&features, stats, &table, &hyper)?,
                soft_targets: Some(table),
            }
        }
    })
}

fn predictor(ctx: &Ctx, splits: Option<&Splits>) -> Result<ConfidencePredictor> {
    if let Some(path) = &ctx.cfg.predictor.bundle {
        return Ok(ConfidencePredictor::load(path)?);
    }
    let s = splits.context("predictor training needs data")?;
    Ok(train_predictor(ctx, s)?.predictor)
}

pub fn probe(ctx: &Ctx) -> Result<()> {
    let splits = load_splits(ctx)?;
    let grid = fit_probe_grid(
        &splits.train,
        &splits.validation,
        &ctx.cfg.probe.hyper(),
        ctx.exec,
    )?;
    let acc = grid.accuracies();
    ctx.write("heatmap.csv", &heatmap_csv_string(&acc))?;
    ctx.write_json("probes.json", &grid)?;
    ctx.write_json("split_manifest.json", &splits.manifest)?;
    if ctx.plot {
        ctx.write("heatmap.svg", &heatmap_svg(&acc))?;
    }
    let best = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "fitted {} probes; best validation accuracy {best:.4}",
        grid.probes.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectedHead {
    layer: usize,
    head: usize,
    accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted: Option<bool>,
}

#[derive(Serialize)]
struct SelectionReport {
    k: usize,
    heads: Vec<SelectedHead>,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_recovered: Option<usize>,
}

pub fn select_heads(ctx: &Ctx) -> Result<()> {
    let splits = if ctx.cfg.probe.bundle.is_none() {
        Some(load_splits(ctx)?)
    } else {
        None
    };
    let grid = probe_grid(ctx, splits.as_ref())?;
    let k = ctx.cfg.selection.k.unwrap_or(grid.dims.n_heads);
    let selection = select_top_k(&grid, k)?;
    let planted = match &ctx.cfg.model {
        Some(m) => m.planted_heads(ctx.cfg.seed)?,
        None => None,
    };
    let heads: Vec<SelectedHead> = selection
        .coords
        .iter()
        .map(|c| SelectedHead {
            layer: c.layer,
            head: c.head,
            accuracy: grid.probe(*c).map_or(f64::NAN, |p| p.val_accuracy),
            planted: planted.as_ref().map(|p| p.contains(c)),
        })
        .collect();
    let planted_recovered = planted
        .as_ref()
        .map(|_| heads.iter().filter(|h| h.planted == Some(true)).count());
    ctx.write_json(
        "selection.json",
        &SelectionReport {
            k,
            heads,
            planted_recovered,
        },
    )?;
    match (planted_recovered, planted) {
        (Some(r), Some(p)) => println!(
            "selected {k} heads; {r} of {} planted heads recovered",
            p.len()
        ),
        _ => println!("selected {k} heads"),
    }
    Ok(())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let splits = load_splits(ctx)?;
    let trained = train_predictor(ctx, &splits)?;
    trained.predictor.save(&ctx.path("predictor.json"))?;
    if let Some(t) = &trained.soft_targets {
        ctx.write_json("soft_targets.json", t)?;
    }
    ctx.write_json("split_manifest.json", &splits.manifest)?;
    let m = &trained.predictor.training;
    println!(
        "trained {:?} predictor on {} heads: {} iterations, final loss {:.6}",
        m.loss,
        trained.predictor.selection.len(),
        m.iterations,
        m.final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct CalibrationArtifact {
    predictor: CalibrationReport,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    baselines: BTreeMap<String, CalibrationReport>,
}

/// Question-side context and answer text scored by the untrained baselines.
fn baseline_pair(r: &Record) -> crate::Result<(String, String)> {
    Ok(match r {
        Record::Answer(a) => (a.question.clone(), a.answer.clone()),
        Record::Step(s) => {
            let full = format_cot(&s.question, &s.previous_steps, &s.step)?;
            let prefix = full[..full.len() - s.step.len()].to_string();
            (prefix, s.step.clone())
        }
    })
}

type BaselineScorer<'a> = dyn Fn(&str, &str) -> crate::Result<f64> + Sync + 'a;

fn baselines(ctx: &Ctx, test: &[Record]) -> Result<BTreeMap<String, CalibrationReport>> {
    let model = ctx.model()?;
    let n_bins = ctx.cfg.calibration.n_bins;
    let labels: Vec<bool> = test.iter().map(Record::label).collect();
    let verification = &ctx.cfg.decode.params.verification;
    let mut out = BTreeMap::new();
    let scorers: [(&str, &BaselineScorer); 2] = [
        ("sequence_likelihood", &|q, a| {
            Ok(sequence_likelihood(model.as_ref(), q, a)?.score)
        }),
        ("is_true_probability", &|q, a| {
            is_true_probability(model.as_ref(), q, a, verification)
        }),
    ];
    for (name, f) in scorers {
        let scores = ctx.exec.try_map(test, |r| {
            let (q, a) = baseline_pair(r)?;
            f(&q, &a)
        });
        match scores {
            Ok(s) => {
                out.insert(
                    name.to_string(),
                    CalibrationReport::compute(&PredictionSet::new(s, labels.clone())?, n_bins)?,
                );
            }
            Err(e)
                if matches!(
                    e,
                    Error::Config(_) | Error::Unsupported(_) | Error::ReplayMiss { .. }
                ) =>
            {
                eprintln!("skipping {name} baseline: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn calibration_table(report: &CalibrationArtifact) -> String {
    let mut s = String::from("| Method | ECE↓ | Brier↓ | AUC↑ |\n|---|---|---|---|\n");
    let mut row = |name: &str, r: &CalibrationReport| {
        let _ = writeln!(
            s,
            "| {name} | {:.4} | {:.4} | {:.4} |",
            r.ece, r.brier, r.auc
        );
    };
    for (name, r) in &report.baselines {
        row(name, r);
    }
    row("head_predictor", &report.predictor);
    s
}

pub fn eval_calibration(ctx: &Ctx) -> Result<()> {
    let splits = load_splits(ctx)?;
    let p = predictor(ctx, Some(&splits))?;
    let features =
        LabeledFeatures::from_activations(&splits.test, &p.selection, p.stats.as_deref())?;
    let preds = PredictionSet::new(p.predict_rows(&features)?, features.labels.clone())?;
    let report = CalibrationReport::compute(&preds, ctx.cfg.calibration.n_bins)?;
    let baselines = match (&splits.records, ctx.cfg.calibration.baselines) {
        (Some(split), true) => baselines(ctx, &split.test)?,
        _ => BTreeMap::new(),
    };
    let artifact = CalibrationArtifact {
        predictor: report,
        baselines,
    };
    ctx.write(
        "reliability.csv",
        &reliability_csv(&artifact.predictor.bins),
    )?;
    ctx.write_json("calibration_report.json", &artifact)?;
    let table = calibration_table(&artifact);
    ctx.write("calibration_table.md", &table)?;
    print!("{table}");
    Ok(())
}

fn load_tasks(path: &Path) -> Result<Vec<BenchmarkTask>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: BenchmarkTask = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        bail!(Error::validation(format!("{}: no tasks", path.display())));
    }
    Ok(tasks)
}

/// Accuracy table with percentage-point deltas against greedy decoding.
fn summary(runs: &[BenchmarkRun]) -> (String, String) {
    let base = runs
        .iter()
        .find(|r| r.strategy == Strategy::GreedyFewshot)
        .map(BenchmarkRun::accuracy);
    let mut csv = String::from("strategy,n,accuracy,delta_vs_greedy\n");
    let mut md = String::from("| Strategy | N | Accuracy (%) | Δ vs greedy |\n|---|---|---|---|\n");
    for r in runs {
        let acc = r.accuracy();
        let delta = base.map(|b| 100.0 * (acc - b));
        let _ = writeln!(
            csv,
            "{},{},{acc:.6},{}",
            r.strategy,
            r.rows.len(),
            delta.map_or_else(|| "NA".into(), |d| format!("{d:.6}"))
        );
        let shown = match delta {
            Some(d) if r.strategy != Strategy::GreedyFewshot => format!("{d:+.1}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {:.1} | {shown} |",
            r.strategy,
            r.rows.len(),
            100.0 * acc
        );
    }
    (csv, md)
}

pub fn decode(ctx: &Ctx) -> Result<()> {
    let dc = &ctx.cfg.decode;
    let model = ctx.model()?;
    let guided = dc.strategies.contains(&Strategy::Guided);
    let predictor = if guided {
        let splits = if ctx.cfg.predictor.bundle.is_none() {
            Some(load_splits(ctx)?)
        } else {
            None
        };
        Some(predictor(ctx, splits.as_ref())?)
    } else {
        None
    };
    let tasks = match &dc.tasks {
        Some(p) => load_tasks(p)?,
        None => toy_benchmark(dc.synthetic_tasks, dc.min_ops, dc.max_ops, ctx.cfg.seed),
    };
    let manifests = ctx.path("manifests");
    std::fs::create_dir_all(&manifests)
        .map_err(|e| Error::io(manifests.display().to_string(), e))?;
    let mut runs = Vec::with_capacity(dc.strategies.len());
    for &strategy in &dc.strategies {
        let params = crate::decoding::DecodeParams {
            strategy,
            seed: dc.params.seed ^ ctx.cfg.seed,
            ..dc.params.clone()
        };
        let run = run_benchmark(
            model.as_ref(),
            predictor.as_ref(),
            &tasks,
            &dc.exemplars,
            &params,
            ctx.exec,
            dc.timings,
        )
        .with_context(|| format!("strategy {strategy}"))?;
        let mut lines = String::new();
        for m in &run.manifests {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
        }
        ctx.write(&format!("manifests/{strategy}.jsonl"), &lines)?;
        runs.push(run);
    }
    let rows: Vec<_> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    ctx.write("results.csv", &results_csv(&rows))?;
    let (csv, md) = summary(&runs);
    ctx.write("summary.csv", &csv)?;
    ctx.write("summary.md", &md)?;
    print!("{md}");
    Ok(())
}

pub fn heatmap(ctx: &Ctx) -> Result<()> {
    let acc = match &ctx.cfg.heatmap.csv {
        Some(p) => read_heatmap_csv(p)?,
        None => {
            let splits = if ctx.cfg.probe.bundle.is_none() {
                Some(load_splits(ctx)?)
            } else {
                None
            };
            probe_grid(ctx, splits.as_ref())?.accuracies()
        }
    };
    ctx.write("heatmap.csv", &heatmap_csv_string(&acc))?;
    ctx.write("heatmap.svg", &heatmap_svg(&acc))?;
    println!("wrote {}x{} heatmap", acc.nrows(), acc.ncols());
    Ok(())
}

pub fn answer_diff(ctx: &Ctx) -> Result<()> {
    let ad = ctx
        .cfg
        .answer_diff
        .as_ref()
        .ok_or_else(|| Error::config("missing [answer_diff] section"))?;
    let splits = if ctx.cfg.probe.bundle.is_none() {
        Some(load_splits(ctx)?)
    } else {
        None
    };
    let grid = probe_grid(ctx, splits.as_ref())?;
    let model = ctx.model()?;
    let diff = answer_diff_map(
        &grid,
        model.as_ref(),
        &ad.question,
        &ad.answer_a,
        &ad.answer_b,
        ad.template,
    )?;
    ctx.write("answer_diff.csv", &heatmap_csv_string(&diff))?;
    if ctx.plot {
        ctx.write("answer_diff.svg", &heatmap_svg(&diff))?;
    }
    let max = diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = diff.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("answer difference range [{min:.4}, {max:.4}]");
    Ok(())
}

pub fn dataset_validate(ctx: &Ctx) -> Result<()> {
    let split = split_data(ctx)?;
    let m = split.manifest();
    ctx.write_json("split_manifest.json", &m)?;
    println!(
        "ok: {} train, {} validation, {} test records",
        m.counts.train, m.counts.validation, m.counts.test
    );
    Ok(())
}
