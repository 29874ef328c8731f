//! Run configuration, one TOML document per run.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! kind = "planted"
//! n_layers = 8
//! n_heads = 8
//! d_head = 16
//! n_planted = 10
//!
//! [data.synthetic]
//! kind = "cot"
//! questions = 750
//! ```

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Template;
use crate::decoding::{DecodeParams, Strategy};
use crate::error::{Error, Result};
use crate::model::planted::{PlantedConfig, ReasonerProfile};
use crate::model::{replay_model, CognitiveModel, HeadCoord, ModelDims, PlantedSignalModel};
use crate::predictor::{LossKind, TrainHyper};
use crate::probing::ProbeHyper;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_diff: Option<AnswerDiffConfig>,
    #[serde(default)]
    pub heatmap: HeatmapConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config("missing [model] section"))
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::config("missing [data] section"))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(d) = &self.data {
            d.validate()?;
        }
        self.probe.hyper().validate()?;
        self.predictor.hyper().validate()?;
        if self.predictor.n_bins == 0 || self.calibration.n_bins == 0 {
            return Err(Error::validation("n_bins must be at least 1"));
        }
        if self.predictor.n_folds < 2 {
            return Err(Error::validation("n_folds must be at least 2"));
        }
        if self.selection.k == Some(0) {
            return Err(Error::validation("k must be at least 1"));
        }
        self.decode.params.validate()?;
        if self.decode.strategies.is_empty() {
            return Err(Error::validation("decode.strategies is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Planted(PlantedModelConfig),
    Replay(ReplayModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Explicit planted heads; when absent `n_planted` heads are drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Vec<HeadCoord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_planted: Option<usize>,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub profile: ReasonerProfile,
}

fn default_vocab() -> usize {
    64
}

fn default_strength() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    2.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayModelConfig {
    pub trace: PathBuf,
    pub replay: PathBuf,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let ModelConfig::Planted(p) = self {
            ModelDims::new(p.n_layers, p.n_heads, p.d_head, p.vocab_size)?;
            if p.planted.is_some() && p.n_planted.is_some() {
                return Err(Error::config("give either planted or n_planted, not both"));
            }
            if let Some(n) = p.n_planted {
                if n == 0 || n > p.n_layers * p.n_heads {
                    return Err(Error::config(format!(
                        "n_planted = {n} outside 1..={}",
                        p.n_layers * p.n_heads
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, run_seed: u64) -> Result<Box<dyn CognitiveModel>> {
        match self {
            ModelConfig::Planted(p) => Ok(Box::new(self.planted(p, run_seed)?)),
            ModelConfig::Replay(r) => Ok(Box::new(replay_model(&r.trace, &r.replay)?)),
        }
    }

    fn planted(&self, p: &PlantedModelConfig, run_seed: u64) -> Result<PlantedSignalModel> {
        let dims = ModelDims::new(p.n_layers, p.n_heads, p.d_head, p.vocab_size)?;
        let seed = p.seed.unwrap_or(run_seed);
        let planted = match &p.planted {
            Some(c) => c.clone(),
            None => draw_planted(&dims, p.n_planted.unwrap_or(p.n_heads), seed),
        };
        PlantedSignalModel::new(PlantedConfig {
            dims,
            planted,
            strength: p.strength,
            seed,
            separation: p.separation,
            profile: p.profile.clone(),
        })
    }

    /// Planted heads of a planted model, sorted.
    pub fn planted_heads(&self, run_seed: u64) -> Result<Option<Vec<HeadCoord>>> {
        match self {
            ModelConfig::Planted(p) => {
                let mut c = self.planted(p, run_seed)?.planted().to_vec();
                c.sort();
                Ok(Some(c))
            }
            ModelConfig::Replay(_) => Ok(None),
        }
    }
}

/// `n` distinct coordinates drawn uniformly with a seeded generator.
pub fn draw_planted(dims: &ModelDims, n: usize, seed: u64) -> Vec<HeadCoord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9_1A47);
    let mut coords: Vec<HeadCoord> = sample(&mut rng, dims.n_coords(), n.min(dims.n_coords()))
        .into_iter()
        .map(|i| HeadCoord::new(i / dims.n_heads, i % dims.n_heads))
        .collect();
    coords.sort();
    coords
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Labeled `.vtrc` activations, used instead of running a model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Overrides each record's own template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<Template>,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_true() -> bool {
    true
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let sources = [
            self.path.is_some(),
            self.synthetic.is_some(),
            self.trace.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::config(
                "[data] needs exactly one of path, synthetic or trace",
            ));
        }
        if let Some(s) = &self.synthetic {
            if s.questions == 0 || s.min_ops == 0 || s.min_ops > s.max_ops {
                return Err(Error::config(
                    "synthetic data needs questions >= 1 and 1 <= min_ops <= max_ops",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: Template,
    pub questions: usize,
    #[serde(default = "default_min_ops")]
    pub min_ops: usize,
    #[serde(default = "default_max_ops")]
    pub max_ops: usize,
}

fn default_min_ops() -> usize {
    2
}

fn default_max_ops() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Probe bundle from an earlier `probe` run; probes are refitted when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let h = ProbeHyper::default();
        Self {
            learning_rate: h.learning_rate,
            l2: h.l2,
            max_iter: h.max_iter,
            tol: h.tol,
            bundle: None,
        }
    }
}

impl ProbeConfig {
    pub fn hyper(&self) -> ProbeHyper {
        ProbeHyper {
            learning_rate: self.learning_rate,
            l2: self.l2,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Defaults to the number of heads per layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub loss: LossKind,
    pub n_folds: usize,
    pub n_bins: usize,
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
    /// Predictor bundle from an earlier `train-predictor` run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            loss: LossKind::Ece,
            n_folds: 5,
            n_bins: 10,
            learning_rate: h.learning_rate,
            max_iter: h.max_iter,
            tol: h.tol,
            standardize: true,
            bundle: None,
        }
    }
}

impl PredictorConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.learning_rate,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub n_bins: usize,
    /// Also score the untrained baselines when the model supports them.
    pub baselines: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            baselines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategies: Vec<Strategy>,
    /// JSON-lines `{id, question, answer}`; a synthetic benchmark otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    pub synthetic_tasks: usize,
    pub min_ops: usize,
    pub max_ops: usize,
    pub exemplars: Vec<String>,
    /// Record per-question wall time; breaks byte-identical reruns.
    pub timings: bool,
    pub params: DecodeParams,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategies: vec![
                Strategy::Guided,
                Strategy::GreedyFewshot,
                Strategy::SelfConsistency,
                Strategy::RandomSelect,
            ],
            tasks: None,
            synthetic_tasks: 200,
            min_ops: default_min_ops(),
            max_ops: default_max_ops(),
            exemplars: Vec::new(),
            timings: false,
            params: DecodeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerDiffConfig {
    pub question: String,
    pub answer_a: String,
    pub answer_b: String,
    #[serde(default = "default_template")]
    pub template: Template,
}

fn default_template() -> Template {
    Template::NonCot
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Heatmap CSV to re-render instead of a probe bundle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}
