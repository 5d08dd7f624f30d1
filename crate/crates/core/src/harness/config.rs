//! Experiment configuration files.
//!
//! The format is TOML restricted to five tables of scalar or array keys:
//!
//! ```text
//! [run]        seed (required), epochs, batch_size, precision, accumulator,
//!              record_trajectory, trajectory_out, replay, output, name
//! [dataset]    format, path, labels_path, classes, train_fraction,
//!              input_scale, image, samples, features, clusters_per_class,
//!              separation, seed
//! [model]      architecture, widths, kernel, strides, norm, norm_axis,
//!              affine, epsilon, weight, bwn_order, activation
//! [optimizer]  eta, weight_decay, mode, decay_every_epochs,
//!              decay_multiplier, wd_last_layer_only
//! [experiment] trials, sizes, top_k, etas, claim_seed, input_scale
//! ```
//!
//! Unknown tables or keys are errors. `NORMLAB_SEED`, when set, replaces
//! `run.seed`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::data::{load_source, split, DataSource, Dataset, MixtureSpec};
use super::model::{Activation, ModelSpec, WeightParam};
use super::train::TrainSpec;
use super::{HarnessError, Result};
use crate::activation_norm::{NormAxis, NormMetric, NormScheme, DEFAULT_EPSILON};
use crate::dynamics::{step_decay_schedule, OptimizerConfig, OptimizerMode};
use crate::numeric::{Accumulator, Element, PrecisionMode};
use crate::weight_norm::NormOrder;

pub const SEED_ENV: &str = "NORMLAB_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::element")]
    pub precision: Element,
    #[serde(default = "defaults::accumulator")]
    pub accumulator: Accumulator,
    #[serde(default)]
    pub record_trajectory: bool,
    /// Where `train` writes the trajectory; setting it turns recording on.
    #[serde(default)]
    pub trajectory_out: Option<PathBuf>,
    /// Reference trajectory for `lr-correction`.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    /// Run CSV destination for `train`; stdout when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Synthetic,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "defaults::format")]
    pub format: DataFormat,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    /// Multiplies every feature after loading.
    #[serde(default = "defaults::one")]
    pub input_scale: f64,
    /// `[height, width, channels]` of flattened NHWC rows.
    #[serde(default)]
    pub image: Option<[usize; 3]>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub features: Option<usize>,
    #[serde(default)]
    pub clusters_per_class: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    /// Generator seed of the synthetic set; independent of `run.seed` so
    /// every run sees the same data.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        toml::from_str("").expect("all dataset keys have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Plain,
    Wn,
    Bwn,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::architecture")]
    pub architecture: Architecture,
    /// Hidden widths (MLP) or channels (CNN).
    #[serde(default = "defaults::widths")]
    pub widths: Vec<usize>,
    #[serde(default = "defaults::kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub strides: Vec<usize>,
    /// `l2`, `l1`, `linf`, `top<k>`, `mean-only` or `none`.
    #[serde(default = "defaults::norm")]
    pub norm: String,
    #[serde(default = "defaults::axis")]
    pub norm_axis: NormAxis,
    #[serde(default = "defaults::yes")]
    pub affine: bool,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::weight")]
    pub weight: WeightKind,
    #[serde(default = "defaults::bwn_order")]
    pub bwn_order: NormOrder,
    #[serde(default = "defaults::activation")]
    pub activation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all model keys have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::mode")]
    pub mode: OptimizerMode,
    /// 0 disables the schedule.
    #[serde(default)]
    pub decay_every_epochs: usize,
    #[serde(default = "defaults::multiplier")]
    pub decay_multiplier: f64,
    #[serde(default)]
    pub wd_last_layer_only: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        toml::from_str("").expect("all optimizer keys have defaults")
    }
}

/// Knobs of the multi-arm experiments that are not part of a single run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default = "defaults::etas")]
    pub etas: Vec<f64>,
    #[serde(default = "defaults::claim_seed")]
    pub claim_seed: u64,
    /// Feature scale of the half-precision experiment.
    #[serde(default = "defaults::half_scale")]
    pub input_scale: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("all experiment keys have defaults")
    }
}

mod defaults {
    use super::*;

    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn element() -> Element {
        Element::F64
    }
    pub fn accumulator() -> Accumulator {
        Accumulator::Same
    }
    pub fn format() -> DataFormat {
        DataFormat::Synthetic
    }
    pub fn train_fraction() -> f64 {
        0.75
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn architecture() -> Architecture {
        Architecture::Mlp
    }
    pub fn widths() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn kernel() -> usize {
        3
    }
    pub fn norm() -> String {
        "l2".into()
    }
    pub fn axis() -> NormAxis {
        NormAxis::Batch
    }
    pub fn yes() -> bool {
        true
    }
    pub fn epsilon() -> f64 {
        DEFAULT_EPSILON
    }
    pub fn weight() -> WeightKind {
        WeightKind::Plain
    }
    pub fn bwn_order() -> NormOrder {
        NormOrder::L2
    }
    pub fn activation() -> String {
        "relu".into()
    }
    pub fn eta() -> f64 {
        0.1
    }
    pub fn mode() -> OptimizerMode {
        OptimizerMode::Plain
    }
    pub fn multiplier() -> f64 {
        0.1
    }
    pub fn trials() -> usize {
        200_000
    }
    pub fn sizes() -> Vec<usize> {
        vec![16, 64, 256]
    }
    pub fn top_k() -> usize {
        10
    }
    pub fn etas() -> Vec<f64> {
        vec![1e-2, 3e-3, 1e-3, 3e-4]
    }
    pub fn claim_seed() -> u64 {
        7
    }
    pub fn half_scale() -> f64 {
        300.0
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Parse a normalization name from the config into a scheme.
pub fn parse_norm(name: &str, axis: NormAxis, affine: bool, epsilon: f64) -> Result<Option<NormScheme>> {
    let scheme = match name.trim().to_ascii_lowercase().as_str() {
        "none" => return Ok(None),
        "mean-only" | "mean_only" => NormScheme::mean_only(),
        other => NormScheme::batch(other.parse::<NormMetric>()?),
    };
    let scheme = NormScheme { axis, ..scheme }.with_affine(affine).with_epsilon(epsilon);
    scheme.validate()?;
    Ok(Some(scheme))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply `NORMLAB_SEED`. Relative paths inside
    /// the file are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    /// Replace `run.seed` with the parsed override, if any.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.run.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.dataset.labels_path);
        fix(&mut self.run.replay);
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.batch_size < 2 {
            return Err(HarnessError::Config(format!("batch_size must be >= 2, got {}", self.run.batch_size)));
        }
        self.precision()?;
        self.norm()?;
        self.run_activation()?;
        if !(self.dataset.input_scale > 0.0) {
            return Err(HarnessError::Config("input_scale must be > 0".into()));
        }
        if let Some(NormScheme { metric: NormMetric::TopK(k), axis: NormAxis::Batch, .. }) = self.norm()? {
            if k > self.run.batch_size {
                return Err(HarnessError::Config(format!("top{k} needs a batch of at least {k}")));
            }
        }
        match self.dataset.format {
            DataFormat::Csv if self.dataset.path.is_none() => {
                Err(HarnessError::Config("csv dataset needs `path`".into()))
            }
            DataFormat::Idx if self.dataset.path.is_none() || self.dataset.labels_path.is_none() => {
                Err(HarnessError::Config("idx dataset needs `path` and `labels_path`".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn precision(&self) -> Result<PrecisionMode> {
        Ok(PrecisionMode::new(self.run.precision, self.run.accumulator)?)
    }

    pub fn norm(&self) -> Result<Option<NormScheme>> {
        let m = &self.model;
        parse_norm(&m.norm, m.norm_axis, m.affine, m.epsilon)
    }

    fn run_activation(&self) -> Result<Activation> {
        self.model.activation.parse()
    }

    pub fn data_source(&self) -> DataSource {
        let d = &self.dataset;
        match d.format {
            DataFormat::Synthetic => {
                let base = MixtureSpec::default();
                DataSource::Synthetic(MixtureSpec {
                    samples: d.samples.unwrap_or(base.samples),
                    features: d.features.unwrap_or(base.features),
                    classes: d.classes.unwrap_or(base.classes),
                    clusters_per_class: d.clusters_per_class.unwrap_or(base.clusters_per_class),
                    separation: d.separation.unwrap_or(base.separation),
                    seed: d.seed.unwrap_or(base.seed),
                })
            }
            DataFormat::Csv => DataSource::Csv { path: d.path.clone().unwrap_or_default(), classes: d.classes },
            DataFormat::Idx => DataSource::Idx {
                images: d.path.clone().unwrap_or_default(),
                labels: d.labels_path.clone().unwrap_or_default(),
                classes: d.classes.unwrap_or(10),
            },
        }
    }

    /// `(train, validation)` with the input scale applied. The split is
    /// seeded by `run.seed`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let mut ds = load_source(&self.data_source())?;
        if let Some(image) = self.dataset.image {
            ds = ds.with_image(image)?;
        }
        let (train, val) = split(&ds, self.dataset.train_fraction, self.run.seed)?;
        let s = self.dataset.input_scale;
        Ok(if s == 1.0 { (train, val) } else { (train.scaled(s), val.scaled(s)) })
    }

    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let m = &self.model;
        let norm = self.norm()?;
        let weight = match m.weight {
            WeightKind::Plain => WeightParam::Plain,
            WeightKind::Wn => WeightParam::WN,
            WeightKind::Bwn => WeightParam::BWN(m.bwn_order),
        };
        let mut spec = match m.architecture {
            Architecture::Mlp => ModelSpec::mlp(data.dim(), &m.widths, norm, weight, data.classes()),
            Architecture::Cnn => {
                let image = data.image().ok_or_else(|| {
                    HarnessError::ShapeChain("cnn needs an image-shaped dataset (`dataset.image`)".into())
                })?;
                ModelSpec::cnn(image, &m.widths, m.kernel, &m.strides, norm, weight, data.classes())
            }
        };
        let activation = self.run_activation()?;
        spec.layers.iter_mut().for_each(|l| l.activation = activation);
        spec.geometry()?;
        Ok(spec)
    }

    pub fn optimizer(&self, steps_per_epoch: usize) -> Result<OptimizerConfig> {
        let o = &self.optimizer;
        let total = steps_per_epoch * self.run.epochs;
        let schedule = step_decay_schedule(o.decay_every_epochs * steps_per_epoch, o.decay_multiplier, total);
        Ok(OptimizerConfig::new(o.eta, o.weight_decay, schedule, o.mode)?)
    }

    pub fn train_spec(&self, train: &Dataset) -> Result<TrainSpec> {
        Ok(TrainSpec {
            model: self.model_spec(train)?,
            optimizer: self.optimizer(train.len() / self.run.batch_size)?,
            epochs: self.run.epochs,
            batch_size: self.run.batch_size,
            seed: self.run.seed,
            precision: self.precision()?,
            wd_last_layer_only: self.optimizer.wd_last_layer_only,
            record_trajectory: self.run.record_trajectory || self.run.trajectory_out.is_some(),
        })
    }
}
