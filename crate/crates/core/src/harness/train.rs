//! Minibatch SGD training with per-epoch metrics, per-step norm logging and
//! the weight-decay / learning-rate-correction / norm-schedule variants.

use std::io::{Read, Write};
use std::path::Path;

use super::data::Dataset;
use super::model::{build_model, Model, ModelSpec, Weight};
use super::{HarnessError, Result};
use crate::dynamics::{
    lr_correction, rescale_channels, sgd_step, sgd_step_rows, OptimizerConfig, OptimizerMode, Trajectory,
};
use crate::numeric::{PrecisionMode, Rng};

/// Everything a single training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub model: ModelSpec,
    /// Schedule steps count optimizer updates.
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: PrecisionMode,
    /// Apply weight decay to the classifier only instead of the hidden
    /// layers.
    pub wd_last_layer_only: bool,
    /// Log every hidden channel norm at every step.
    pub record_trajectory: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
}

/// The applied `eta / |w|^2` of one hidden channel at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveStep {
    pub step: usize,
    pub layer: usize,
    pub channel: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Validation accuracy before the first update.
    pub initial_val_acc: f64,
    pub epochs: Vec<EpochMetrics>,
    pub divergence: Option<Divergence>,
    /// Hidden channel norms after the last update.
    pub final_norms: Vec<Vec<f64>>,
    /// Records for steps `0..=steps` when enabled; record `s` holds the
    /// norms used by update `s`.
    pub trajectory: Trajectory,
    pub effective_steps: Vec<EffectiveStep>,
    pub steps: usize,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map(|e| e.val_acc).unwrap_or(self.initial_val_acc)
    }

    /// `Err(Diverged)` for a diverged run.
    pub fn into_result(self) -> Result<Self> {
        match self.divergence {
            Some(Divergence { epoch, step }) => Err(HarnessError::Diverged { epoch, step }),
            None => Ok(self),
        }
    }
}

const SHUFFLE_STREAM: u64 = 0x5_4F1E;
pub const EVAL_CHUNK: usize = 512;

fn sgd_vec(p: PrecisionMode, values: &mut [f64], grads: &[f64], eta: f64) {
    let eta = p.round(eta);
    for (v, g) in values.iter_mut().zip(grads) {
        *v = p.sub(*v, p.mul(eta, *g));
    }
}

fn summarize(norms: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = norms.iter().flatten().copied().collect();
    if all.is_empty() {
        return (0.0, 0.0);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let max =
        all.iter().copied().fold(f64::NEG_INFINITY, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) });
    (mean, max)
}

fn check_spec(spec: &TrainSpec, train: &Dataset, reference: Option<&Trajectory>) -> Result<usize> {
    spec.optimizer.validate()?;
    if spec.batch_size < 2 {
        return Err(HarnessError::Config(format!("batch size must be >= 2, got {}", spec.batch_size)));
    }
    let steps_per_epoch = train.len() / spec.batch_size;
    if steps_per_epoch == 0 && spec.epochs > 0 {
        return Err(HarnessError::Config(format!(
            "{} training rows cannot fill a batch of {}",
            train.len(),
            spec.batch_size
        )));
    }
    if spec.optimizer.mode == OptimizerMode::LrCorrection && reference.is_none() && spec.epochs > 0 {
        return Err(crate::dynamics::DynamicsError::MissingTrajectory { step: 0, layer: 0, channel: 0 }.into());
    }
    Ok(steps_per_epoch)
}

struct Updater<'a> {
    spec: &'a TrainSpec,
    reference: Option<&'a Trajectory>,
}

impl Updater<'_> {
    /// Norm scheduling: at a decay event every plain hidden weight is
    /// rescaled by `1 / sqrt(multiplier)` instead of decaying the rate.
    fn norm_schedule(&self, model: &mut Model, step: usize) -> Result<()> {
        let opt = &self.spec.optimizer;
        if opt.mode != OptimizerMode::NormSchedule {
            return Ok(());
        }
        let Some(event) = opt.schedule.iter().find(|e| e.step == step) else {
            return Ok(());
        };
        let factor = 1.0 / event.multiplier.sqrt();
        let norms = model.channel_norms()?;
        for (layer, norms) in model.layers.iter_mut().zip(norms) {
            if let Weight::Plain(w) = &mut layer.weight {
                let targets: Vec<f64> = norms.iter().map(|n| n * factor).collect();
                *w = rescale_channels(w, &targets)?;
            }
        }
        Ok(())
    }

    fn apply(
        &self,
        model: &mut Model,
        grads: &super::model::Gradients,
        step: usize,
        norms: &[Vec<f64>],
        log: &mut Vec<EffectiveStep>,
    ) -> Result<()> {
        let opt = &self.spec.optimizer;
        let p = model.precision();
        let eta = opt.lr_at(step);
        let hidden_decay = if self.spec.wd_last_layer_only { 0.0 } else { opt.weight_decay };
        let head_decay = if self.spec.wd_last_layer_only { opt.weight_decay } else { 0.0 };
        for (l, (layer, g)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
            match &mut layer.weight {
                Weight::Plain(w) => {
                    let cols = w.shape()[1];
                    let etas: Vec<f64> = match (opt.mode, self.reference) {
                        (OptimizerMode::LrCorrection, Some(reference)) => (0..norms[l].len())
                            .map(|c| {
                                lr_correction(eta, &w.data()[c * cols..(c + 1) * cols], reference.norm(step, l, c)?)
                            })
                            .collect::<Result<_, _>>()?,
                        _ => vec![eta; norms[l].len()],
                    };
                    for (c, &rate) in etas.iter().enumerate() {
                        let sq = norms[l][c] * norms[l][c];
                        log.push(EffectiveStep { step, layer: l, channel: c, value: rate / sq });
                    }
                    *w = sgd_step_rows(w, &g.weight, &etas, hidden_decay)?;
                }
                Weight::Reparam(bw) => {
                    bw.v = sgd_step(&bw.v, &g.weight, eta, hidden_decay)?;
                    if let Some(gs) = &g.scale {
                        sgd_vec(p, &mut bw.g, gs, eta);
                    }
                }
            }
            if let (Some(b), Some(gb)) = (&mut layer.bias, &g.bias) {
                sgd_vec(p, b, gb, eta);
            }
            if let Some(a) = &mut layer.affine {
                if let Some(gg) = &g.gamma {
                    sgd_vec(p, &mut a.gamma, gg, eta);
                }
                if let Some(gb) = &g.beta {
                    sgd_vec(p, &mut a.beta, gb, eta);
                }
            }
        }
        model.head.weight = sgd_step(&model.head.weight, &grads.head_weight, eta, head_decay)?;
        sgd_vec(p, &mut model.head.bias, &grads.head_bias, eta);
        Ok(())
    }
}

/// Train from a fresh model built from `spec.model` and `spec.seed`.
/// `reference` supplies the norms the learning-rate correction replays.
/// Divergence (a non-finite loss) stops the run and is reported in the
/// result, with the partial epoch flagged.
pub fn train_model(
    spec: &TrainSpec,
    train: &Dataset,
    val: &Dataset,
    reference: Option<&Trajectory>,
) -> Result<(RunResult, Model)> {
    let steps_per_epoch = check_spec(spec, train, reference)?;
    let p = spec.precision;
    let mut model = build_model(&spec.model, spec.seed, p)?;
    let val_x = val.features().to_precision(p);
    let initial_val_acc = model.accuracy(&val_x, val.labels(), EVAL_CHUNK)?;
    let updater = Updater { spec, reference };
    let mut shuffle = Rng::with_stream(spec.seed, SHUFFLE_STREAM);
    let mut trajectory = Trajectory::new();
    let mut effective_steps = Vec::new();
    let mut epochs = Vec::with_capacity(spec.epochs);
    let mut divergence = None;
    let mut step = 0;

    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle.shuffle(&mut order);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for batch in order.chunks_exact(spec.batch_size).take(steps_per_epoch) {
            updater.norm_schedule(&mut model, step)?;
            let norms = model.channel_norms()?;
            if norms.iter().flatten().any(|n| !n.is_finite()) {
                divergence = Some(Divergence { epoch, step });
                losses.push(f64::NAN);
                break;
            }
            if spec.record_trajectory {
                for (l, layer_norms) in norms.iter().enumerate() {
                    trajectory.log_layer(step, l, layer_norms)?;
                }
            }
            let (x, y) = train.batch(batch, p);
            let (loss, grads) = model.loss_and_gradients(&x, &y)?;
            losses.push(loss);
            if !loss.is_finite() {
                divergence = Some(Divergence { epoch, step });
                break;
            }
            updater.apply(&mut model, &grads, step, &norms, &mut effective_steps)?;
            step += 1;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_acc = model.accuracy(&val_x, val.labels(), EVAL_CHUNK)?;
        let (mean_norm, max_norm) = summarize(&model.channel_norms()?);
        epochs.push(EpochMetrics { epoch, train_loss, val_acc, mean_norm, max_norm, diverged: divergence.is_some() });
        if divergence.is_some() {
            break;
        }
    }
    let final_norms = model.channel_norms()?;
    if spec.record_trajectory && divergence.is_none() {
        for (l, layer_norms) in final_norms.iter().enumerate() {
            trajectory.log_layer(step, l, layer_norms)?;
        }
    }
    let result =
        RunResult { initial_val_acc, epochs, divergence, final_norms, trajectory, effective_steps, steps: step };
    Ok((result, model))
}

pub const RUN_HEADER: [&str; 6] = ["epoch", "train_loss", "val_acc", "mean_norm", "max_norm", "diverged"];

/// One row per epoch, floats with six decimals.
pub fn write_run_csv<W: Write>(epochs: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_HEADER)?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_loss),
            format!("{:.6}", e.val_acc),
            format!("{:.6}", e.mean_norm),
            format!("{:.6}", e.max_norm),
            e.diverged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_csv<R: Read>(input: R) -> Result<Vec<EpochMetrics>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(RUN_HEADER) {
        return Err(HarnessError::Parse { offset: 0, message: format!("unexpected run header {header:?}") });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        let bad = |what: &str| HarnessError::Parse { offset, message: format!("invalid {what}") };
        let float = |i: usize, what: &str| row.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(what));
        out.push(EpochMetrics {
            epoch: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("epoch"))?,
            train_loss: float(1, "train_loss")?,
            val_acc: float(2, "val_acc")?,
            mean_norm: float(3, "mean_norm")?,
            max_norm: float(4, "max_norm")?,
            diverged: row.get(5).and_then(|s| s.parse().ok()).ok_or_else(|| bad("diverged"))?,
        });
    }
    Ok(out)
}

/// Write the per-epoch CSV of a run to `path`.
pub fn emit_csv(result: &RunResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_run_csv(&result.epochs, std::io::BufWriter::new(file))
}
