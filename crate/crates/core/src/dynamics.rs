//! SGD with weight decay under scale-invariant layers: effective step size
//! accounting, the learning-rate correction that replays a weight-decay
//! run's norms, norm scheduling, and a numeric check of the first-order
//! direction update.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation_norm::{
    norm_backward, norm_forward, Affine, NormError, NormMetric, NormScheme, NormStats, StatsMode,
};
use crate::numeric::{NumericError, PrecisionMode, Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("weight vector has zero norm")]
    ZeroNorm,
    #[error("no trajectory record for step {step}, layer {layer}, channel {channel}")]
    MissingTrajectory { step: usize, layer: usize, channel: usize },
    #[error("objective is not scale invariant (relative change {0:e})")]
    NotScaleInvariant(f64),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory file: {0}")]
    TrajectoryFormat(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    Plain,
    /// Per-channel rate `eta * |w|^2 / |w_ref|^2` from a recorded trajectory.
    LrCorrection,
    /// Constant rate; channel norms follow a target that grows by
    /// `1 / sqrt(multiplier)` at every decay event.
    NormSchedule,
}

impl fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerMode::Plain => "plain",
            OptimizerMode::LrCorrection => "lr-correction",
            OptimizerMode::NormSchedule => "norm-schedule",
        })
    }
}

impl FromStr for OptimizerMode {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(OptimizerMode::Plain),
            "lr-correction" => Ok(OptimizerMode::LrCorrection),
            "norm-schedule" => Ok(OptimizerMode::NormSchedule),
            other => Err(DynamicsError::InvalidConfig(format!("unknown optimizer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEvent {
    pub step: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub weight_decay: f64,
    pub schedule: Vec<ScheduleEvent>,
    pub mode: OptimizerMode,
}

impl OptimizerConfig {
    pub fn new(
        eta: f64,
        weight_decay: f64,
        schedule: Vec<ScheduleEvent>,
        mode: OptimizerMode,
    ) -> Result<Self, DynamicsError> {
        let cfg = Self { eta, weight_decay, schedule, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(DynamicsError::InvalidConfig(format!("learning rate must be > 0, got {}", self.eta)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DynamicsError::InvalidConfig(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(e) = self.schedule.iter().find(|e| !(e.multiplier > 0.0)) {
            return Err(DynamicsError::InvalidConfig(format!("multiplier must be > 0, got {}", e.multiplier)));
        }
        if self.schedule.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(DynamicsError::InvalidConfig("schedule steps must be strictly increasing".into()));
        }
        Ok(())
    }

    fn multiplier_until(&self, step: usize) -> f64 {
        self.schedule.iter().take_while(|e| e.step <= step).map(|e| e.multiplier).product()
    }

    /// Base learning rate at `step`; constant in norm-schedule mode.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.mode {
            OptimizerMode::NormSchedule => self.eta,
            _ => self.eta * self.multiplier_until(step),
        }
    }

    /// Norm multiplier at `step` for norm scheduling: `prod 1/sqrt(m)` over
    /// events so far, so the effective step tracks the decayed rate.
    pub fn norm_factor_at(&self, step: usize) -> f64 {
        1.0 / self.multiplier_until(step).sqrt()
    }

    pub fn is_decay_event(&self, step: usize) -> bool {
        self.schedule.iter().any(|e| e.step == step)
    }
}

/// Events every `every` steps (step `every`, `2 * every`, ...) below `total`.
pub fn step_decay_schedule(every: usize, multiplier: f64, total: usize) -> Vec<ScheduleEvent> {
    if every == 0 {
        return Vec::new();
    }
    (1..).map(|i| i * every).take_while(|&s| s < total).map(|step| ScheduleEvent { step, multiplier }).collect()
}

/// `w' = w - eta * (grad + lambda * w)`.
pub fn sgd_step(w: &Tensor, grad: &Tensor, eta: f64, lambda: f64) -> Result<Tensor, DynamicsError> {
    let rows = if w.rank() == 2 { w.shape()[0] } else { 1 };
    sgd_step_rows(w, grad, &vec![eta; rows], lambda)
}

/// SGD with one learning rate per row (channel).
pub fn sgd_step_rows(w: &Tensor, grad: &Tensor, etas: &[f64], lambda: f64) -> Result<Tensor, DynamicsError> {
    if w.shape() != grad.shape() {
        return Err(
            NumericError::ShapeMismatch(format!("weights {:?} vs gradient {:?}", w.shape(), grad.shape())).into()
        );
    }
    let p = w.precision();
    let cols = w.len() / etas.len().max(1);
    let lambda = p.round(lambda);
    let data = w
        .data()
        .iter()
        .zip(grad.data())
        .enumerate()
        .map(|(i, (&wi, &gi))| {
            let eta = p.round(etas[i / cols]);
            let total = if lambda == 0.0 { gi } else { p.add(gi, p.mul(lambda, wi)) };
            p.sub(wi, p.mul(eta, total))
        })
        .collect();
    Ok(Tensor::from_raw(w.shape().to_vec(), data, p))
}

fn squared_norm(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum()
}

/// `eta / |w|_2^2`.
pub fn effective_step(eta: f64, w: &[f64]) -> Result<f64, DynamicsError> {
    let sq = squared_norm(w);
    if !(sq > 0.0) {
        return Err(DynamicsError::ZeroNorm);
    }
    Ok(eta / sq)
}

/// `eta * |w|^2 / |w_ref|^2`, the rate matching the reference run's
/// effective step size.
pub fn lr_correction(eta: f64, w: &[f64], w_ref_norm: f64) -> Result<f64, DynamicsError> {
    if !(w_ref_norm > 0.0) {
        return Err(DynamicsError::ZeroNorm);
    }
    Ok(eta * squared_norm(w) / (w_ref_norm * w_ref_norm))
}

/// Rescale every row of `w` to the matching entry of `targets`.
pub fn rescale_channels(w: &Tensor, targets: &[f64]) -> Result<Tensor, DynamicsError> {
    let (rows, cols) = w.dims2()?;
    if targets.len() != rows {
        return Err(NumericError::ShapeMismatch(format!("{} targets for {rows} channels", targets.len())).into());
    }
    let p = w.precision();
    let mut data = w.data().to_vec();
    for (i, &target) in targets.iter().enumerate() {
        let row = &mut data[i * cols..(i + 1) * cols];
        let norm = squared_norm(row).sqrt();
        if !(norm > 0.0) {
            return Err(DynamicsError::ZeroNorm);
        }
        let factor = target / norm;
        for x in row.iter_mut() {
            *x = p.round(*x * factor);
        }
    }
    Ok(Tensor::from_raw(w.shape().to_vec(), data, p))
}

/// Multiplier applied to norm targets at a decay event (rate multiplier 0.1).
pub const NORM_DECAY_FACTOR: f64 = 3.162_277_660_168_379_5;

/// Rescale channels to `targets`; on a decay event the targets are first
/// multiplied by sqrt(10). Returns the new weights and targets.
pub fn norm_schedule_step(w: &Tensor, targets: &[f64], decay_event: bool) -> Result<(Tensor, Vec<f64>), DynamicsError> {
    if targets.iter().any(|&t| !(t > 0.0)) {
        return Err(DynamicsError::InvalidConfig("norm targets must be > 0".into()));
    }
    let targets: Vec<f64> =
        if decay_event { targets.iter().map(|t| t * NORM_DECAY_FACTOR).collect() } else { targets.to_vec() };
    Ok((rescale_channels(w, &targets)?, targets))
}

/// One logged channel norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub layer: usize,
    pub channel: usize,
    pub norm: f64,
}

pub const TRAJECTORY_HEADER: [&str; 4] = ["step", "layer", "channel", "norm"];

/// Append-only log of per-step, per-channel weight norms, ordered by
/// `(step, layer, channel)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    records: Vec<TrajectoryRecord>,
    index: HashMap<(usize, usize, usize), usize>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TrajectoryRecord) -> Result<(), DynamicsError> {
        if !(record.norm > 0.0) || !record.norm.is_finite() {
            return Err(DynamicsError::TrajectoryFormat(format!(
                "norm must be positive and finite, got {} at step {}",
                record.norm, record.step
            )));
        }
        let key = (record.step, record.layer, record.channel);
        if let Some(last) = self.records.last() {
            if (last.step, last.layer, last.channel) >= key {
                return Err(DynamicsError::TrajectoryFormat(format!(
                    "record {key:?} is not after {:?}",
                    (last.step, last.layer, last.channel)
                )));
            }
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Log every channel of `layer` at `step`.
    pub fn log_layer(&mut self, step: usize, layer: usize, norms: &[f64]) -> Result<(), DynamicsError> {
        for (channel, &norm) in norms.iter().enumerate() {
            self.push(TrajectoryRecord { step, layer, channel, norm })?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn norm(&self, step: usize, layer: usize, channel: usize) -> Result<f64, DynamicsError> {
        self.index.get(&(step, layer, channel)).map(|&i| self.records[i].norm).ok_or(DynamicsError::MissingTrajectory {
            step,
            layer,
            channel,
        })
    }

    /// Reference norms for every channel of a layer at a step.
    pub fn layer_norms(&self, step: usize, layer: usize, channels: usize) -> Result<Vec<f64>, DynamicsError> {
        (0..channels).map(|c| self.norm(step, layer, c)).collect()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.records.last().map(|r| r.step)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DynamicsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_HEADER)?;
        for r in &self.records {
            w.write_record([r.step.to_string(), r.layer.to_string(), r.channel.to_string(), r.norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse and validate a trajectory file (exact header, ordering,
    /// uniqueness and positive norms).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, DynamicsError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers()?.clone();
        if header.iter().ne(TRAJECTORY_HEADER) {
            return Err(DynamicsError::TrajectoryFormat(format!(
                "expected header {}, found {}",
                TRAJECTORY_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut traj = Trajectory::new();
        for row in reader.records() {
            let row = row?;
            let at = row.position().map(|p| p.byte()).unwrap_or(0);
            let bad = |what: &str| DynamicsError::TrajectoryFormat(format!("invalid {what} at byte {at}"));
            if row.len() != 4 {
                return Err(bad("column count"));
            }
            let step = row[0].parse().map_err(|_| bad("step"))?;
            let layer = row[1].parse().map_err(|_| bad("layer"))?;
            let channel = row[2].parse().map_err(|_| bad("channel"))?;
            let norm = row[3].parse().map_err(|_| bad("norm"))?;
            traj.push(TrajectoryRecord { step, layer, channel, norm })?;
        }
        Ok(traj)
    }
}

/// Outcome of the norm-growth probe over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub channels: usize,
    /// Fraction of channels whose final norm exceeds their initial norm.
    pub grew_fraction: f64,
    /// `grew_fraction >= 0.9`.
    pub growth: bool,
    /// Largest per-channel max/min norm ratio over the trailing window.
    pub trailing_ratio: f64,
    /// `trailing_ratio < 2`.
    pub bounded: bool,
}

pub const GROWTH_FRACTION: f64 = 0.9;
pub const BOUNDED_RATIO: f64 = 2.0;

/// Summarize norm growth. The trailing window is the last quarter of the
/// logged steps.
pub fn norm_growth_probe(traj: &Trajectory) -> GrowthReport {
    let mut per_channel: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for r in traj.records() {
        per_channel.entry((r.layer, r.channel)).or_default().push(r.norm);
    }
    let channels = per_channel.len();
    let mut grew = 0usize;
    let mut trailing_ratio: f64 = 1.0;
    for norms in per_channel.values() {
        if norms.last() > norms.first() {
            grew += 1;
        }
        let start = norms.len() - (norms.len() / 4).max(1);
        let window = &norms[start..];
        let max = window.iter().copied().fold(f64::MIN, f64::max);
        let min = window.iter().copied().fold(f64::MAX, f64::min);
        trailing_ratio = trailing_ratio.max(max / min);
    }
    let grew_fraction = if channels == 0 { 0.0 } else { grew as f64 / channels as f64 };
    GrowthReport {
        channels,
        grew_fraction,
        growth: channels > 0 && grew_fraction >= GROWTH_FRACTION,
        trailing_ratio,
        bounded: trailing_ratio < BOUNDED_RATIO,
    }
}

/// A loss with `L(a w) = L(w)` for every `a > 0`.
pub trait ScaleInvariantObjective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> Result<f64, DynamicsError>;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, DynamicsError>;
}

/// Single-channel linear layer on a fixed batch, followed by normalization
/// and a fixed squared-error head: `L(w) = mean((norm(X w) - t)^2) / 2`.
#[derive(Debug, Clone)]
pub struct NormalizedLinearProbe {
    inputs: Tensor,
    targets: Vec<f64>,
    scheme: NormScheme,
}

/// Epsilon used by the probe: small enough that the objective is scale
/// invariant to well below the precheck tolerance.
pub const PROBE_EPSILON: f64 = 1e-12;

impl NormalizedLinearProbe {
    pub fn new(inputs: Tensor, targets: Vec<f64>, scheme: NormScheme) -> Result<Self, DynamicsError> {
        let (rows, _) = inputs.dims2()?;
        if targets.len() != rows {
            return Err(NumericError::ShapeMismatch(format!("{} targets for {rows} samples", targets.len())).into());
        }
        scheme.validate()?;
        Ok(Self { inputs, targets, scheme })
    }

    /// Gaussian batch of `batch` samples in `dim` dimensions with Gaussian
    /// targets, all drawn from `seed`.
    pub fn random(dim: usize, batch: usize, metric: NormMetric, seed: u64) -> Result<Self, DynamicsError> {
        let mut rng = Rng::new(seed);
        let inputs: Vec<f64> = (0..dim * batch).map(|_| rng.normal()).collect();
        let targets: Vec<f64> = (0..batch).map(|_| rng.normal()).collect();
        let scheme = NormScheme::batch(metric).with_epsilon(PROBE_EPSILON).with_affine(false);
        Self::new(Tensor::from_f64(vec![batch, dim], inputs)?, targets, scheme)
    }

    fn forward(&self, w: &[f64]) -> Result<(Tensor, crate::activation_norm::NormCache), DynamicsError> {
        let column = Tensor::from_f64(vec![w.len(), 1], w.to_vec())?;
        let z = self.inputs.matmul(&column)?;
        let mut stats = NormStats::new(1, 0.9);
        Ok(norm_forward(&z, &self.scheme, &Affine::identity(1), StatsMode::Train, &mut stats)?)
    }
}

impl ScaleInvariantObjective for NormalizedLinearProbe {
    fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    fn loss(&self, w: &[f64]) -> Result<f64, DynamicsError> {
        let (y, _) = self.forward(w)?;
        let n = self.targets.len() as f64;
        Ok(y.data().iter().zip(&self.targets).map(|(a, t)| 0.5 * (a - t).powi(2)).sum::<f64>() / n)
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let (y, cache) = self.forward(w)?;
        let n = self.targets.len() as f64;
        let gy: Vec<f64> = y.data().iter().zip(&self.targets).map(|(a, t)| (a - t) / n).collect();
        let gy = Tensor::from_f64(vec![gy.len(), 1], gy)?;
        let gz = norm_backward(&gy, &cache, &self.scheme)?.x;
        Ok(self.inputs.transpose()?.matmul(&gz)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimReport {
    pub eta: f64,
    /// `|w_hat_{t+1}^actual - w_hat_{t+1}^claimed|` at `eta`.
    pub residual: f64,
    /// Same residual at `eta / 2`.
    pub residual_half: f64,
    pub ratio_at_half_eta: f64,
    /// `|w_hat_t . (claimed - w_hat_t)|`, zero up to rounding.
    pub tangent_error: f64,
    /// Relative difference of `grad L(2w)` from `grad L(w) / 2`.
    pub gradient_scaling_error: f64,
    /// Measured `|w_hat_{t+1} - w_hat_t|` at `eta`.
    pub direction_step: f64,
    /// `effective_step(eta, w) * |(I - w_hat w_hat^T) grad L(w_hat)|`.
    pub predicted_step: f64,
}

fn norm(v: &[f64]) -> f64 {
    squared_norm(v).sqrt()
}

struct StepCheck {
    residual: f64,
    tangent: f64,
    actual_step: f64,
    predicted_step: f64,
}

fn residual_at(objective: &impl ScaleInvariantObjective, w0: &[f64], eta: f64) -> Result<StepCheck, DynamicsError> {
    let rho = norm(w0);
    let unit: Vec<f64> = w0.iter().map(|x| x / rho).collect();
    let g = objective.grad(w0)?;
    let w1: Vec<f64> = w0.iter().zip(&g).map(|(w, gi)| w - eta * gi).collect();
    let rho1 = norm(&w1);
    let actual: Vec<f64> = w1.iter().map(|x| x / rho1).collect();

    let g_unit = objective.grad(&unit)?;
    let radial: f64 = unit.iter().zip(&g_unit).map(|(u, g)| u * g).sum();
    let step = effective_step(eta, w0)?;
    let delta: Vec<f64> = g_unit.iter().zip(&unit).map(|(g, u)| -step * (g - radial * u)).collect();
    let claimed: Vec<f64> = unit.iter().zip(&delta).map(|(u, d)| u + d).collect();
    let residual = norm(&actual.iter().zip(&claimed).map(|(a, c)| a - c).collect::<Vec<_>>());
    let tangent = unit.iter().zip(&delta).map(|(u, d)| u * d).sum::<f64>().abs();
    let actual_step = norm(&actual.iter().zip(&unit).map(|(a, u)| a - u).collect::<Vec<_>>());
    Ok(StepCheck { residual, tangent, actual_step, predicted_step: norm(&delta) })
}

/// Compare one SGD step's actual direction update with the first-order
/// prediction `w_hat - eta |w|^-2 (I - w_hat w_hat^T) grad L(w_hat)`.
pub fn verify_direction_claim(
    objective: &impl ScaleInvariantObjective,
    w0: &[f64],
    eta: f64,
) -> Result<ClaimReport, DynamicsError> {
    if w0.len() != objective.dim() {
        return Err(NumericError::ShapeMismatch(format!(
            "{} weights for a {}-dim objective",
            w0.len(),
            objective.dim()
        ))
        .into());
    }
    if !(norm(w0) > 0.0) {
        return Err(DynamicsError::ZeroNorm);
    }
    let doubled: Vec<f64> = w0.iter().map(|x| 2.0 * x).collect();
    let (l1, l2) = (objective.loss(w0)?, objective.loss(&doubled)?);
    let rel = (l2 - l1).abs() / l1.abs().max(f64::MIN_POSITIVE);
    if rel > 1e-8 {
        return Err(DynamicsError::NotScaleInvariant(rel));
    }
    let g1 = objective.grad(w0)?;
    let g2 = objective.grad(&doubled)?;
    let diff: Vec<f64> = g2.iter().zip(&g1).map(|(a, b)| a - 0.5 * b).collect();
    let gradient_scaling_error = norm(&diff) / (0.5 * norm(&g1)).max(f64::MIN_POSITIVE);

    let full = residual_at(objective, w0, eta)?;
    let half = residual_at(objective, w0, eta / 2.0)?;
    Ok(ClaimReport {
        eta,
        residual: full.residual,
        residual_half: half.residual,
        ratio_at_half_eta: full.residual / half.residual,
        tangent_error: full.tangent,
        gradient_scaling_error,
        direction_step: full.actual_step,
        predicted_step: full.predicted_step,
    })
}

/// Convenience used by the CLI: a 32-dimensional L2 probe from `seed` with
/// an initial weight of norm 2.
pub fn default_claim_check(eta: f64, seed: u64) -> Result<ClaimReport, DynamicsError> {
    let probe = NormalizedLinearProbe::random(32, 64, NormMetric::L2, seed)?;
    let mut rng = Rng::with_stream(seed, 1);
    let mut w0: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
    let scale = 2.0 / norm(&w0);
    w0.iter_mut().for_each(|x| *x *= scale);
    verify_direction_claim(&probe, &w0, eta)
}

/// Precision used for dynamics bookkeeping (norms and rates).
pub const BOOKKEEPING: PrecisionMode = PrecisionMode::F64;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_f64(vec![1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let w = t(&[1.0, 0.0]);
        let zero = t(&[0.0, 0.0]);
        assert_eq!(sgd_step(&w, &zero, 0.5, 0.0).unwrap(), w);
        let decayed = sgd_step(&w, &zero, 1.0, 0.1).unwrap();
        assert!((decayed.data()[0] - 0.9).abs() < 1e-15 && decayed.data()[1] == 0.0);
        assert!(sgd_step(&w, &t(&[1.0]), 1.0, 0.0).is_err());
    }

    #[test]
    fn sgd_matches_scalar_reference() {
        let mut rng = Rng::new(5);
        let w: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let out = sgd_step(
            &Tensor::from_f64(vec![3, 4], w.clone()).unwrap(),
            &Tensor::from_f64(vec![3, 4], g.clone()).unwrap(),
            0.05,
            0.01,
        )
        .unwrap();
        for i in 0..12 {
            assert_eq!(out.data()[i], w[i] - 0.05 * (g[i] + 0.01 * w[i]));
        }
    }

    #[test]
    fn effective_step_examples() {
        assert!((effective_step(0.1, &[1.0, 0.0]).unwrap() - 0.1).abs() < 1e-15);
        let a = effective_step(0.1, &[0.6, 0.8]).unwrap();
        let b = effective_step(0.1, &[1.2, 1.6]).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        assert!(matches!(effective_step(0.1, &[0.0, 0.0]), Err(DynamicsError::ZeroNorm)));
    }

    #[test]
    fn lr_correction_examples() {
        assert!((lr_correction(0.1, &[3.0, 4.0], 5.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((lr_correction(0.1, &[6.0, 8.0], 5.0).unwrap() - 0.4).abs() < 1e-15);
        let corrected = lr_correction(0.1, &[6.0, 8.0], 2.0).unwrap();
        let eff = effective_step(corrected, &[6.0, 8.0]).unwrap();
        assert!((eff - 0.1 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn norm_schedule_examples() {
        let w = t(&[3.0, 4.0]);
        let (w1, targets) = norm_schedule_step(&w, &[1.0], false).unwrap();
        assert!((w1.data()[0] - 0.6).abs() < 1e-15 && (w1.data()[1] - 0.8).abs() < 1e-15);
        let (w2, targets) = norm_schedule_step(&w1, &targets, true).unwrap();
        let before = effective_step(0.1, w1.data()).unwrap();
        let after = effective_step(0.1, w2.data()).unwrap();
        assert!((after / before - 0.1).abs() < 1e-12);
        let cos = w2.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / (norm(w2.data()) * 5.0);
        assert!((cos - 1.0).abs() < 1e-12);
        assert!((targets[0] - 10f64.sqrt()).abs() < 1e-15);
        assert!(norm_schedule_step(&w, &[0.0], false).is_err());
        assert!(matches!(norm_schedule_step(&t(&[0.0, 0.0]), &[1.0], false), Err(DynamicsError::ZeroNorm)));
    }

    #[test]
    fn schedule_and_rates() {
        let cfg = OptimizerConfig::new(0.1, 0.0, step_decay_schedule(10, 0.1, 30), OptimizerMode::Plain).unwrap();
        assert_eq!(cfg.schedule.len(), 2);
        assert_eq!(cfg.lr_at(9), 0.1);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(25) - 0.001).abs() < 1e-15);
        assert!(cfg.is_decay_event(20));
        let ns = OptimizerConfig { mode: OptimizerMode::NormSchedule, ..cfg.clone() };
        assert_eq!(ns.lr_at(25), 0.1);
        assert!((ns.norm_factor_at(25) - 10.0).abs() < 1e-12);
        let bad = vec![ScheduleEvent { step: 5, multiplier: 0.1 }, ScheduleEvent { step: 5, multiplier: 0.1 }];
        assert!(OptimizerConfig::new(0.1, 0.0, bad, OptimizerMode::Plain).is_err());
        assert!(OptimizerConfig::new(0.0, 0.0, vec![], OptimizerMode::Plain).is_err());
        assert!(OptimizerConfig::new(0.1, -1.0, vec![], OptimizerMode::Plain).is_err());
    }

    #[test]
    fn trajectory_ordering_and_lookup() {
        let mut traj = Trajectory::new();
        traj.log_layer(0, 0, &[1.0, 2.0]).unwrap();
        traj.log_layer(0, 1, &[3.0]).unwrap();
        traj.log_layer(1, 0, &[1.5, 2.5]).unwrap();
        assert_eq!(traj.norm(1, 0, 1).unwrap(), 2.5);
        assert!(matches!(traj.norm(2, 0, 0), Err(DynamicsError::MissingTrajectory { step: 2, .. })));
        assert!(traj.push(TrajectoryRecord { step: 1, layer: 0, channel: 0, norm: 1.0 }).is_err());
        assert!(traj.push(TrajectoryRecord { step: 5, layer: 0, channel: 0, norm: 0.0 }).is_err());

        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,layer,channel,norm\n0,0,0,1\n"));
        assert_eq!(Trajectory::read_csv(&buf[..]).unwrap(), traj);
        assert!(Trajectory::read_csv("step,layer,norm\n".as_bytes()).is_err());
        assert!(Trajectory::read_csv("step,layer,channel,norm\n0,0,0,x\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_gradient_decay_shrinks_norms() {
        let mut w = Tensor::from_f64(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.3, 0.3]).unwrap();
        let zero = Tensor::zeros(vec![2, 3], PrecisionMode::F64);
        let mut traj = Trajectory::new();
        for step in 0..20 {
            let norms: Vec<f64> = (0..2).map(|i| norm(&w.data()[i * 3..(i + 1) * 3])).collect();
            traj.log_layer(step, 0, &norms).unwrap();
            w = sgd_step(&w, &zero, 0.1, 0.05).unwrap();
        }
        for c in 0..2 {
            for s in 1..20 {
                assert!(traj.norm(s, 0, c).unwrap() < traj.norm(s - 1, 0, c).unwrap());
            }
        }
        let report = norm_growth_probe(&traj);
        assert_eq!(report.grew_fraction, 0.0);
        assert!(!report.growth);
        assert!(report.bounded);
    }

    #[test]
    fn probe_gradient_is_orthogonal_to_weight() {
        let probe = NormalizedLinearProbe::random(16, 32, NormMetric::L2, 4).unwrap();
        let mut rng = Rng::new(8);
        let w: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let g = probe.grad(&w).unwrap();
        let dot: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-8 * norm(&w) * norm(&g).max(1.0), "dot = {dot}");
    }

    #[test]
    fn claim_report_basics() {
        let report = default_claim_check(1e-3, 3).unwrap();
        assert!(report.tangent_error < 1e-10);
        assert!(report.gradient_scaling_error < 1e-8);
        assert!((3.5..=4.5).contains(&report.ratio_at_half_eta), "{report:?}");
        assert!((report.direction_step / report.predicted_step - 1.0).abs() < 0.1);
    }

    struct NotInvariant;

    impl ScaleInvariantObjective for NotInvariant {
        fn dim(&self) -> usize {
            2
        }
        fn loss(&self, w: &[f64]) -> Result<f64, DynamicsError> {
            Ok(w.iter().map(|x| x * x).sum())
        }
        fn grad(&self, w: &[f64]) -> Result<Vec<f64>, DynamicsError> {
            Ok(w.iter().map(|x| 2.0 * x).collect())
        }
    }

    #[test]
    fn claim_precheck_rejects_non_invariant_objective() {
        assert!(matches!(
            verify_direction_claim(&NotInvariant, &[1.0, 1.0], 1e-3),
            Err(DynamicsError::NotScaleInvariant(_))
        ));
    }
}
