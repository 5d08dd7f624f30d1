//! Batch and layer normalization under L2, L1, L-infinity and Top(k)
//! dispersion metrics, with hand-written backward passes.
//!
//! Inputs are rank-2 `[rows, features]` tensors. With [`NormAxis::Batch`]
//! each feature column is normalized over the rows; with
//! [`NormAxis::Feature`] each row is normalized over its features (layer
//! norm). The affine parameters are always indexed by feature column.
//!
//! Forward:
//!
//! ```text
//! c = x - mean(x)
//! d = sqrt(mean(c^2))                 L2
//!     C_L1 * sum|c| / n               L1
//!     C_Linf(n) * max|c|              Linf
//!     C_Top(n, k) * Top(k)(|c|)       TopK
//! y = gamma * c / (d + eps) + beta
//! ```
//!
//! All arithmetic runs through the input tensor's precision mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constants::{c_l1, c_linf, c_topk};
use crate::numeric::{sign, top_k_indices, PrecisionMode, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NormError {
    #[error("reduction size {0} is too small, need at least 2")]
    ReductionTooSmall(usize),
    #[error("evaluation mode requires running statistics from at least one training step")]
    UninitializedRunningStats,
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("Top(k) with k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("invalid normalization scheme: {0}")]
    InvalidScheme(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMetric {
    L2,
    L1,
    Linf,
    TopK(usize),
}

impl fmt::Display for NormMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMetric::L2 => f.write_str("l2"),
            NormMetric::L1 => f.write_str("l1"),
            NormMetric::Linf => f.write_str("linf"),
            NormMetric::TopK(k) => write!(f, "top{k}"),
        }
    }
}

impl FromStr for NormMetric {
    type Err = NormError;

    /// `l2`, `l1`, `linf`, or `top<k>` / `top:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "l2" => return Ok(NormMetric::L2),
            "l1" => return Ok(NormMetric::L1),
            "linf" | "l-inf" => return Ok(NormMetric::Linf),
            _ => {}
        }
        s.strip_prefix("top")
            .map(|rest| rest.trim_start_matches([':', '(']).trim_end_matches(')'))
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .map(NormMetric::TopK)
            .ok_or_else(|| NormError::InvalidScheme(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormAxis {
    /// Reduce over rows (batch normalization).
    Batch,
    /// Reduce over features within each row (layer normalization).
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormScheme {
    pub metric: NormMetric,
    pub axis: NormAxis,
    pub epsilon: f64,
    pub affine: bool,
    /// Subtract the mean only; no dispersion division.
    pub mean_only: bool,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl NormScheme {
    pub fn batch(metric: NormMetric) -> Self {
        Self { metric, axis: NormAxis::Batch, epsilon: DEFAULT_EPSILON, affine: true, mean_only: false }
    }

    pub fn layer(metric: NormMetric) -> Self {
        Self { axis: NormAxis::Feature, ..Self::batch(metric) }
    }

    pub fn mean_only() -> Self {
        Self { mean_only: true, ..Self::batch(NormMetric::L2) }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_affine(mut self, affine: bool) -> Self {
        self.affine = affine;
        self
    }

    pub fn validate(&self) -> Result<(), NormError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(NormError::InvalidScheme(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.metric == NormMetric::TopK(0) {
            return Err(NormError::InvalidScheme("Top(k) needs k >= 1".into()));
        }
        Ok(())
    }

    /// Scale applied to the raw dispersion for a reduction of size `n`.
    pub fn constant(&self, n: usize) -> Result<f64, NormError> {
        Ok(match self.metric {
            NormMetric::L2 => 1.0,
            NormMetric::L1 => c_l1(),
            NormMetric::Linf => c_linf(n).map_err(|_| NormError::ReductionTooSmall(n))?,
            NormMetric::TopK(k) => c_topk(n, k).map_err(|_| {
                if n < 2 {
                    NormError::ReductionTooSmall(n)
                } else {
                    NormError::KOutOfRange { k, n }
                }
            })?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Train,
    Eval,
}

/// Per-lane batch statistics plus exponential running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Constant-scaled dispersion, before epsilon.
    pub dispersion: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_dispersion: Vec<f64>,
    pub momentum: f64,
    /// Number of EMA updates applied so far.
    pub updates: u64,
}

impl NormStats {
    pub fn new(lanes: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; lanes],
            dispersion: vec![1.0; lanes],
            running_mean: vec![0.0; lanes],
            running_dispersion: vec![1.0; lanes],
            momentum,
            updates: 0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }
}

/// Affine parameters, one entry per feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Affine {
    pub fn identity(features: usize) -> Self {
        Self { gamma: vec![1.0; features], beta: vec![0.0; features] }
    }
}

/// Per-lane selection used to route the dispersion gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// L2 and mean-only need nothing beyond the normalized input.
    None,
    /// L1: sign of every centered value, in {-1, 0, 1}.
    Signs(Vec<i8>),
    /// L-infinity / Top(k): ascending lane positions of the selected values.
    Indices(Vec<Vec<usize>>),
}

/// What backward needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub scheme: NormScheme,
    pub mode: StatsMode,
    pub x_hat: Tensor,
    /// Constant-scaled dispersion per lane (before epsilon).
    pub dispersion: Vec<f64>,
    pub selection: Selection,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub x: Tensor,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Geometry of a rank-2 tensor seen as lanes along the reduction axis.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    rows: usize,
    cols: usize,
    axis: NormAxis,
}

impl Lanes {
    fn of(x: &Tensor, axis: NormAxis) -> Result<Self, NormError> {
        let (rows, cols) = x.dims2().map_err(|e| NormError::Shape(e.to_string()))?;
        Ok(Self { rows, cols, axis })
    }

    fn count(&self) -> usize {
        match self.axis {
            NormAxis::Batch => self.cols,
            NormAxis::Feature => self.rows,
        }
    }

    fn len(&self) -> usize {
        match self.axis {
            NormAxis::Batch => self.rows,
            NormAxis::Feature => self.cols,
        }
    }

    #[inline]
    fn index(&self, lane: usize, i: usize) -> usize {
        match self.axis {
            NormAxis::Batch => i * self.cols + lane,
            NormAxis::Feature => lane * self.cols + i,
        }
    }

    #[inline]
    fn column(&self, lane: usize, i: usize) -> usize {
        match self.axis {
            NormAxis::Batch => lane,
            NormAxis::Feature => i,
        }
    }

    fn gather(&self, data: &[f64], lane: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.len()).map(|i| data[self.index(lane, i)]));
    }
}

/// Statistics of one lane: mean, centered values, constant-scaled dispersion
/// and the selection the backward pass needs.
struct LaneStats {
    mean: f64,
    dispersion: f64,
    selected: Option<Vec<usize>>,
}

fn lane_stats(
    p: PrecisionMode,
    scheme: &NormScheme,
    constant: f64,
    values: &[f64],
    centered: &mut Vec<f64>,
) -> LaneStats {
    let n = values.len();
    let mean = p.mean(values.iter().copied(), n);
    centered.clear();
    centered.extend(values.iter().map(|&v| p.sub(v, mean)));
    if scheme.mean_only {
        return LaneStats { mean, dispersion: 0.0, selected: None };
    }
    let c = p.round(constant);
    let (dispersion, selected) = match scheme.metric {
        NormMetric::L2 => {
            let variance = p.mean(centered.iter().map(|&v| p.mul(v, v)), n);
            (p.sqrt(variance), None)
        }
        NormMetric::L1 => {
            let total = p.sum(centered.iter().map(|v| v.abs()));
            (p.mul(c, p.div(total, p.count(n))), None)
        }
        NormMetric::Linf | NormMetric::TopK(_) => {
            let k = match scheme.metric {
                NormMetric::TopK(k) => k,
                _ => 1,
            };
            let magnitudes: Vec<f64> = centered.iter().map(|v| v.abs()).collect();
            let picked = top_k_indices(&magnitudes, k);
            let total = p.sum(picked.iter().map(|&i| magnitudes[i]));
            (p.mul(c, p.div(total, p.count(k))), Some(picked))
        }
    };
    LaneStats { mean, dispersion, selected }
}

fn check_reduction(scheme: &NormScheme, n: usize) -> Result<f64, NormError> {
    scheme.validate()?;
    if n < 2 {
        return Err(NormError::ReductionTooSmall(n));
    }
    if let NormMetric::TopK(k) = scheme.metric {
        if k > n {
            return Err(NormError::KOutOfRange { k, n });
        }
    }
    scheme.constant(n)
}

/// Batch statistics of `x` under `scheme`; running estimates are fresh.
pub fn compute_stats(x: &Tensor, scheme: &NormScheme) -> Result<NormStats, NormError> {
    let lanes = Lanes::of(x, scheme.axis)?;
    let constant = check_reduction(scheme, lanes.len())?;
    let p = x.precision();
    let mut stats = NormStats::new(lanes.count(), DEFAULT_MOMENTUM);
    let (mut values, mut centered) = (Vec::new(), Vec::new());
    for lane in 0..lanes.count() {
        lanes.gather(x.data(), lane, &mut values);
        let s = lane_stats(p, scheme, constant, &values, &mut centered);
        stats.mean[lane] = s.mean;
        stats.dispersion[lane] = s.dispersion;
    }
    Ok(stats)
}

/// `running <- momentum * running + (1 - momentum) * batch` for mean and
/// dispersion.
pub fn update_running(
    stats: &NormStats,
    batch_mean: &[f64],
    batch_dispersion: &[f64],
    precision: PrecisionMode,
) -> Result<NormStats, NormError> {
    let lanes = stats.running_mean.len();
    if batch_mean.len() != lanes || batch_dispersion.len() != lanes {
        return Err(NormError::Shape(format!(
            "running statistics have {lanes} lanes, batch has {} / {}",
            batch_mean.len(),
            batch_dispersion.len()
        )));
    }
    let p = precision;
    let keep = p.round(stats.momentum);
    let take = p.round(1.0 - stats.momentum);
    let ema = |old: f64, new: f64| p.add(p.mul(keep, old), p.mul(take, new));
    let mut next = stats.clone();
    next.mean = batch_mean.to_vec();
    next.dispersion = batch_dispersion.to_vec();
    for lane in 0..lanes {
        next.running_mean[lane] = ema(stats.running_mean[lane], batch_mean[lane]);
        next.running_dispersion[lane] = ema(stats.running_dispersion[lane], batch_dispersion[lane]);
    }
    next.updates += 1;
    Ok(next)
}

/// Normalize `x`. Train mode uses batch statistics and folds them into the
/// running estimates; Eval mode uses the running estimates. Layer
/// normalization always uses the statistics of the row itself.
pub fn norm_forward(
    x: &Tensor,
    scheme: &NormScheme,
    params: &Affine,
    mode: StatsMode,
    stats: &mut NormStats,
) -> Result<(Tensor, NormCache), NormError> {
    let lanes = Lanes::of(x, scheme.axis)?;
    let constant = check_reduction(scheme, lanes.len())?;
    if stats.running_mean.len() != lanes.count() {
        return Err(NormError::Shape(format!(
            "statistics for {} lanes, input has {}",
            stats.running_mean.len(),
            lanes.count()
        )));
    }
    if params.gamma.len() != lanes.cols || params.beta.len() != lanes.cols {
        return Err(NormError::Shape(format!(
            "affine parameters for {} features, input has {}",
            params.gamma.len(),
            lanes.cols
        )));
    }
    let use_running = mode == StatsMode::Eval && scheme.axis == NormAxis::Batch;
    if use_running && !stats.is_initialized() {
        return Err(NormError::UninitializedRunningStats);
    }

    let p = x.precision();
    let eps = p.round(scheme.epsilon);
    let (gamma, beta): (Vec<f64>, Vec<f64>) = if scheme.affine {
        (params.gamma.iter().map(|&g| p.round(g)).collect(), params.beta.iter().map(|&b| p.round(b)).collect())
    } else {
        (vec![1.0; lanes.cols], vec![0.0; lanes.cols])
    };

    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut batch_mean = vec![0.0; lanes.count()];
    let mut batch_dispersion = vec![0.0; lanes.count()];
    let mut signs = Vec::new();
    let mut picks = Vec::new();
    let (mut values, mut centered) = (Vec::new(), Vec::new());

    for lane in 0..lanes.count() {
        lanes.gather(x.data(), lane, &mut values);
        let s = lane_stats(p, scheme, constant, &values, &mut centered);
        batch_mean[lane] = s.mean;
        batch_dispersion[lane] = s.dispersion;
        if use_running {
            let mean = stats.running_mean[lane];
            centered.clear();
            centered.extend(values.iter().map(|&v| p.sub(v, mean)));
        }
        let dispersion = if use_running { stats.running_dispersion[lane] } else { s.dispersion };
        let denom = p.add(dispersion, eps);
        for (i, &c) in centered.iter().enumerate() {
            let idx = lanes.index(lane, i);
            let col = lanes.column(lane, i);
            let xh = if scheme.mean_only { c } else { p.div(c, denom) };
            x_hat[idx] = xh;
            y[idx] = p.add(p.mul(gamma[col], xh), beta[col]);
        }
        if !scheme.mean_only {
            match scheme.metric {
                NormMetric::L1 => signs.extend(centered.iter().map(|&c| sign(c) as i8)),
                NormMetric::Linf | NormMetric::TopK(_) => picks.push(s.selected.unwrap_or_default()),
                NormMetric::L2 => {}
            }
        }
    }

    if mode == StatsMode::Train && scheme.axis == NormAxis::Batch {
        *stats = update_running(stats, &batch_mean, &batch_dispersion, p)?;
    } else {
        stats.mean = batch_mean;
        stats.dispersion = batch_dispersion.clone();
    }

    let selection = if scheme.mean_only {
        Selection::None
    } else {
        match scheme.metric {
            NormMetric::L1 => Selection::Signs(signs),
            NormMetric::Linf | NormMetric::TopK(_) => Selection::Indices(picks),
            NormMetric::L2 => Selection::None,
        }
    };
    let dispersion = if use_running { stats.running_dispersion.clone() } else { batch_dispersion };
    let shape = x.shape().to_vec();
    let cache = NormCache {
        scheme: *scheme,
        mode,
        x_hat: Tensor::from_raw(shape.clone(), x_hat, p),
        dispersion,
        selection,
        gamma,
    };
    Ok((Tensor::from_raw(shape, y, p), cache))
}

/// Exact gradient of [`norm_forward`] in Train mode, treating the mean and
/// the dispersion as functions of the input.
pub fn norm_backward(grad_y: &Tensor, cache: &NormCache, scheme: &NormScheme) -> Result<NormGrads, NormError> {
    if cache.scheme != *scheme {
        return Err(NormError::CacheMismatch("cache was produced with a different scheme".into()));
    }
    if cache.mode != StatsMode::Train && scheme.axis == NormAxis::Batch {
        return Err(NormError::CacheMismatch("backward requires a Train-mode cache".into()));
    }
    if grad_y.shape() != cache.x_hat.shape() {
        return Err(NormError::CacheMismatch(format!(
            "gradient shape {:?} does not match cached {:?}",
            grad_y.shape(),
            cache.x_hat.shape()
        )));
    }
    let lanes = Lanes::of(grad_y, scheme.axis)?;
    let n = lanes.len();
    let constant = check_reduction(scheme, n)?;
    let p = grad_y.precision();
    let c = p.round(constant);
    let eps = p.round(scheme.epsilon);
    let gy = grad_y.data();
    let xh = cache.x_hat.data();

    let (grad_gamma, grad_beta) = if scheme.affine {
        let mut gg = Vec::with_capacity(lanes.cols);
        let mut gb = Vec::with_capacity(lanes.cols);
        for j in 0..lanes.cols {
            gb.push(p.sum((0..lanes.rows).map(|r| gy[r * lanes.cols + j])));
            gg.push(p.sum((0..lanes.rows).map(|r| p.mul(gy[r * lanes.cols + j], xh[r * lanes.cols + j]))));
        }
        (Some(gg), Some(gb))
    } else {
        (None, None)
    };

    let mut grad_x = vec![0.0; grad_y.len()];
    let mut g = vec![0.0; n];
    let mut dc = vec![0.0; n];
    for lane in 0..lanes.count() {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = p.mul(gy[lanes.index(lane, i)], cache.gamma[lanes.column(lane, i)]);
        }
        if scheme.mean_only {
            dc.copy_from_slice(&g);
        } else {
            let d = cache.dispersion[lane];
            let denom = p.add(d, eps);
            let proj = p.div(p.sum(g.iter().enumerate().map(|(i, &gi)| p.mul(gi, xh[lanes.index(lane, i)]))), denom);
            match (&cache.selection, scheme.metric) {
                (Selection::None, NormMetric::L2) => {
                    let scale = p.mul(p.count(n), d);
                    for i in 0..n {
                        let w = if d > 0.0 { p.div(p.mul(xh[lanes.index(lane, i)], denom), scale) } else { 0.0 };
                        dc[i] = p.sub(p.div(g[i], denom), p.mul(proj, w));
                    }
                }
                (Selection::Signs(signs), NormMetric::L1) => {
                    let scale = p.div(c, p.count(n));
                    let lane_signs = &signs[lane * n..(lane + 1) * n];
                    for i in 0..n {
                        let w = p.mul(scale, lane_signs[i] as f64);
                        dc[i] = p.sub(p.div(g[i], denom), p.mul(proj, w));
                    }
                }
                (Selection::Indices(picks), NormMetric::Linf | NormMetric::TopK(_)) => {
                    let picked =
                        picks.get(lane).ok_or_else(|| NormError::CacheMismatch("missing selection for lane".into()))?;
                    let scale = p.div(c, p.count(picked.len()));
                    for i in 0..n {
                        dc[i] = p.div(g[i], denom);
                    }
                    for &i in picked {
                        let w = p.mul(scale, sign(xh[lanes.index(lane, i)]));
                        dc[i] = p.sub(dc[i], p.mul(proj, w));
                    }
                }
                _ => return Err(NormError::CacheMismatch("selection does not match metric".into())),
            }
        }
        let mean_dc = p.mean(dc.iter().copied(), n);
        for i in 0..n {
            grad_x[lanes.index(lane, i)] = p.sub(dc[i], mean_dc);
        }
    }
    Ok(NormGrads { x: Tensor::from_raw(grad_y.shape().to_vec(), grad_x, p), gamma: grad_gamma, beta: grad_beta })
}
