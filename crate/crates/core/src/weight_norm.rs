//! Weight reparameterizations: weight normalization `w_i = g_i v_i / |v_i|_2`
//! and bounded weight normalization `w_i = rho v_i / |v_i|_p` with a fixed
//! per-layer `rho` taken from the initial weights.
//!
//! Weights are `[channels, fan_in]` tensors; channel `i` is row `i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numeric::{sign, top_k_indices, PrecisionMode, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum WeightNormError {
    #[error("channel {0} has zero norm")]
    ZeroNormChannel(usize),
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown norm order {0:?}")]
    UnknownOrder(String),
    #[error("layer {layer} uses an activation that is not positively homogeneous")]
    NonHomogeneousActivation { layer: usize },
    #[error("layer {layer} is not foldable: {reason}")]
    NotFoldable { layer: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormOrder::L1 => "1",
            NormOrder::L2 => "2",
            NormOrder::Inf => "inf",
        })
    }
}

impl FromStr for NormOrder {
    type Err = WeightNormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" => Ok(NormOrder::Inf),
            other => Err(WeightNormError::UnknownOrder(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightMode {
    /// Free per-channel scale `g`.
    WN,
    /// Fixed per-layer scale `rho`.
    BWN,
}

/// `|row|_p` under the given precision.
pub fn vector_norm(row: &[f64], order: NormOrder, p: PrecisionMode) -> f64 {
    match order {
        NormOrder::L1 => p.sum(row.iter().map(|v| v.abs())),
        NormOrder::L2 => p.sqrt(p.sum(row.iter().map(|&v| p.mul(v, v)))),
        NormOrder::Inf => row.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Per-channel `p`-norms of a `[channels, fan_in]` tensor.
pub fn channel_norms(v: &Tensor, order: NormOrder) -> Result<Vec<f64>, WeightNormError> {
    let (rows, cols) = dims(v)?;
    Ok((0..rows).map(|i| vector_norm(&v.data()[i * cols..(i + 1) * cols], order, v.precision())).collect())
}

fn dims(t: &Tensor) -> Result<(usize, usize), WeightNormError> {
    t.dims2().map_err(|e| WeightNormError::Shape(e.to_string()))
}

fn nonzero_norms(v: &Tensor, order: NormOrder) -> Result<Vec<f64>, WeightNormError> {
    let norms = channel_norms(v, order)?;
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(WeightNormError::ZeroNormChannel(i));
    }
    Ok(norms)
}

fn scale_rows(v: &Tensor, factors: &[f64]) -> Tensor {
    let (_, cols) = v.dims2().expect("rank 2");
    let p = v.precision();
    let data = v.data().iter().enumerate().map(|(idx, &x)| p.mul(factors[idx / cols], x)).collect();
    Tensor::from_raw(v.shape().to_vec(), data, p)
}

/// `w_i = g_i v_i / |v_i|_2`.
pub fn wn_effective(v: &Tensor, g: &[f64]) -> Result<Tensor, WeightNormError> {
    let (rows, _) = dims(v)?;
    if g.len() != rows {
        return Err(WeightNormError::Shape(format!("{} scales for {rows} channels", g.len())));
    }
    let p = v.precision();
    let norms = nonzero_norms(v, NormOrder::L2)?;
    let factors: Vec<f64> = norms.iter().zip(g).map(|(&n, &gi)| p.div(gi, n)).collect();
    Ok(scale_rows(v, &factors))
}

/// `w_i = rho v_i / |v_i|_p`.
pub fn bwn_effective(v: &Tensor, rho: f64, order: NormOrder) -> Result<Tensor, WeightNormError> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(WeightNormError::InvalidRho(rho));
    }
    let p = v.precision();
    let norms = nonzero_norms(v, order)?;
    let rho = p.round(rho);
    let factors: Vec<f64> = norms.iter().map(|&n| p.div(rho, n)).collect();
    Ok(scale_rows(v, &factors))
}

/// `rho = |V|_p / N^(1/p)` over all entries of the freshly initialized
/// weight; for p = 2 this is the Frobenius norm over `sqrt(N)`.
pub fn rho_init(v: &Tensor, order: NormOrder, channels: usize) -> f64 {
    let n = channels as f64;
    let p = PrecisionMode::F64;
    match order {
        NormOrder::L1 => vector_norm(v.data(), order, p) / n,
        NormOrder::L2 => vector_norm(v.data(), order, p) / n.sqrt(),
        NormOrder::Inf => vector_norm(v.data(), order, p),
    }
}

/// Gradient of `|row|_p` with respect to `row[b]`, times `1 / |row|_p`.
fn norm_derivative(row: &[f64], order: NormOrder, norm: f64, argmax: usize, b: usize) -> f64 {
    match order {
        NormOrder::L1 => sign(row[b]),
        NormOrder::L2 => row[b] / norm,
        NormOrder::Inf => {
            if b == argmax {
                sign(row[b])
            } else {
                0.0
            }
        }
    }
}

/// Chain rule through `w_i = scale_i v_i / |v_i|_p`. Returns the gradient
/// with respect to `v` and, per channel, `sum_a grad_w_a v_a / |v|_p`
/// (the gradient with respect to a free scale).
fn reparam_backward(
    grad_w: &Tensor,
    v: &Tensor,
    scales: &[f64],
    order: NormOrder,
) -> Result<(Tensor, Vec<f64>), WeightNormError> {
    if grad_w.shape() != v.shape() {
        return Err(WeightNormError::Shape(format!("gradient {:?} vs direction {:?}", grad_w.shape(), v.shape())));
    }
    let (rows, cols) = dims(v)?;
    let p = v.precision();
    let norms = nonzero_norms(v, order)?;
    let mut grad_v = vec![0.0; v.len()];
    let mut radial = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &v.data()[i * cols..(i + 1) * cols];
        let gw = &grad_w.data()[i * cols..(i + 1) * cols];
        let norm = norms[i];
        let argmax = if order == NormOrder::Inf {
            let mags: Vec<f64> = row.iter().map(|x| x.abs()).collect();
            top_k_indices(&mags, 1)[0]
        } else {
            0
        };
        let along = p.div(p.dot(gw, row), norm);
        radial.push(along);
        let factor = p.div(scales[i], norm);
        for b in 0..cols {
            let d = p.round(norm_derivative(row, order, norm, argmax, b));
            grad_v[i * cols + b] = p.mul(factor, p.sub(gw[b], p.mul(d, along)));
        }
    }
    Ok((Tensor::from_raw(v.shape().to_vec(), grad_v, p), radial))
}

/// `grad_v_i = rho / |v_i|_p * (grad_w_i - d|v_i|_p/dv_i * (grad_w_i . v_i) / |v_i|_p)`;
/// for p = 2 this is the scaled projection onto the sphere's tangent space.
pub fn bwn_backward(grad_w: &Tensor, v: &Tensor, rho: f64, order: NormOrder) -> Result<Tensor, WeightNormError> {
    let (rows, _) = dims(v)?;
    let scales = vec![v.precision().round(rho); rows];
    Ok(reparam_backward(grad_w, v, &scales, order)?.0)
}

/// Gradients of weight normalization with respect to `v` and `g`.
pub fn wn_backward(grad_w: &Tensor, v: &Tensor, g: &[f64]) -> Result<(Tensor, Vec<f64>), WeightNormError> {
    let (rows, _) = dims(v)?;
    if g.len() != rows {
        return Err(WeightNormError::Shape(format!("{} scales for {rows} channels", g.len())));
    }
    reparam_backward(grad_w, v, g, NormOrder::L2)
}

/// A reparameterized weight: direction `v` plus either free scales `g` (WN)
/// or the fixed scalar `rho` (BWN).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedWeight {
    pub v: Tensor,
    pub g: Vec<f64>,
    pub rho: f64,
    pub order: NormOrder,
    pub mode: WeightMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReparamGrads {
    pub v: Tensor,
    /// Only set in WN mode.
    pub g: Option<Vec<f64>>,
}

impl BoundedWeight {
    /// BWN from an initial weight; `rho` is fixed here, once.
    pub fn bounded(initial: Tensor, order: NormOrder) -> Result<Self, WeightNormError> {
        let (rows, _) = dims(&initial)?;
        nonzero_norms(&initial, order)?;
        let rho = rho_init(&initial, order, rows);
        if !(rho > 0.0) {
            return Err(WeightNormError::InvalidRho(rho));
        }
        Ok(Self { v: initial, g: Vec::new(), rho, order, mode: WeightMode::BWN })
    }

    /// WN from an initial weight with `g_i = |v_i|_2`, so the effective weight
    /// starts equal to the initial weight.
    pub fn weight_norm(initial: Tensor) -> Result<Self, WeightNormError> {
        let g = nonzero_norms(&initial, NormOrder::L2)?;
        Ok(Self { v: initial, g, rho: 1.0, order: NormOrder::L2, mode: WeightMode::WN })
    }

    pub fn channels(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn effective(&self) -> Result<Tensor, WeightNormError> {
        match self.mode {
            WeightMode::WN => wn_effective(&self.v, &self.g),
            WeightMode::BWN => bwn_effective(&self.v, self.rho, self.order),
        }
    }

    pub fn backward(&self, grad_w: &Tensor) -> Result<ReparamGrads, WeightNormError> {
        match self.mode {
            WeightMode::WN => {
                let (v, g) = wn_backward(grad_w, &self.v, &self.g)?;
                Ok(ReparamGrads { v, g: Some(g) })
            }
            WeightMode::BWN => Ok(ReparamGrads { v: bwn_backward(grad_w, &self.v, self.rho, self.order)?, g: None }),
        }
    }
}
