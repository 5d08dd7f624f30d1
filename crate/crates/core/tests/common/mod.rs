//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use normlab::activation_norm::{norm_backward, norm_forward, Affine, NormAxis, NormScheme, NormStats, StatsMode};
use normlab::numeric::{Rng, Tensor};
use normlab::weight_norm::{bwn_backward, bwn_effective, NormOrder};

pub const FD_STEP: f64 = 1e-6;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_f64(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn random_vec(n: usize, seed: u64, offset: f64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| offset + 0.5 * rng.normal()).collect()
}

/// `‖a - b‖₂ / ‖b‖₂`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

fn lanes(x: &Tensor, scheme: &NormScheme) -> usize {
    match scheme.axis {
        NormAxis::Batch => x.shape()[1],
        NormAxis::Feature => x.shape()[0],
    }
}

/// Training-mode output with fresh statistics.
pub fn forward(x: &Tensor, scheme: &NormScheme, affine: &Affine) -> Tensor {
    let mut stats = NormStats::new(lanes(x, scheme), 0.9);
    norm_forward(x, scheme, affine, StatsMode::Train, &mut stats).unwrap().0
}

/// `L = Σ upstream ⊙ y`.
pub fn probe_loss(x: &Tensor, scheme: &NormScheme, affine: &Affine, upstream: &Tensor) -> f64 {
    forward(x, scheme, affine).data().iter().zip(upstream.data()).map(|(y, g)| y * g).sum()
}

pub struct Grads {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn analytic(x: &Tensor, scheme: &NormScheme, affine: &Affine, upstream: &Tensor) -> Grads {
    let mut stats = NormStats::new(lanes(x, scheme), 0.9);
    let (_, cache) = norm_forward(x, scheme, affine, StatsMode::Train, &mut stats).unwrap();
    let g = norm_backward(upstream, &cache, scheme).unwrap();
    Grads { x: g.x.data().to_vec(), gamma: g.gamma.unwrap_or_default(), beta: g.beta.unwrap_or_default() }
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP)
}

/// Central differences of `probe_loss` with respect to x, gamma and beta.
pub fn numeric(x: &Tensor, scheme: &NormScheme, affine: &Affine, upstream: &Tensor) -> Grads {
    let shape = x.shape().to_vec();
    let dx = (0..x.len())
        .map(|i| {
            central(
                |v| {
                    let mut d = x.data().to_vec();
                    d[i] = v;
                    probe_loss(&Tensor::from_f64(shape.clone(), d).unwrap(), scheme, affine, upstream)
                },
                x.data()[i],
            )
        })
        .collect();
    let param = |pick: fn(&mut Affine) -> &mut Vec<f64>| -> Vec<f64> {
        let len = pick(&mut affine.clone()).len();
        (0..len)
            .map(|j| {
                let mut a = affine.clone();
                let at = pick(&mut a)[j];
                central(
                    |v| {
                        let mut b = affine.clone();
                        pick(&mut b)[j] = v;
                        probe_loss(x, scheme, &b, upstream)
                    },
                    at,
                )
            })
            .collect()
    };
    Grads { x: dx, gamma: param(|a| &mut a.gamma), beta: param(|a| &mut a.beta) }
}

/// Worst relative error among the x, gamma and beta gradients.
pub fn norm_gradient_error(scheme: &NormScheme, seed: u64) -> f64 {
    let x = random_tensor(8, 4, seed);
    let upstream = random_tensor(8, 4, seed + 1);
    let cols = 4;
    let affine = Affine { gamma: random_vec(cols, seed + 2, 1.0), beta: random_vec(cols, seed + 3, 0.0) };
    let a = analytic(&x, scheme, &affine, &upstream);
    let n = numeric(&x, scheme, &affine, &upstream);
    let mut err = rel_err(&a.x, &n.x);
    if scheme.affine {
        err = err.max(rel_err(&a.gamma, &n.gamma)).max(rel_err(&a.beta, &n.beta));
    }
    err
}

/// Relative error of the BWN backward pass against central differences of
/// `Σ upstream ⊙ bwn_effective(v)`.
pub fn bwn_gradient_error(order: NormOrder, seed: u64) -> f64 {
    let v = random_tensor(4, 8, seed);
    let upstream = random_tensor(4, 8, seed + 1);
    let rho = 1.7;
    let loss = |v: &Tensor| -> f64 {
        bwn_effective(v, rho, order).unwrap().data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let analytic = bwn_backward(&upstream, &v, rho, order).unwrap();
    let numeric: Vec<f64> = (0..v.len())
        .map(|i| {
            central(
                |t| {
                    let mut d = v.data().to_vec();
                    d[i] = t;
                    loss(&Tensor::from_f64(v.shape().to_vec(), d).unwrap())
                },
                v.data()[i],
            )
        })
        .collect();
    rel_err(analytic.data(), &numeric)
}

/// Gradient of `Σ upstream ⊙ norm(x wᵀ)` with respect to `w`.
pub fn linear_norm_grad(w: &Tensor, x: &Tensor, scheme: &NormScheme, upstream: &Tensor) -> Tensor {
    let z = x.matmul_nt(w).unwrap();
    let affine = Affine::identity(w.shape()[0]);
    let mut stats = NormStats::new(w.shape()[0], 0.9);
    let (_, cache) = norm_forward(&z, scheme, &affine, StatsMode::Train, &mut stats).unwrap();
    let gz = norm_backward(upstream, &cache, scheme).unwrap().x;
    gz.transpose().unwrap().matmul(x).unwrap()
}
