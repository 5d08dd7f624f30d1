//! Normalization constants that turn L1, L-infinity and Top(k) dispersions
//! into estimators of the Gaussian standard deviation, plus a Monte Carlo
//! estimator used to validate them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::numeric::{top_k_indices, Execution, Rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConstantError {
    #[error("batch size n = {0} is too small, need n >= 2")]
    NTooSmall(usize),
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("Monte Carlo needs at least {min} trials, got {trials}")]
    TooFewTrials { trials: usize, min: usize },
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    L1,
    Linf,
    TopK,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::L1 => "l1",
            Scheme::Linf => "linf",
            Scheme::TopK => "topk",
        })
    }
}

impl FromStr for Scheme {
    type Err = ConstantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Scheme::L1),
            "linf" | "l-inf" | "inf" => Ok(Scheme::Linf),
            "topk" | "top" => Ok(Scheme::TopK),
            other => Err(ConstantError::UnknownScheme(other.to_string())),
        }
    }
}

/// Which constant to compute: scheme, batch size and (for Top(k)) k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantQuery {
    scheme: Scheme,
    n: usize,
    k: usize,
}

impl ConstantQuery {
    pub fn new(scheme: Scheme, n: usize, k: usize) -> Result<Self, ConstantError> {
        if n < 2 {
            return Err(ConstantError::NTooSmall(n));
        }
        let k = match scheme {
            Scheme::L1 => n,
            Scheme::Linf => 1,
            Scheme::TopK => {
                if k == 0 || k > n {
                    return Err(ConstantError::KOutOfRange { k, n });
                }
                k
            }
        };
        Ok(Self { scheme, n, k })
    }

    pub fn l1(n: usize) -> Result<Self, ConstantError> {
        Self::new(Scheme::L1, n, n)
    }

    pub fn linf(n: usize) -> Result<Self, ConstantError> {
        Self::new(Scheme::Linf, n, 1)
    }

    pub fn topk(n: usize, k: usize) -> Result<Self, ConstantError> {
        Self::new(Scheme::TopK, n, k)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Effective k: n for L1, 1 for L-infinity.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn closed_form(&self) -> f64 {
        match self.scheme {
            Scheme::L1 => c_l1(),
            Scheme::Linf => linf_unchecked(self.n),
            Scheme::TopK => topk_unchecked(self.n, self.k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Mean absolute deviation to standard deviation: E|Z| = sqrt(2/pi).
pub fn c_l1() -> f64 {
    (PI / 2.0).sqrt()
}

/// `(1 + sqrt(pi ln 4)) / (2 sqrt(2 ln n))`: scales the upper bound
/// `sigma sqrt(2 ln n)` on the expected maximum absolute deviation to
/// `(1 + sqrt(pi ln 4)) / 2 * sigma`.
pub fn c_linf(n: usize) -> Result<f64, ConstantError> {
    if n < 2 {
        return Err(ConstantError::NTooSmall(n));
    }
    Ok(linf_unchecked(n))
}

/// Linear interpolation in k between `c_linf(n)` (k = 1) and `c_l1()`
/// (k = n). Both endpoints are returned exactly.
pub fn c_topk(n: usize, k: usize) -> Result<f64, ConstantError> {
    if n < 2 {
        return Err(ConstantError::NTooSmall(n));
    }
    if k == 0 || k > n {
        return Err(ConstantError::KOutOfRange { k, n });
    }
    Ok(topk_unchecked(n, k))
}

/// The n-independent product `c_linf(n) * sqrt(2 ln n)`.
pub fn linf_upper_bound_factor() -> f64 {
    (1.0 + (PI * 4f64.ln()).sqrt()) / 2.0
}

/// The same numerator over `sqrt(8 pi ln 2)`: the lower end of the bound
/// corridor for the scaled maximum absolute deviation.
pub fn linf_lower_bound_factor() -> f64 {
    (1.0 + (PI * 4f64.ln()).sqrt()) / (8.0 * PI * 2f64.ln()).sqrt()
}

fn linf_unchecked(n: usize) -> f64 {
    linf_upper_bound_factor() / (2.0 * (n as f64).ln()).sqrt()
}

fn topk_unchecked(n: usize, k: usize) -> f64 {
    if k == n {
        return c_l1();
    }
    let linf = linf_unchecked(n);
    if k == 1 {
        return linf;
    }
    let t = (k - 1) as f64 / (n - 1) as f64;
    linf + t * (c_l1() - linf)
}

pub const MIN_TRIALS: usize = 1000;
pub const DEFAULT_TRIALS: usize = 1_000_000;
pub const DEFAULT_SEED: u64 = 0x5EED_2018;
/// Trials per independently seeded RNG stream.
const BLOCK_TRIALS: usize = 4096;

/// Monte Carlo estimate of `E[constant * dispersion(z)]` for batches of `n`
/// standard normals, i.e. the ratio of the scaled dispersion to the true
/// sigma = 1. Deviations are taken from the distribution mean (zero), which
/// is the quantity the constants are derived for.
pub fn mc_dispersion_ratio(query: ConstantQuery, trials: usize, seed: u64) -> Result<McEstimate, ConstantError> {
    mc_dispersion_ratio_with(query, trials, seed, Execution::default())
}

/// As [`mc_dispersion_ratio`] with an explicit execution path. Trials are
/// split into fixed blocks with one RNG stream each and recombined in block
/// order, so the result does not depend on `exec`.
pub fn mc_dispersion_ratio_with(
    query: ConstantQuery,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate, ConstantError> {
    if trials < MIN_TRIALS {
        return Err(ConstantError::TooFewTrials { trials, min: MIN_TRIALS });
    }
    let constant = query.closed_form();
    let blocks = trials.div_ceil(BLOCK_TRIALS);
    let partials = exec.map(blocks, |block| {
        let count = BLOCK_TRIALS.min(trials - block * BLOCK_TRIALS);
        let mut rng = Rng::with_stream(seed, block as u64);
        let mut batch = vec![0.0; query.n];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..count {
            for z in batch.iter_mut() {
                *z = rng.normal().abs();
            }
            let ratio = constant * scaled_free_dispersion(&query, &batch);
            sum += ratio;
            sum_sq += ratio * ratio;
        }
        (sum, sum_sq)
    });
    let (sum, sum_sq) = partials.into_iter().fold((0.0, 0.0), |(s, q), (ps, pq)| (s + ps, q + pq));
    let count = trials as f64;
    let mean = sum / count;
    let variance = ((sum_sq / count - mean * mean) * count / (count - 1.0)).max(0.0);
    Ok(McEstimate { value: mean, stderr: (variance / count).sqrt(), trials, seed })
}

/// Unscaled dispersion of absolute deviations under the query's scheme. The
/// Top(k) path sums the selected values in index order, so Top(n) is
/// arithmetically identical to L1 and Top(1) to L-infinity.
fn scaled_free_dispersion(query: &ConstantQuery, abs_dev: &[f64]) -> f64 {
    let n = abs_dev.len();
    match query.scheme {
        Scheme::L1 => abs_dev.iter().sum::<f64>() / n as f64,
        Scheme::Linf => abs_dev.iter().copied().fold(0.0, f64::max),
        Scheme::TopK => {
            let picked = top_k_indices(abs_dev, query.k);
            picked.iter().map(|&i| abs_dev[i]).sum::<f64>() / query.k as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_constant() {
        assert!((c_l1() - 1.253_314_137_315_500_3).abs() < 1e-15);
        assert!((c_l1() * c_l1() - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn linf_closed_form() {
        let expected = (1.0 + (PI * 4f64.ln()).sqrt()) / (2.0 * (2.0 * 2f64.ln()).sqrt());
        assert_eq!(c_linf(2).unwrap(), expected);
        assert!((expected - 1.3108).abs() < 1e-4);
        assert_eq!(c_linf(1), Err(ConstantError::NTooSmall(1)));
        assert!(c_linf(1024).unwrap() < c_linf(16).unwrap());
        for n in [2usize, 3, 16, 100, 4096] {
            let u = c_linf(n).unwrap() * (2.0 * (n as f64).ln()).sqrt();
            assert!((u - 1.543).abs() < 5e-4, "n = {n}: {u}");
        }
    }

    #[test]
    fn bound_factors() {
        assert!((linf_upper_bound_factor() - 1.5434).abs() < 1e-4);
        // The closed form evaluates to ~0.740, not the quoted ~0.793.
        assert!((linf_lower_bound_factor() - 0.7396).abs() < 1e-4);
    }

    #[test]
    fn topk_endpoints_and_range() {
        for n in [2usize, 16, 256] {
            assert_eq!(c_topk(n, n).unwrap(), c_l1());
            assert_eq!(c_topk(n, 1).unwrap(), c_linf(n).unwrap());
        }
        let mid = c_topk(256, 10).unwrap();
        assert!(mid > c_linf(256).unwrap() && mid < c_l1());
        assert_eq!(c_topk(4, 0), Err(ConstantError::KOutOfRange { k: 0, n: 4 }));
        assert_eq!(c_topk(4, 5), Err(ConstantError::KOutOfRange { k: 5, n: 4 }));
    }

    #[test]
    fn query_validation() {
        assert!(ConstantQuery::l1(1).is_err());
        assert!(ConstantQuery::topk(8, 9).is_err());
        assert_eq!(ConstantQuery::linf(8).unwrap().k(), 1);
        assert_eq!(ConstantQuery::l1(8).unwrap().k(), 8);
        assert_eq!("LINF".parse::<Scheme>().unwrap(), Scheme::Linf);
        assert!("l3".parse::<Scheme>().is_err());
    }

    #[test]
    fn mc_rejects_few_trials() {
        let q = ConstantQuery::l1(16).unwrap();
        assert!(matches!(mc_dispersion_ratio(q, 999, 1), Err(ConstantError::TooFewTrials { .. })));
    }

    #[test]
    fn mc_execution_paths_agree() {
        let q = ConstantQuery::topk(64, 10).unwrap();
        let a = mc_dispersion_ratio_with(q, 10_000, 3, Execution::Sequential).unwrap();
        let b = mc_dispersion_ratio_with(q, 10_000, 3, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_topn_equals_l1() {
        let a = mc_dispersion_ratio(ConstantQuery::l1(32).unwrap(), 5000, 11).unwrap();
        let b = mc_dispersion_ratio(ConstantQuery::topk(32, 32).unwrap(), 5000, 11).unwrap();
        assert_eq!(a, b);
    }
}
