//! Random covariance kernels and Gaussian-process draws on a unit grid.

use serde::{Deserialize, Serialize};

use super::SynthConfig;
use crate::rng::{self, Rng};

/// Composition tree of base covariance kernels over `t ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Rbf {
        variance: f64,
        lengthscale: f64,
    },
    Periodic {
        variance: f64,
        lengthscale: f64,
        period: f64,
    },
    Linear {
        variance: f64,
        offset: f64,
    },
    RationalQuadratic {
        variance: f64,
        lengthscale: f64,
        alpha: f64,
    },
    WhiteNoise {
        variance: f64,
    },
    Sum(Box<KernelSpec>, Box<KernelSpec>),
    Product(Box<KernelSpec>, Box<KernelSpec>),
}

impl KernelSpec {
    /// Covariance between grid points `t` and `u`; `same` marks the diagonal.
    pub fn eval(&self, t: f64, u: f64, same: bool) -> f64 {
        match self {
            Self::Rbf {
                variance,
                lengthscale,
            } => {
                let r = (t - u) / lengthscale;
                variance * (-0.5 * r * r).exp()
            }
            Self::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                let s = (std::f64::consts::PI * (t - u).abs() / period).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            Self::Linear { variance, offset } => variance * (t - offset) * (u - offset),
            Self::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => {
                let r2 = ((t - u) / lengthscale).powi(2);
                variance * (1.0 + r2 / (2.0 * alpha)).powf(-alpha)
            }
            Self::WhiteNoise { variance } => {
                if same {
                    *variance
                } else {
                    0.0
                }
            }
            Self::Sum(a, b) => a.eval(t, u, same) + b.eval(t, u, same),
            Self::Product(a, b) => a.eval(t, u, same) * b.eval(t, u, same),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Self::Sum(a, b) | Self::Product(a, b) => a.leaves() + b.leaves(),
            _ => 1,
        }
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            Self::Sum(a, b) | Self::Product(a, b) => 1 + a.depth().max(b.depth()),
            _ => 0,
        }
    }

    /// Row-major Gram matrix over `t_i = i / (len - 1)`.
    pub fn gram(&self, len: usize) -> Vec<f64> {
        let grid = unit_grid(len);
        let mut k = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..=i {
                let v = self.eval(grid[i], grid[j], i == j);
                k[i * len + j] = v;
                k[j * len + i] = v;
            }
        }
        k
    }

    pub fn sample(rng: &mut Rng, cfg: &SynthConfig) -> Self {
        let n_leaves = rng::int_in(rng, 1, cfg.max_kernel_leaves.max(1));
        let mut parts: Vec<KernelSpec> = (0..n_leaves).map(|_| Self::sample_leaf(rng)).collect();
        // merge adjacent pairs until one tree remains; with <= 4 leaves depth stays <= 3
        while parts.len() > 1 {
            let i = rng::int_in(rng, 0, parts.len() - 2);
            let b = parts.remove(i + 1);
            let a = parts.remove(i);
            let joined = if rng::bernoulli(rng, 0.5) {
                Self::Sum(Box::new(a), Box::new(b))
            } else {
                Self::Product(Box::new(a), Box::new(b))
            };
            parts.insert(i, joined);
        }
        parts.pop().unwrap()
    }

    fn sample_leaf(rng: &mut Rng) -> Self {
        let variance = rng::log_uniform(rng, 0.1, 2.0);
        match rng::int_in(rng, 0, 4) {
            0 => Self::Rbf {
                variance,
                lengthscale: rng::log_uniform(rng, 0.01, 1.0),
            },
            1 => Self::Periodic {
                variance,
                lengthscale: rng::log_uniform(rng, 0.3, 3.0),
                period: rng::log_uniform(rng, 0.02, 0.5),
            },
            2 => Self::Linear {
                variance,
                offset: rng::uniform(rng, 0.0, 1.0),
            },
            3 => Self::RationalQuadratic {
                variance,
                lengthscale: rng::log_uniform(rng, 0.01, 1.0),
                alpha: rng::log_uniform(rng, 0.1, 10.0),
            },
            _ => Self::WhiteNoise {
                variance: rng::log_uniform(rng, 0.001, 0.1),
            },
        }
    }
}

/// Low-order polynomial mean in normalized time plus an optional linear trend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    /// Coefficients of `1, t, t², …`.
    pub poly: Vec<f64>,
    pub trend: Option<f64>,
}

impl MeanSpec {
    pub fn zero() -> Self {
        Self {
            poly: vec![],
            trend: None,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let p = self.poly.iter().rev().fold(0.0, |acc, c| acc * t + c);
        p + self.trend.map_or(0.0, |s| s * t)
    }

    pub fn sample(rng: &mut Rng, cfg: &SynthConfig) -> Self {
        let degree = rng::int_in(rng, 0, cfg.max_poly_degree);
        let poly = (0..=degree).map(|_| rng::normal(rng)).collect();
        let trend = rng::bernoulli(rng, cfg.trend_probability).then(|| 2.0 * rng::normal(rng));
        Self { poly, trend }
    }
}

pub fn unit_grid(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

/// In-place lower Cholesky factor of a symmetric matrix. Returns false when
/// a pivot is not strictly positive.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (i * n, j * n);
            let mut s = a[ri + j];
            for q in 0..j {
                s -= a[ri + q] * a[rj + q];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return false;
                }
                a[ri + i] = s.sqrt();
            } else {
                a[ri + j] = s / a[rj + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Kernel whose Gram matrix stayed non-positive-definite after the largest jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRejected;

/// Draws `μ + L z` on a `len`-point unit grid.
///
/// Jitter starts at `cfg.jitter` (relative to the mean diagonal) and grows
/// tenfold up to `cfg.max_jitter`. An all-zero covariance yields the mean exactly.
pub fn sample_gp(
    rng: &mut Rng,
    kernel: &KernelSpec,
    mean: &MeanSpec,
    len: usize,
    cfg: &SynthConfig,
) -> Result<Vec<f64>, KernelRejected> {
    let grid = unit_grid(len);
    let mu: Vec<f64> = grid.iter().map(|&t| mean.eval(t)).collect();
    let gram = kernel.gram(len);
    let diag_mean = (0..len).map(|i| gram[i * len + i]).sum::<f64>() / len as f64;
    if gram.iter().all(|&v| v == 0.0) {
        return Ok(mu);
    }
    let scale = if diag_mean > 0.0 { diag_mean } else { 1.0 };
    let mut jitter = cfg.jitter;
    let factor = loop {
        let mut a = gram.clone();
        for i in 0..len {
            a[i * len + i] += jitter * scale;
        }
        if cholesky(&mut a, len) {
            break a;
        }
        jitter *= 10.0;
        if jitter > cfg.max_jitter * (1.0 + 1e-9) {
            return Err(KernelRejected);
        }
    };
    let z: Vec<f64> = (0..len).map(|_| rng::normal(rng)).collect();
    Ok((0..len)
        .map(|i| {
            let row = &factor[i * len..i * len + i + 1];
            mu[i] + row.iter().zip(&z).map(|(l, z)| l * z).sum::<f64>()
        })
        .collect())
}
