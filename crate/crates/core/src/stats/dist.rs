use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::Real;

/// Log-densities are clamped at this value before summation.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Normal,
    Lognormal,
    Exponential,
    Gmm,
}

/// A fitted distribution and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family<T> {
    Normal { mean: T, std: T },
    Lognormal { mu: T, sigma: T },
    Exponential { rate: T },
    Gmm {
        weights: Vec<T>,
        means: Vec<T>,
        variances: Vec<T>,
    },
}

fn ln_sqrt_2pi<T: Real>() -> T {
    T::lit(0.918_938_533_204_672_8)
}

fn normal_ln_pdf<T: Real>(x: T, mean: T, std: T) -> T {
    let z = (x - mean) / std;
    -T::lit(0.5) * z * z - std.ln() - ln_sqrt_2pi::<T>()
}

fn normal_cdf<T: Real>(x: T, mean: T, std: T) -> T {
    let z = ((x - mean) / std).f64();
    T::lit(0.5 * erfc(-z / std::f64::consts::SQRT_2))
}

impl<T: Real> Family<T> {
    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Normal { .. } => FamilyKind::Normal,
            Family::Lognormal { .. } => FamilyKind::Lognormal,
            Family::Exponential { .. } => FamilyKind::Exponential,
            Family::Gmm { .. } => FamilyKind::Gmm,
        }
    }

    /// Free parameters, as counted by BIC.
    pub fn param_count(&self) -> usize {
        match self {
            Family::Normal { .. } | Family::Lognormal { .. } => 2,
            Family::Exponential { .. } => 1,
            Family::Gmm { weights, .. } => 3 * weights.len() - 1,
        }
    }

    pub fn component_count(&self) -> Option<usize> {
        match self {
            Family::Gmm { weights, .. } => Some(weights.len()),
            _ => None,
        }
    }

    /// Unclamped natural-log density; `-inf` outside the support.
    pub fn ln_pdf(&self, x: T) -> T {
        match self {
            Family::Normal { mean, std } => normal_ln_pdf(x, *mean, *std),
            Family::Lognormal { mu, sigma } => {
                if x <= T::zero() {
                    return T::neg_infinity();
                }
                let lx = x.ln();
                normal_ln_pdf(lx, *mu, *sigma) - lx
            }
            Family::Exponential { rate } => {
                if x < T::zero() {
                    T::neg_infinity()
                } else {
                    rate.ln() - *rate * x
                }
            }
            Family::Gmm {
                weights,
                means,
                variances,
            } => {
                let terms = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((&w, &m), &v)| w.ln() + normal_ln_pdf(x, m, v.sqrt()));
                log_sum_exp(terms)
            }
        }
    }

    pub fn cdf(&self, x: T) -> T {
        match self {
            Family::Normal { mean, std } => normal_cdf(x, *mean, *std),
            Family::Lognormal { mu, sigma } => {
                if x <= T::zero() {
                    T::zero()
                } else {
                    normal_cdf(x.ln(), *mu, *sigma)
                }
            }
            Family::Exponential { rate } => {
                if x <= T::zero() {
                    T::zero()
                } else {
                    T::one() - (-*rate * x).exp()
                }
            }
            Family::Gmm {
                weights,
                means,
                variances,
            } => weights
                .iter()
                .zip(means)
                .zip(variances)
                .fold(T::zero(), |acc, ((&w, &m), &v)| {
                    acc + w * normal_cdf(x, m, v.sqrt())
                }),
        }
    }

    pub fn mean(&self) -> T {
        match self {
            Family::Normal { mean, .. } => *mean,
            Family::Lognormal { mu, sigma } => (*mu + *sigma * *sigma / T::lit(2.0)).exp(),
            Family::Exponential { rate } => T::one() / *rate,
            Family::Gmm { weights, means, .. } => weights
                .iter()
                .zip(means)
                .fold(T::zero(), |a, (&w, &m)| a + w * m),
        }
    }
}

pub(crate) fn log_sum_exp<T: Real>(terms: impl Iterator<Item = T> + Clone) -> T {
    let max = terms.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s = terms.fold(T::zero(), |a, t| a + (t - max).exp());
    max + s.ln()
}
