use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gmm::{select_gmm, GmmConfig};
use super::gof::{anderson_darling, chi_square, ks_pvalue, ks_statistic};
use super::{mean, variance, Family, Real, LOG_DENSITY_FLOOR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{got} samples, at least {need} required")]
    TooFewSamples { got: usize, need: usize },
    #[error("sample has zero variance")]
    Degenerate,
    #[error("sample contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub min_samples: usize,
    /// KS p-value a parametric family needs to be accepted.
    pub ks_alpha: f64,
    pub gmm: GmmConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            min_samples: 30,
            ks_alpha: 0.05,
            gmm: GmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    pub ad_stat: f64,
    pub chi2_stat: f64,
    pub chi2_pvalue: f64,
    pub bic: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFit<T> {
    pub family: Family<T>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStage {
    Parametric,
    Mixture,
}

/// Fitted distribution for one delay position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel<T> {
    pub position: usize,
    #[serde(flatten)]
    pub family: Family<T>,
    pub diagnostics: FitDiagnostics,
    pub sample_count: usize,
    pub stage: SelectionStage,
    /// `(label, BIC)` of every candidate evaluated at the stage that
    /// produced this model, the winner included.
    #[serde(skip)]
    pub evaluated: Vec<(String, f64)>,
}

impl<T: Real> DelayModel<T> {
    /// Clamped natural-log density.
    pub fn log_density(&self, d: T) -> T {
        log_density(self, d)
    }

    pub fn component_count(&self) -> Option<usize> {
        self.family.component_count()
    }

    pub fn to_json(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// `ln f(d)` under `model`, never below [`LOG_DENSITY_FLOOR`].
pub fn log_density<T: Real>(model: &DelayModel<T>, d: T) -> T {
    let v = model.family.ln_pdf(d);
    let floor = T::lit(LOG_DENSITY_FLOOR);
    if v.is_nan() || v < floor {
        floor
    } else {
        v
    }
}

fn diagnose<T: Real>(sorted: &[T], family: &Family<T>) -> FitDiagnostics {
    let n = sorted.len();
    let ll: f64 = sorted.iter().map(|&x| family.ln_pdf(x).f64()).sum();
    let k = family.param_count();
    let cdf = |x: T| family.cdf(x);
    let ks = ks_statistic(sorted, cdf);
    let chi = chi_square(sorted, cdf, k);
    FitDiagnostics {
        ks_stat: ks,
        ks_pvalue: ks_pvalue(ks, n),
        ad_stat: anderson_darling(sorted, cdf),
        chi2_stat: chi.statistic,
        chi2_pvalue: chi.pvalue,
        bic: k as f64 * (n as f64).ln() - 2.0 * ll,
        log_likelihood: ll,
    }
}

/// Maximum-likelihood normal, lognormal and exponential fits with
/// diagnostics. Lognormal needs every value > 0, exponential every value
/// >= 0; families without support for the sample are skipped.
pub fn fit_parametric<T: Real>(sorted: &[T]) -> Vec<CandidateFit<T>> {
    let m = mean(sorted);
    let var = variance(sorted, m);
    let mut families = vec![Family::Normal {
        mean: m,
        std: var.sqrt(),
    }];
    if sorted[0] > T::zero() {
        let logs: Vec<T> = sorted.iter().map(|x| x.ln()).collect();
        let lm = mean(&logs);
        let ls = variance(&logs, lm).sqrt();
        if ls > T::zero() {
            families.push(Family::Lognormal { mu: lm, sigma: ls });
        }
    }
    if sorted[0] >= T::zero() && m > T::zero() {
        families.push(Family::Exponential { rate: T::one() / m });
    }
    families
        .into_iter()
        .map(|family| CandidateFit {
            diagnostics: diagnose(sorted, &family),
            family,
        })
        .collect()
}

/// Selects a delay model for one position.
///
/// The lowest-BIC parametric family is accepted when its KS p-value reaches
/// `ks_alpha`; otherwise mixtures of 1..=`max_components` Gaussians are
/// fitted and the lowest-BIC mixture is returned.
pub fn fit_model<T: Real>(
    delays: &[T],
    position: usize,
    cfg: &FitConfig,
) -> Result<DelayModel<T>, FitError> {
    if delays.len() < cfg.min_samples.max(2) {
        return Err(FitError::TooFewSamples {
            got: delays.len(),
            need: cfg.min_samples.max(2),
        });
    }
    if delays.iter().any(|x| !x.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let mut sorted = delays.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(FitError::Degenerate);
    }

    let candidates = fit_parametric(&sorted);
    let best = candidates
        .iter()
        .filter(|c| c.diagnostics.bic.is_finite())
        .min_by(|a, b| a.diagnostics.bic.partial_cmp(&b.diagnostics.bic).unwrap());
    if let Some(best) = best {
        if best.diagnostics.ks_pvalue >= cfg.ks_alpha {
            return Ok(DelayModel {
                position,
                family: best.family.clone(),
                diagnostics: best.diagnostics.clone(),
                sample_count: sorted.len(),
                stage: SelectionStage::Parametric,
                evaluated: candidates
                    .iter()
                    .map(|c| (format!("{:?}", c.family.kind()).to_lowercase(), c.diagnostics.bic))
                    .collect(),
            });
        }
    }

    let (winner, sweep) = select_gmm(&sorted, &cfg.gmm);
    let family = winner.family();
    let diagnostics = diagnose(&sorted, &family);
    let evaluated = sweep
        .iter()
        .map(|&(c, b)| (format!("gmm({c})"), b.f64()))
        .collect();
    Ok(DelayModel {
        position,
        family,
        diagnostics: FitDiagnostics {
            bic: winner.bic.f64(),
            ..diagnostics
        },
        sample_count: sorted.len(),
        stage: SelectionStage::Mixture,
        evaluated,
    })
}
