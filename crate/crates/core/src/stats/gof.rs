//! Goodness-of-fit statistics against a fitted CDF.
//!
//! All functions take the sample sorted ascending.

use statrs::function::gamma::gamma_ur;

use super::Real;

/// Kolmogorov-Smirnov statistic `sup |F_n(x) - F(x)|`.
pub fn ks_statistic<T: Real>(sorted: &[T], cdf: impl Fn(T) -> T) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x).f64();
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Theta-function form converges fast for small lambda.
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut s = 0.0;
        for j in 1..=20 {
            let k = (2 * j - 1) as f64;
            s += (-k * k * pi2 / (8.0 * lambda * lambda)).exp();
        }
        let p = (2.0 * std::f64::consts::PI).sqrt() / lambda * s;
        (1.0 - p).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for j in 1..=100 {
            let j = j as f64;
            let term = (-2.0 * j * j * lambda * lambda).exp();
            s += if j as u64 % 2 == 1 { term } else { -term };
            if term < 1e-16 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Asymptotic KS p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

/// Anderson-Darling statistic `A^2`.
pub fn anderson_darling<T: Real>(sorted: &[T], cdf: impl Fn(T) -> T) -> f64 {
    let n = sorted.len();
    let eps = 1e-300;
    let f: Vec<f64> = sorted
        .iter()
        .map(|&x| cdf(x).f64().clamp(eps, 1.0 - 1e-16))
        .collect();
    let mut s = 0.0;
    for i in 0..n {
        let w = (2 * i + 1) as f64;
        s += w * (f[i].ln() + (1.0 - f[n - 1 - i]).ln());
    }
    -(n as f64) - s / n as f64
}

/// Sturges' rule: `ceil(log2 n) + 1` bins.
pub fn sturges_bins(n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    (n as f64).log2().ceil() as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub pvalue: f64,
    pub bins: usize,
}

/// Pearson chi-square over equal-width Sturges bins spanning the sample
/// range (outer bins open-ended), adjacent bins merged until every
/// expected count is at least 5.
pub fn chi_square<T: Real>(sorted: &[T], cdf: impl Fn(T) -> T, fitted_params: usize) -> ChiSquare {
    let n = sorted.len();
    let nf = n as f64;
    let lo = sorted[0].f64();
    let hi = sorted[n - 1].f64();
    let k = sturges_bins(n);
    let width = (hi - lo) / k as f64;

    // (observed, expected) per raw bin
    let mut raw = Vec::with_capacity(k);
    let mut prev_cdf = 0.0;
    let mut idx = 0;
    for b in 0..k {
        let (edge, upper_cdf) = if b + 1 == k {
            (f64::INFINITY, 1.0)
        } else {
            let e = lo + width * (b + 1) as f64;
            (e, cdf(T::lit(e)).f64())
        };
        let mut observed = 0usize;
        while idx < n && (sorted[idx].f64() < edge || b + 1 == k) {
            observed += 1;
            idx += 1;
        }
        raw.push((observed as f64, (upper_cdf - prev_cdf) * nf));
        prev_cdf = upper_cdf;
    }

    let mut merged: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (o, e) in raw {
        acc.0 += o;
        acc.1 += e;
        if acc.1 >= 5.0 {
            merged.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 > 0.0 || acc.1 > 0.0 {
        match merged.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => merged.push(acc),
        }
    }

    let statistic: f64 = merged
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else { 0.0 })
        .sum();
    let dof = merged.len().saturating_sub(1 + fitted_params).max(1);
    let pvalue = if !statistic.is_finite() {
        0.0
    } else if statistic <= 0.0 {
        1.0
    } else {
        gamma_ur(dof as f64 / 2.0, statistic / 2.0)
    };
    ChiSquare {
        statistic,
        dof,
        pvalue,
        bins: merged.len(),
    }
}
