//! One-dimensional Gaussian mixtures fitted by expectation-maximization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean, variance, Family, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_components: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// Component variance floor as a fraction of the sample variance.
    pub variance_floor: f64,
    /// Stop the component sweep after this many consecutive `C` without a
    /// BIC improvement; 0 sweeps all of `1..=max_components`.
    pub bic_patience: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_components: 20,
            restarts: 10,
            max_iter: 200,
            tol: 1e-6,
            variance_floor: 1e-6,
            bic_patience: 3,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit<T> {
    pub weights: Vec<T>,
    pub means: Vec<T>,
    pub variances: Vec<T>,
    pub log_likelihood: T,
    pub bic: T,
    pub iterations: usize,
    /// Log-likelihood after every EM iteration of the winning restart.
    pub ll_trace: Vec<T>,
}

impl<T: Real> GmmFit<T> {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn family(&self) -> Family<T> {
        Family::Gmm {
            weights: self.weights.clone(),
            means: self.means.clone(),
            variances: self.variances.clone(),
        }
    }
}

fn bic<T: Real>(ll: T, params: usize, n: usize) -> T {
    T::lit(params as f64 * (n as f64).ln()) - T::lit(2.0) * ll
}

/// k-means++ seeding in one dimension.
fn kmeans_pp<T: Real>(data: &[T], c: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut centers = Vec::with_capacity(c);
    centers.push(data[rng.random_range(0..data.len())]);
    let mut d2: Vec<f64> = data
        .iter()
        .map(|&x| (x - centers[0]).f64().powi(2))
        .collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            data[rng.random_range(0..data.len())]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            data[pick]
        };
        centers.push(next);
        for (i, &x) in data.iter().enumerate() {
            d2[i] = d2[i].min((x - next).f64().powi(2));
        }
    }
    centers
}

/// Hard-assigns every point to its nearest center to seed weights and
/// variances.
fn init_params<T: Real>(data: &[T], centers: &[T], floor: T, global_var: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = centers.len();
    let mut sum = vec![T::zero(); c];
    let mut sq = vec![T::zero(); c];
    let mut cnt = vec![0usize; c];
    for &x in data {
        let j = (0..c)
            .min_by(|&a, &b| {
                (x - centers[a])
                    .abs()
                    .partial_cmp(&(x - centers[b]).abs())
                    .unwrap()
            })
            .unwrap();
        sum[j] = sum[j] + x;
        sq[j] = sq[j] + x * x;
        cnt[j] += 1;
    }
    let n = T::from_usize(data.len()).unwrap();
    let mut w = Vec::with_capacity(c);
    let mut m = Vec::with_capacity(c);
    let mut v = Vec::with_capacity(c);
    for j in 0..c {
        if cnt[j] == 0 {
            w.push(T::lit(1e-3));
            m.push(centers[j]);
            v.push(global_var);
            continue;
        }
        let k = T::from_usize(cnt[j]).unwrap();
        let mj = sum[j] / k;
        w.push(k / n);
        m.push(mj);
        v.push((sq[j] / k - mj * mj).max(floor));
    }
    let total = w.iter().fold(T::zero(), |a, &x| a + x);
    for x in &mut w {
        *x = *x / total;
    }
    (w, m, v)
}

struct EmRun<T> {
    w: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
    ll_trace: Vec<T>,
}

fn em<T: Real>(data: &[T], mut w: Vec<T>, mut m: Vec<T>, mut v: Vec<T>, floor: T, cfg: &GmmConfig) -> EmRun<T> {
    let n = data.len();
    let c = w.len();
    let mut resp = vec![T::zero(); n * c];
    let mut ll_trace = Vec::new();
    let mut prev_ll = T::neg_infinity();
    for _ in 0..cfg.max_iter {
        // E-step; per component: ln w - ln v / 2 - ln(2 pi) / 2 and -1 / 2v
        let half = T::lit(0.5);
        let base: Vec<T> = (0..c)
            .map(|j| w[j].ln() - half * v[j].ln() - T::lit(0.918_938_533_204_672_8))
            .collect();
        let scale: Vec<T> = v.iter().map(|&v| -half / v).collect();
        let mut ll = T::zero();
        for (i, &x) in data.iter().enumerate() {
            let row = &mut resp[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for j in 0..c {
                let d = x - m[j];
                row[j] = base[j] + scale[j] * d * d;
                max = max.max(row[j]);
            }
            if max == T::neg_infinity() {
                ll = max;
                row.fill(T::zero());
                continue;
            }
            let mut sum = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum = sum + *r;
            }
            for r in row.iter_mut() {
                *r = *r / sum;
            }
            ll = ll + max + sum.ln();
        }
        ll_trace.push(ll);
        let converged = prev_ll.is_finite()
            && (ll - prev_ll) <= T::lit(cfg.tol) * prev_ll.abs();
        prev_ll = ll;
        if converged {
            break;
        }
        // M-step
        for j in 0..c {
            let mut nk = T::zero();
            let mut sx = T::zero();
            for i in 0..n {
                let r = resp[i * c + j];
                nk = nk + r;
                sx = sx + r * data[i];
            }
            if nk <= T::zero() {
                w[j] = T::zero();
                continue;
            }
            let mj = sx / nk;
            let mut sv = T::zero();
            for i in 0..n {
                let d = data[i] - mj;
                sv = sv + resp[i * c + j] * d * d;
            }
            w[j] = nk / T::from_usize(n).unwrap();
            m[j] = mj;
            v[j] = (sv / nk).max(floor);
        }
    }
    EmRun { w, m, v, ll_trace }
}

/// Best of `cfg.restarts` EM runs with `components` Gaussians.
pub fn fit_gmm<T: Real>(data: &[T], components: usize, cfg: &GmmConfig) -> GmmFit<T> {
    let m0 = mean(data);
    let global_var = variance(data, m0);
    let floor = global_var * T::lit(cfg.variance_floor);
    let mut best: Option<GmmFit<T>> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((components as u64) << 32) | restart as u64);
        let centers = kmeans_pp(data, components, &mut rng);
        let (w, m, v) = init_params(data, &centers, floor, global_var);
        let run = em(data, w, m, v, floor, cfg);
        let ll = *run.ll_trace.last().unwrap();
        if best.as_ref().is_none_or(|b| ll > b.log_likelihood) {
            // drop components EM emptied out
            let keep: Vec<usize> = (0..components).filter(|&j| run.w[j] > T::zero()).collect();
            let params = 3 * keep.len() - 1;
            best = Some(GmmFit {
                weights: keep.iter().map(|&j| run.w[j]).collect(),
                means: keep.iter().map(|&j| run.m[j]).collect(),
                variances: keep.iter().map(|&j| run.v[j]).collect(),
                log_likelihood: ll,
                bic: bic(ll, params, data.len()),
                iterations: run.ll_trace.len(),
                ll_trace: run.ll_trace,
            });
        }
    }
    best.expect("at least one restart")
}

/// Sweeps `C = 1..=max_components` and keeps the lowest-BIC mixture.
/// Returns the winner and the `(C, BIC)` of every evaluated mixture.
pub fn select_gmm<T: Real>(data: &[T], cfg: &GmmConfig) -> (GmmFit<T>, Vec<(usize, T)>) {
    let mut best: Option<GmmFit<T>> = None;
    let mut sweep = Vec::new();
    let mut stale = 0;
    let upper = cfg.max_components.max(1).min(data.len());
    for c in 1..=upper {
        let fit = fit_gmm(data, c, cfg);
        sweep.push((c, fit.bic));
        if best.as_ref().is_none_or(|b| fit.bic < b.bic) {
            best = Some(fit);
            stale = 0;
        } else {
            stale += 1;
            if cfg.bic_patience > 0 && stale >= cfg.bic_patience {
                break;
            }
        }
    }
    (best.expect("at least one component count"), sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn bimodal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(1000.0, 100.0).unwrap();
        let b = Normal::new(5000.0, 100.0).unwrap();
        (0..n)
            .map(|_| {
                if rng.random::<bool>() {
                    a.sample(&mut rng)
                } else {
                    b.sample(&mut rng)
                }
            })
            .collect()
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let data = bimodal(2000, 1);
        for c in 1..=5 {
            let fit = fit_gmm(&data, c, &GmmConfig::default());
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "C={c}: {:?}", w);
            }
            let s: f64 = fit.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(fit.variances.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn one_component_is_the_mle_normal() {
        let data = bimodal(500, 2);
        let fit = fit_gmm(&data, 1, &GmmConfig::default());
        let m = mean(&data);
        assert!((fit.means[0] - m).abs() < 1e-6 * m.abs());
        assert!((fit.variances[0] - variance(&data, m)).abs() < 1e-6 * fit.variances[0]);
    }

    #[test]
    fn sweep_prefers_two_components() {
        let data = bimodal(3000, 3);
        let (best, sweep) = select_gmm(&data, &GmmConfig::default());
        assert_eq!(best.components(), 2);
        assert!(sweep.iter().all(|&(_, b)| best.bic <= b));
        let mut means = best.means.clone();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] - 1000.0).abs() < 50.0);
        assert!((means[1] - 5000.0).abs() < 250.0);
    }
}
