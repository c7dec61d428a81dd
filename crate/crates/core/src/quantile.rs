//! Gauge scores, kernel-smoothed quantiles and split-conformal radii.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::{gauge, grad_gauge_l, CholeskyShape, ShapeGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    Logistic,
}

impl Kernel {
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Kernel::Gaussian => 0.5 * erfc(-x / std::f64::consts::SQRT_2),
            Kernel::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn pdf(self, x: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Kernel::Logistic => {
                let e = (-x.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedQuantile {
    pub rho_eps: f64,
    /// Kernel density of each score at the root, `phi((rho_eps - S_i) / eps)`.
    pub weights: Vec<f64>,
    pub eps: f64,
    pub tau: f64,
    pub kernel: Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalRadius {
    pub rho_tau: f64,
    pub k_index: usize,
    pub n_cal: usize,
    pub tau: f64,
}

/// Gauge of every realization, in input order.
pub fn scores(l: &CholeskyShape, us: &[Vec<f64>]) -> Result<Vec<f64>> {
    us.par_iter().map(|u| gauge(l, u)).collect()
}

/// Smoothed CDF `(1/n) sum K((r - S_i) / eps)`.
pub fn smoothed_cdf(scores: &[f64], r: f64, eps: f64, kernel: Kernel) -> f64 {
    scores.iter().map(|s| kernel.cdf((r - s) / eps)).sum::<f64>() / scores.len() as f64
}

/// Smallest `r` with smoothed CDF at least `tau`, by bisection.
pub fn smoothed_quantile(scores: &[f64], tau: f64, eps: f64, kernel: Kernel) -> Result<SmoothedQuantile> {
    if scores.len() < 2 {
        return Err(Error::TooShort { len: scores.len(), needed: 2 });
    }
    if !(tau > 0.0 && tau < 1.0) || !(eps > 0.0) {
        return Err(Error::BadParams(format!("need 0 < tau < 1 and eps > 0 (tau {tau}, eps {eps})")));
    }
    let (mn, mx) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let mut lo = mn - 10.0 * eps;
    let mut hi = mx + 10.0 * eps;
    let f = |r: f64| smoothed_cdf(scores, r, eps, kernel);
    if f(lo) >= tau || f(hi) < tau {
        return Err(Error::Numerical(format!("quantile bracket [{lo}, {hi}] does not contain the root")));
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi.abs().max(eps) {
            break;
        }
    }
    let weights = scores.iter().map(|s| kernel.pdf((hi - s) / eps)).collect();
    Ok(SmoothedQuantile { rho_eps: hi, weights, eps, tau, kernel })
}

/// Derivative of the smoothed quantile with respect to `L`:
/// `sum w_i grad s_L(u_i) / sum w_i`.
pub fn quantile_sensitivity(l: &CholeskyShape, us: &[Vec<f64>], sq: &SmoothedQuantile) -> Result<ShapeGradient> {
    if us.len() != sq.weights.len() {
        return Err(Error::Dimension(format!("{} samples for {} weights", us.len(), sq.weights.len())));
    }
    weighted_gauge_gradient(us.iter().map(|u| (l, u.as_slice())), &sq.weights, l.dim())
}

/// Shared machinery for static and per-context shapes.
pub fn weighted_gauge_gradient<'a>(
    items: impl Iterator<Item = (&'a CholeskyShape, &'a [f64])>,
    weights: &[f64],
    dim: usize,
) -> Result<ShapeGradient> {
    let wmax = weights.iter().copied().fold(0.0f64, f64::max);
    let mut acc = ShapeGradient::zeros(dim);
    let mut wsum = 0.0;
    for ((l, u), &w) in items.zip(weights) {
        if w <= wmax * 1e-18 || w == 0.0 {
            continue;
        }
        match grad_gauge_l(l, u) {
            Ok(g) => {
                acc.add_scaled(&g, w);
                wsum += w;
            }
            Err(Error::ZeroRealization) => {}
            Err(e) => return Err(e),
        }
    }
    if !(wsum > 1e-300) {
        return Err(Error::DegenerateWeights);
    }
    Ok(acc.scaled(1.0 / wsum))
}

/// Order statistic `S_(k)` with `k = ceil((n_cal + 1) tau)`.
///
/// The product is nudged down by `1e-9` relative before rounding up so that
/// decimal levels such as 0.95 land on the intended integer.
pub fn conformal_radius(cal_scores: &[f64], tau: f64) -> Result<ConformalRadius> {
    let n_cal = cal_scores.len();
    if n_cal == 0 {
        return Err(Error::InsufficientCalibration { k: 1, n_cal });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::BadParams(format!("tau {tau} outside (0, 1)")));
    }
    let k = conformal_index(n_cal, tau);
    if k > n_cal {
        return Err(Error::InsufficientCalibration { k, n_cal });
    }
    let mut sorted = cal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ConformalRadius { rho_tau: sorted[k - 1], k_index: k, n_cal, tau })
}

pub fn conformal_index(n_cal: usize, tau: f64) -> usize {
    let x = (n_cal + 1) as f64 * tau;
    ((x - 1e-9 * x.max(1.0)).ceil() as usize).max(1)
}

/// Fraction of realizations with gauge at most `rho`.
pub fn empirical_coverage(l: &CholeskyShape, rho: f64, us: &[Vec<f64>]) -> Result<f64> {
    let s = scores(l, us)?;
    Ok(coverage_of_scores(&s, rho))
}

pub fn coverage_of_scores(scores: &[f64], rho: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| **s <= rho).count() as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn normal_samples(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn some_shape(d: usize) -> CholeskyShape {
        let m = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0 + 0.2 * i as f64
            } else if i > j {
                0.3 / (1.0 + (i - j) as f64)
            } else {
                0.0
            }
        });
        CholeskyShape::new(m).unwrap()
    }

    #[test]
    fn score_examples() {
        let l = CholeskyShape::identity(2);
        let s = scores(&l, &[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_scores_closed_form() {
        let c = 3.0;
        let eps = 0.5;
        for tau in [0.1, 0.5, 0.9, 0.95] {
            let sq = smoothed_quantile(&[c; 10], tau, eps, Kernel::Gaussian).unwrap();
            let want = c + eps * Normal::standard().inverse_cdf(tau);
            assert!((sq.rho_eps - want).abs() < 1e-9, "{} vs {want}", sq.rho_eps);
            let f = smoothed_cdf(&[c; 10], sq.rho_eps, eps, Kernel::Gaussian);
            assert!(f >= tau && f <= tau + 1e-9);
        }
    }

    #[test]
    fn symmetric_median_is_zero() {
        let sq = smoothed_quantile(&[-2.0, 2.0], 0.5, 0.7, Kernel::Gaussian).unwrap();
        assert!(sq.rho_eps.abs() < 1e-12);
        let sq = smoothed_quantile(&[-2.0, 2.0], 0.5, 0.7, Kernel::Logistic).unwrap();
        assert!(sq.rho_eps.abs() < 1e-12);
    }

    #[test]
    fn small_bandwidth_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let s: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..10.0)).collect();
            let tau = 0.9;
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            let k = (200.0f64 * tau).ceil() as usize;
            let sq = smoothed_quantile(&s, tau, 1e-8, Kernel::Gaussian).unwrap();
            assert!((sq.rho_eps - sorted[k - 1]).abs() <= 1e-6);
        }
    }

    #[test]
    fn bandwidth_bias_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let n = 300 + seed * 17;
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            for eps in [0.01, 0.1, 0.5] {
                let sq = smoothed_quantile(&s, 0.95, eps, Kernel::Gaussian).unwrap();
                let emp = sorted[(n as f64 * 0.95).ceil() as usize - 1];
                assert!((sq.rho_eps - emp).abs() <= 5.0 * eps);
            }
        }
    }

    #[test]
    fn monotone_in_tau_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut prev = f64::NEG_INFINITY;
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let q = smoothed_quantile(&s, tau, 0.3, Kernel::Logistic).unwrap().rho_eps;
            assert!(q >= prev);
            prev = q;
        }
        let shifted: Vec<f64> = s.iter().map(|v| v + 0.25).collect();
        let a = smoothed_quantile(&s, 0.9, 0.3, Kernel::Gaussian).unwrap().rho_eps;
        let b = smoothed_quantile(&shifted, 0.9, 0.3, Kernel::Gaussian).unwrap().rho_eps;
        assert!(b >= a && (b - a - 0.25).abs() < 1e-9);
    }

    #[test]
    fn sensitivity_single_sample() {
        let l = some_shape(3);
        let us = vec![vec![0.3, -1.2, 0.8]];
        let sq = SmoothedQuantile { rho_eps: 1.0, weights: vec![0.4], eps: 0.5, tau: 0.9, kernel: Kernel::Gaussian };
        let g = quantile_sensitivity(&l, &us, &sq).unwrap();
        let want = grad_gauge_l(&l, &us[0]).unwrap();
        assert!((g.matrix() - want.matrix()).norm() < 1e-14);
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let l = some_shape(3);
            let us = normal_samples(&mut rng, 500, 3);
            let eps = 0.5;
            let q = |l: &CholeskyShape| {
                let s = scores(l, &us).unwrap();
                smoothed_quantile(&s, 0.9, eps, Kernel::Gaussian).unwrap()
            };
            let g = quantile_sensitivity(&l, &us, &q(&l)).unwrap();
            let h = 1e-5;
            let mut fd = DMatrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..=i {
                    let mut p = l.matrix().clone();
                    p[(i, j)] += h;
                    let mut m = l.matrix().clone();
                    m[(i, j)] -= h;
                    let vp = q(&CholeskyShape::new(p).unwrap()).rho_eps;
                    let vm = q(&CholeskyShape::new(m).unwrap()).rho_eps;
                    fd[(i, j)] = (vp - vm) / (2.0 * h);
                }
            }
            let rel = (g.matrix() - &fd).norm() / fd.norm();
            assert!(rel <= 1e-3, "rel err {rel:e}");
        }
    }

    #[test]
    fn homogeneity_with_scaled_bandwidth() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = some_shape(3);
        let us = normal_samples(&mut rng, 300, 3);
        let c = 2.5;
        let scaled: Vec<Vec<f64>> = us.iter().map(|u| u.iter().map(|v| c * v).collect()).collect();
        let a = smoothed_quantile(&scores(&l, &us).unwrap(), 0.9, 0.4, Kernel::Gaussian).unwrap();
        let b = smoothed_quantile(&scores(&l, &scaled).unwrap(), 0.9, 0.4 * c, Kernel::Gaussian).unwrap();
        assert!((b.rho_eps - c * a.rho_eps).abs() <= 1e-9 * b.rho_eps);
        let na: f64 = a.weights.iter().sum();
        let nb: f64 = b.weights.iter().sum();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa / na - wb / nb).abs() <= 1e-8);
        }
    }

    #[test]
    fn degenerate_weights() {
        let l = CholeskyShape::identity(1);
        let sq = SmoothedQuantile { rho_eps: 1.0, weights: vec![0.0, 0.0], eps: 1e-9, tau: 0.5, kernel: Kernel::Gaussian };
        let r = quantile_sensitivity(&l, &[vec![1.0], vec![2.0]], &sq);
        assert!(matches!(r, Err(Error::DegenerateWeights)));
    }

    #[test]
    fn conformal_examples() {
        let s19: Vec<f64> = (1..=19).map(f64::from).collect();
        let r = conformal_radius(&s19, 0.95).unwrap();
        assert_eq!((r.k_index, r.rho_tau), (19, 19.0));
        let s99: Vec<f64> = (1..=99).rev().map(f64::from).collect();
        let r = conformal_radius(&s99, 0.95).unwrap();
        assert_eq!((r.k_index, r.rho_tau), (95, 95.0));
        let s9: Vec<f64> = (1..=9).map(f64::from).collect();
        assert!(matches!(
            conformal_radius(&s9, 0.95),
            Err(Error::InsufficientCalibration { k: 10, n_cal: 9 })
        ));
        assert_eq!(conformal_index(3504, 0.95), 3330);
        assert_eq!(conformal_index(99, 0.9), 90);
    }

    #[test]
    fn coverage_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = some_shape(3);
        let us = normal_samples(&mut rng, 200, 3);
        let s = scores(&l, &us).unwrap();
        let mx = s.iter().copied().fold(0.0, f64::max);
        let mn = s.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(empirical_coverage(&l, mx, &us).unwrap(), 1.0);
        assert_eq!(empirical_coverage(&l, mn * 0.999, &us).unwrap(), 0.0);
        let r = conformal_radius(&s, 0.9).unwrap();
        let cov = empirical_coverage(&l, r.rho_tau, &us).unwrap();
        assert!(cov >= r.k_index as f64 / r.n_cal as f64 - 1e-12);
    }
}
