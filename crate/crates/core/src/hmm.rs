//! Univariate Gaussian hidden Markov model fitted by Baum-Welch, used one
//! per variable as the parallel HMM baseline.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{arg_err, config_err, Result};
use crate::nd::{log_sum_exp, Matrix};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct HmmParams {
    pub initial: Vec<f64>,
    /// Row-stochastic `m x m`.
    pub transition: Matrix,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl HmmParams {
    pub fn n_states(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.means.len();
        if m == 0
            || self.initial.len() != m
            || self.variances.len() != m
            || self.transition.shape() != (m, m)
        {
            return Err(arg_err!("inconsistent HMM shapes for {} states", m));
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|p| *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !stochastic(&self.initial) || !(0..m).all(|i| stochastic(self.transition.row(i))) {
            return Err(arg_err!("HMM probabilities are not stochastic"));
        }
        if self.variances.iter().any(|v| !(*v > 0.0)) {
            return Err(arg_err!("HMM variances must be positive"));
        }
        Ok(())
    }

    pub fn log_emission(&self, state: usize, x: f64) -> f64 {
        let v = self.variances[state];
        let d = x - self.means[state];
        -0.5 * (LN_2PI + libm::log(v) + d * d / v)
    }

    fn emission_table(&self, series: &[f64]) -> (Matrix, Vec<f64>) {
        let m = self.n_states();
        let mut b = Matrix::zeros(series.len(), m);
        let mut shift = Vec::with_capacity(series.len());
        for (t, &x) in series.iter().enumerate() {
            let row = b.row_mut(t);
            for (u, v) in row.iter_mut().enumerate() {
                *v = self.log_emission(u, x);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = libm::exp(*v - mx));
            shift.push(mx);
        }
        (b, shift)
    }
}

/// Scaled forward pass: normalized filtering distributions and the total
/// log-likelihood.
pub struct Forward {
    pub alpha: Matrix,
    pub scales: Vec<f64>,
    pub log_likelihood: f64,
}

fn forward_with(params: &HmmParams, b: &Matrix, shift: &[f64]) -> Forward {
    let (n, m) = b.shape();
    let mut alpha = Matrix::zeros(n, m);
    let mut scales = Vec::with_capacity(n);
    let mut ll = 0.0;
    for t in 0..n {
        for u in 0..m {
            let prior = if t == 0 {
                params.initial[u]
            } else {
                (0..m)
                    .map(|w| alpha.get(t - 1, w) * params.transition.get(w, u))
                    .sum()
            };
            alpha.set(t, u, prior * b.get(t, u));
        }
        let c: f64 = alpha.row(t).iter().sum();
        let c = if c > 0.0 { c } else { f64::MIN_POSITIVE };
        alpha.row_mut(t).iter_mut().for_each(|v| *v /= c);
        scales.push(c);
        ll += libm::log(c) + shift[t];
    }
    Forward {
        alpha,
        scales,
        log_likelihood: ll,
    }
}

pub fn forward(params: &HmmParams, series: &[f64]) -> Forward {
    let (b, shift) = params.emission_table(series);
    forward_with(params, &b, &shift)
}

pub fn log_likelihood(params: &HmmParams, series: &[f64]) -> f64 {
    forward(params, series).log_likelihood
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which iteration stops.
    pub tol: f64,
    /// Extra fits from randomly drawn means; the best likelihood wins.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            restarts: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub params: HmmParams,
    /// Log-likelihood before each re-estimation.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn quantile_init(series: &[f64], m: usize) -> HmmParams {
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let means = (1..=m)
        .map(|k| {
            let q = (2 * k - 1) as f64 / (2 * m) as f64;
            sorted[((q * n as f64) as usize).min(n - 1)]
        })
        .collect();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = (series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);
    HmmParams {
        initial: vec![1.0 / m as f64; m],
        transition: Matrix::filled(m, m, 1.0 / m as f64),
        means,
        variances: vec![var; m],
    }
}

fn em_from(mut params: HmmParams, series: &[f64], cfg: &EmConfig) -> EmFit {
    let (n, m) = (series.len(), params.n_states());
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let (b, shift) = params.emission_table(series);
        let fw = forward_with(&params, &b, &shift);
        let ll = fw.log_likelihood;
        if let Some(&prev) = trace.last() {
            if ll - prev <= cfg.tol * libm::fabs(prev) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        let mut beta = Matrix::filled(n, m, 1.0);
        for t in (0..n - 1).rev() {
            for u in 0..m {
                let s: f64 = (0..m)
                    .map(|w| params.transition.get(u, w) * b.get(t + 1, w) * beta.get(t + 1, w))
                    .sum();
                beta.set(t, u, s / fw.scales[t + 1]);
            }
        }
        let mut gamma = Matrix::zeros(n, m);
        for t in 0..n {
            let row: Vec<f64> = (0..m).map(|u| fw.alpha.get(t, u) * beta.get(t, u)).collect();
            let s: f64 = row.iter().sum();
            for u in 0..m {
                gamma.set(t, u, if s > 0.0 { row[u] / s } else { 1.0 / m as f64 });
            }
        }
        let mut xi = Matrix::zeros(m, m);
        for t in 0..n - 1 {
            for u in 0..m {
                for w in 0..m {
                    let v = fw.alpha.get(t, u)
                        * params.transition.get(u, w)
                        * b.get(t + 1, w)
                        * beta.get(t + 1, w)
                        / fw.scales[t + 1];
                    xi.set(u, w, xi.get(u, w) + v);
                }
            }
        }

        params.initial = gamma.row(0).to_vec();
        for u in 0..m {
            let total: f64 = xi.row(u).iter().sum();
            if total > 0.0 {
                for w in 0..m {
                    params.transition.set(u, w, xi.get(u, w) / total);
                }
            }
            let weight: f64 = (0..n).map(|t| gamma.get(t, u)).sum();
            if weight > 0.0 {
                let mean = (0..n).map(|t| gamma.get(t, u) * series[t]).sum::<f64>() / weight;
                let var = (0..n)
                    .map(|t| gamma.get(t, u) * (series[t] - mean) * (series[t] - mean))
                    .sum::<f64>()
                    / weight;
                params.means[u] = mean;
                params.variances[u] = var.max(VARIANCE_FLOOR);
            }
        }
    }
    EmFit {
        params,
        trace,
        converged,
    }
}

/// Baum-Welch from quantile-spaced means, plus optional random restarts.
pub fn fit_em<R: Rng + ?Sized>(
    series: &[f64],
    m: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<EmFit> {
    if m == 0 || series.len() <= m {
        return Err(arg_err!(
            "cannot fit {} states to {} observations",
            m,
            series.len()
        ));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(arg_err!("series contains non-finite values"));
    }
    if !(cfg.tol >= 0.0) || cfg.max_iters == 0 {
        return Err(config_err!("EM needs max_iters > 0 and tol >= 0"));
    }
    let init = quantile_init(series, m);
    let mut best = em_from(init.clone(), series, cfg);
    for _ in 0..cfg.restarts {
        let mut p = init.clone();
        p.means = (0..m)
            .map(|_| series[rng.random_range(0..series.len())])
            .collect();
        let fit = em_from(p, series, cfg);
        if fit.trace.last() > best.trace.last() {
            best = fit;
        }
    }
    Ok(best)
}

/// Most probable state path; ties resolve toward the lower state index.
pub fn viterbi(params: &HmmParams, series: &[f64]) -> Vec<usize> {
    let (n, m) = (series.len(), params.n_states());
    if n == 0 {
        return Vec::new();
    }
    let log_a: Vec<f64> = params.transition.data().iter().map(|p| libm::log(*p)).collect();
    let mut delta: Vec<f64> = (0..m)
        .map(|u| libm::log(params.initial[u]) + params.log_emission(u, series[0]))
        .collect();
    let mut back = vec![0usize; n * m];
    let mut next = vec![0.0; m];
    for t in 1..n {
        for w in 0..m {
            let mut arg = 0;
            let mut best = f64::NEG_INFINITY;
            for (u, d) in delta.iter().enumerate() {
                let v = d + log_a[u * m + w];
                if v > best {
                    best = v;
                    arg = u;
                }
            }
            back[t * m + w] = arg;
            next[w] = best + params.log_emission(w, series[t]);
        }
        core::mem::swap(&mut delta, &mut next);
    }
    let mut state = 0;
    for u in 1..m {
        if delta[u] > delta[state] {
            state = u;
        }
    }
    let mut path = vec![0; n];
    for t in (0..n).rev() {
        path[t] = state;
        state = back[t * m + state];
    }
    path
}

/// One-step predictive means: `out[t]` forecasts `series[t]` from
/// `series[..t]`, mixing state means under the predicted state distribution.
pub fn forecast_series(params: &HmmParams, series: &[f64]) -> Vec<f64> {
    let m = params.n_states();
    let mix = |dist: &[f64]| -> f64 { dist.iter().zip(&params.means).map(|(p, mu)| p * mu).sum() };
    let mut out = Vec::with_capacity(series.len());
    let mut predicted = params.initial.clone();
    for &x in series {
        out.push(mix(&predicted));
        let logs: Vec<f64> = (0..m)
            .map(|u| libm::log(predicted[u]) + params.log_emission(u, x))
            .collect();
        let z = log_sum_exp(&logs);
        let filtered: Vec<f64> = logs.iter().map(|l| libm::exp(l - z)).collect();
        predicted = (0..m)
            .map(|w| (0..m).map(|u| filtered[u] * params.transition.get(u, w)).sum())
            .collect();
    }
    out
}

/// Forecast of the next value after `prefix`.
pub fn forecast_one_step(params: &HmmParams, prefix: &[f64]) -> f64 {
    let mut extended = prefix.to_vec();
    extended.push(0.0);
    forecast_series(params, &extended)[prefix.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_state() -> HmmParams {
        HmmParams {
            initial: vec![0.6, 0.4],
            transition: Matrix::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]).unwrap(),
            means: vec![-1.0, 1.0],
            variances: vec![0.5, 0.3],
        }
    }

    #[test]
    fn single_state_fit_is_sample_moments() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let fit = fit_em(&x, 1, &EmConfig::default(), &mut stream(0, "hmm", &[])).unwrap();
        assert!((fit.params.means[0] - 3.5).abs() < 1e-12);
        assert!((fit.params.variances[0] - 5.25).abs() < 1e-12);
        assert_eq!(viterbi(&fit.params, &x), vec![0; 4]);
        assert!((forecast_one_step(&fit.params, &x) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn identity_transitions_keep_known_state() {
        let mut p = two_state();
        p.transition = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        p.initial = vec![0.0, 1.0];
        assert!((forecast_one_step(&p, &[0.3, -0.2]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floored_variances_decode_to_nearest_mean() {
        let mut p = two_state();
        p.variances = vec![VARIANCE_FLOOR; 2];
        let x = [-0.9, 1.1, 0.8, -1.2, -0.7];
        let want: Vec<usize> = x.iter().map(|v| usize::from(*v > 0.0)).collect();
        assert_eq!(viterbi(&p, &x), want);
    }

    #[test]
    fn likelihood_matches_two_step_sum() {
        let p = two_state();
        let x = [0.2, -0.4];
        let e = |u: usize, v: f64| libm::exp(p.log_emission(u, v));
        let mut direct = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                direct += p.initial[a] * e(a, x[0]) * p.transition.get(a, b) * e(b, x[1]);
            }
        }
        assert!((log_likelihood(&p, &x) - libm::log(direct)).abs() < 1e-12);
    }

    #[test]
    fn em_rows_stay_stochastic() {
        let mut rng = stream(2, "hmm", &[]);
        let x: Vec<f64> = (0..300)
            .map(|t| if (t / 30) % 2 == 0 { -2.0 } else { 2.0 } + rng.random_range(-0.5..0.5))
            .collect();
        let fit = fit_em(&x, 2, &EmConfig::default(), &mut rng).unwrap();
        fit.params.validate().unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn rejects_short_series() {
        let mut rng = stream(0, "hmm", &[]);
        assert!(fit_em(&[1.0, 2.0], 2, &EmConfig::default(), &mut rng).is_err());
    }
}
