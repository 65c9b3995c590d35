use proptest::prelude::*;
use statehawk_core::hmm::{fit_em, forecast_series, log_likelihood, viterbi, EmConfig, HmmParams};
use statehawk_core::nd::Matrix;
use statehawk_core::rng::stream;
use statehawk_core::sim::{generate, SimConfig};

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn params_strategy(m: usize) -> impl Strategy<Value = HmmParams> {
    (
        prop::collection::vec(0.05f64..1.0, m),
        prop::collection::vec(0.05f64..1.0, m * m),
        prop::collection::vec(-2.0f64..2.0, m),
        prop::collection::vec(0.1f64..2.0, m),
    )
        .prop_map(move |(init, trans, means, variances)| {
            let rows: Vec<f64> = trans
                .chunks(m)
                .flat_map(|r| normalize(r.to_vec()))
                .collect();
            HmmParams {
                initial: normalize(init),
                transition: Matrix::from_vec(m, m, rows).unwrap(),
                means,
                variances,
            }
        })
}

/// Every state path of length `n` over `m` states.
fn paths(m: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |u| {
                    let mut q = p.clone();
                    q.push(u);
                    q
                })
            })
            .collect();
    }
    out
}

/// Log joint of a path; emissions only at the first `observed.len()` steps.
fn path_log_joint(p: &HmmParams, path: &[usize], observed: &[f64]) -> f64 {
    let mut lp = p.initial[path[0]].ln();
    for t in 1..path.len() {
        lp += p.transition.get(path[t - 1], path[t]).ln();
    }
    for (t, &x) in observed.iter().enumerate() {
        lp += p.log_emission(path[t], x);
    }
    lp
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn viterbi_and_likelihood_match_enumeration(
        p in params_strategy(3),
        xs in prop::collection::vec(-3.0f64..3.0, 1..7),
    ) {
        let all = paths(3, xs.len());
        let joints: Vec<f64> = all.iter().map(|q| path_log_joint(&p, q, &xs)).collect();
        let best = joints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let decoded = viterbi(&p, &xs);
        prop_assert!((path_log_joint(&p, &decoded, &xs) - best).abs() < 1e-9);
        prop_assert!((log_likelihood(&p, &xs) - log_sum_exp(&joints)).abs() < 1e-9);
    }

    #[test]
    fn forecasts_match_enumerated_predictive_mean(
        p in params_strategy(2),
        xs in prop::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let got = forecast_series(&p, &xs);
        for t in 0..xs.len() {
            let all = paths(2, t + 1);
            let logs: Vec<f64> = all.iter().map(|q| path_log_joint(&p, q, &xs[..t])).collect();
            let z = log_sum_exp(&logs);
            let want: f64 = all
                .iter()
                .zip(&logs)
                .map(|(q, l)| (l - z).exp() * p.means[q[t]])
                .sum();
            prop_assert!((got[t] - want).abs() < 1e-9, "t {}: {} vs {}", t, got[t], want);
        }
    }
}

#[test]
fn em_never_decreases_likelihood() {
    let data = generate(&SimConfig::three_variable(5)).unwrap();
    let series: Vec<f64> = data.series(0)[..1500].to_vec();
    let mut rng = stream(5, "hmm", &[]);
    let fit = fit_em(&series, 2, &EmConfig::default(), &mut rng).unwrap();
    for w in fit.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} then {}", w[0], w[1]);
    }
    fit.params.validate().unwrap();
}

#[test]
fn em_recovers_well_separated_regimes() {
    let truth = HmmParams {
        initial: vec![0.5, 0.5],
        transition: Matrix::from_vec(2, 2, vec![0.98, 0.02, 0.03, 0.97]).unwrap(),
        means: vec![-2.0, 2.0],
        variances: vec![0.25, 0.25],
    };
    let mut rng = stream(9, "hmm", &[]);
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut s = 0usize;
    let mut xs = Vec::new();
    for _ in 0..3000 {
        xs.push(Normal::new(truth.means[s], 0.5).unwrap().sample(&mut rng));
        if rng.random::<f64>() > truth.transition.get(s, s) {
            s = 1 - s;
        }
    }
    let fit = fit_em(&xs, 2, &EmConfig::default(), &mut rng).unwrap();
    let mut means = fit.params.means.clone();
    means.sort_by(f64::total_cmp);
    assert!((means[0] + 2.0).abs() < 0.1 && (means[1] - 2.0).abs() < 0.1, "{means:?}");
}
