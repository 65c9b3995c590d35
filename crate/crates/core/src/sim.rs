//! Coupled higher-order semi-Markov simulator with autoregressive emissions.
//!
//! Each variable follows a second-order transition tensor whose logits are
//! shifted toward the states its neighbors held at the previous step. A
//! state persists for a sampled sojourn time, and observations follow a
//! state-specific AR(P) recursion.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};

use crate::dataset::Dataset;
use crate::error::{arg_err, config_err, Result};
use crate::nd::softmax;
use crate::rng::{stream, StreamRng};

const PROB_FLOOR: f64 = 1e-12;

/// Second-order transition weights `psi[a][b][u]`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTensor {
    m: usize,
    psi: Vec<f64>,
    pattern: Option<u8>,
}

impl TransitionTensor {
    pub fn new(m: usize, psi: Vec<f64>) -> Result<Self> {
        if m == 0 || psi.len() != m * m * m {
            return Err(config_err!(
                "transition tensor for {} states needs {} entries, got {}",
                m,
                m * m * m,
                psi.len()
            ));
        }
        if psi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(config_err!(
                "transition weights must be finite and nonnegative"
            ));
        }
        let t = Self {
            m,
            psi,
            pattern: None,
        };
        for a in 0..m {
            for b in 0..m {
                if t.row(a, b).iter().sum::<f64>() <= 0.0 {
                    return Err(config_err!(
                        "transition row ({}, {}) is all zero",
                        a + 1,
                        b + 1
                    ));
                }
            }
        }
        Ok(t)
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            m,
            psi: vec![1.0; m * m * m],
            pattern: None,
        }
    }

    /// One of the five predefined two-state patterns (1-based id).
    ///
    /// Where the table speaks of remaining or flipping, the pair is read
    /// as (stay in `b`, leave `b`); other rows are absolute.
    pub fn pattern(id: u8) -> Result<Self> {
        let rule = |a: usize, b: usize| -> [f64; 2] {
            let stay_flip = |stay: f64| {
                let mut p = [1.0 - stay; 2];
                p[b] = stay;
                p
            };
            match id {
                1 if a == b => stay_flip(0.9),
                1 => [0.5, 0.5],
                2 => [0.1, 0.9],
                3 if (a, b) == (0, 1) => [0.8, 0.2],
                3 if a == b => stay_flip(0.7),
                3 => [0.2, 0.8],
                4 if a == b => stay_flip(0.2),
                4 => stay_flip(0.85),
                _ => [0.5, 0.5],
            }
        };
        if !(1..=5).contains(&id) {
            return Err(config_err!("transition pattern {} not in 1..=5", id));
        }
        let mut psi = Vec::with_capacity(8);
        for a in 0..2 {
            for b in 0..2 {
                psi.extend_from_slice(&rule(a, b));
            }
        }
        Ok(Self {
            m: 2,
            psi,
            pattern: Some(id),
        })
    }

    pub fn n_states(&self) -> usize {
        self.m
    }

    pub fn pattern_id(&self) -> Option<u8> {
        self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.psi
    }

    fn row(&self, a: usize, b: usize) -> &[f64] {
        let start = (a * self.m + b) * self.m;
        &self.psi[start..start + self.m]
    }

    /// `Ψ[a, b, ·]` normalized to a distribution (0-based states).
    pub fn base_transition(&self, a: usize, b: usize) -> Result<Vec<f64>> {
        if a >= self.m || b >= self.m {
            return Err(arg_err!(
                "history ({}, {}) outside 1..={}",
                a + 1,
                b + 1,
                self.m
            ));
        }
        let row = self.row(a, b);
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(config_err!(
                "transition row ({}, {}) is all zero",
                a + 1,
                b + 1
            ));
        }
        Ok(row.iter().map(|v| v / total).collect())
    }
}

/// Shifts `log base(u)` by `eta` per neighbor in state `u` and renormalizes.
///
/// `neighbor_states[j]` is variable `j`'s previous state; only entries with
/// `adjacency_row[j]` set contribute.
pub fn coupled_transition(
    base: &[f64],
    neighbor_states: &[usize],
    adjacency_row: &[bool],
    eta: f64,
) -> Result<Vec<f64>> {
    if neighbor_states.len() != adjacency_row.len() {
        return Err(arg_err!(
            "{} neighbor states for an adjacency row of {}",
            neighbor_states.len(),
            adjacency_row.len()
        ));
    }
    if eta == 0.0 {
        return Ok(base.to_vec());
    }
    let mut logits: Vec<f64> = base.iter().map(|p| libm::log(p.max(PROB_FLOOR))).collect();
    for (&s, &linked) in neighbor_states.iter().zip(adjacency_row) {
        if linked {
            let slot = logits
                .get_mut(s)
                .ok_or_else(|| arg_err!("neighbor state {} outside 1..={}", s + 1, base.len()))?;
            *slot += eta;
        }
    }
    Ok(softmax(&logits))
}

/// Sojourn-time distribution; every draw is at least 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DurationDist {
    /// Number of trials up to and including the first success.
    Geometric(f64),
    OnePlusPoisson(f64),
    Fixed(usize),
}

impl DurationDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Geometric(p) if !(p > 0.0 && p <= 1.0) => {
                Err(config_err!("geometric p={} outside (0, 1]", p))
            }
            Self::OnePlusPoisson(l) if !(l > 0.0 && l.is_finite()) => {
                Err(config_err!("poisson rate {} must be positive", l))
            }
            Self::Fixed(0) => Err(config_err!("fixed duration must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Geometric(p) => 1.0 / p,
            Self::OnePlusPoisson(l) => 1.0 + l,
            Self::Fixed(d) => d as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Self::Geometric(p) => (1.0 - p) / (p * p),
            Self::OnePlusPoisson(l) => l,
            Self::Fixed(_) => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        self.validate()?;
        Ok(match *self {
            Self::Geometric(p) => {
                let g = Geometric::new(p).map_err(|e| config_err!("geometric: {}", e))?;
                1 + g.sample(rng) as usize
            }
            Self::OnePlusPoisson(l) => {
                let d = Poisson::new(l).map_err(|e| config_err!("poisson: {}", e))?;
                1 + d.sample(rng) as usize
            }
            Self::Fixed(d) => d,
        })
    }
}

/// AR emission: `Σ_p coeffs[p]·x_{t−1−p} + N(0, σ²)`, where `history` ends
/// with the most recent observation.
pub fn emit<R: Rng + ?Sized>(coeffs: &[f64], history: &[f64], sigma: f64, rng: &mut R) -> f64 {
    let mean: f64 = coeffs
        .iter()
        .zip(history.iter().rev())
        .map(|(a, x)| a * x)
        .sum();
    mean + gaussian(sigma, rng)
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma)
        .expect("validated sigma")
        .sample(rng)
}

/// Per-variable simulator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableConfig {
    pub transition: TransitionTensor,
    /// One distribution per state.
    pub durations: Vec<DurationDist>,
    /// `ar[s][p]` is the lag-`p+1` coefficient in state `s`.
    pub ar: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl VariableConfig {
    pub fn ar_order(&self) -> usize {
        self.ar.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_states: usize,
    pub length: usize,
    pub eta: f64,
    /// Row-major `N x N`; `adjacency[i*N + j]` means `j` influences `i`.
    pub adjacency: Vec<bool>,
    pub vars: Vec<VariableConfig>,
    pub seed: u64,
}

/// Two-state AR(1) emissions used throughout the simulated benchmarks.
pub const AR_COEFFS: [f64; 2] = [1.0, -0.9];
pub const NOISE_SIGMA: f64 = 0.1;
pub const COUPLING_ETA: f64 = 0.2;

/// Sojourn-time table rows (1-based index), `[state 1, state 2]`.
pub fn duration_row(index: usize) -> Result<[DurationDist; 2]> {
    use DurationDist::*;
    if !(1..=10).contains(&index) {
        return Err(config_err!("duration table row {} not in 1..=10", index));
    }
    // rows 6..=10 repeat 1..=5
    Ok(match (index - 1) % 5 {
        0 => [Geometric(0.01), OnePlusPoisson(250.0)],
        1 => [Geometric(0.001), OnePlusPoisson(20.0)],
        2 => [Fixed(200), Geometric(0.0025)],
        3 => [OnePlusPoisson(100.0), OnePlusPoisson(100.0)],
        _ => [Geometric(0.01), Geometric(0.005)],
    })
}

/// Faster-switching duration rows for the three benchmark variables.
pub fn fast_duration_rows(variant: u8) -> Result<[[DurationDist; 2]; 3]> {
    use DurationDist::*;
    match variant {
        1 => Ok([
            [Geometric(0.3), OnePlusPoisson(10.0)],
            [Geometric(0.01), OnePlusPoisson(2.0)],
            [Fixed(20), Geometric(0.1)],
        ]),
        2 => Ok([
            [Geometric(0.15), OnePlusPoisson(20.0)],
            [Geometric(0.05), OnePlusPoisson(4.0)],
            [Fixed(40), Geometric(0.05)],
        ]),
        _ => Err(config_err!(
            "fast-switching variant {} not in 1..=2",
            variant
        )),
    }
}

fn benchmark_var(pattern: u8, durations: [DurationDist; 2]) -> Result<VariableConfig> {
    Ok(VariableConfig {
        transition: TransitionTensor::pattern(pattern)?,
        durations: durations.to_vec(),
        ar: AR_COEFFS.iter().map(|a| vec![*a]).collect(),
        sigma: NOISE_SIGMA,
    })
}

fn chain3() -> Vec<bool> {
    [0, 1, 0, 1, 0, 1, 0, 1, 0]
        .iter()
        .map(|v| *v == 1)
        .collect()
}

impl SimConfig {
    /// Three variables, patterns 1/2/3, duration rows 1/2/3, chain coupling.
    pub fn three_variable(seed: u64) -> Self {
        let vars = (0..3)
            .map(|k| benchmark_var(k as u8 + 1, duration_row(k + 1).expect("row")))
            .collect::<Result<Vec<_>>>()
            .expect("predefined tables are valid");
        Self {
            n_states: 2,
            length: 5000,
            eta: COUPLING_ETA,
            adjacency: chain3(),
            vars,
            seed,
        }
    }

    /// The three-variable setup with shortened sojourn times.
    pub fn fast_switching(variant: u8, seed: u64) -> Result<Self> {
        let rows = fast_duration_rows(variant)?;
        let mut cfg = Self::three_variable(seed);
        for (var, row) in cfg.vars.iter_mut().zip(rows) {
            var.durations = row.to_vec();
        }
        Ok(cfg)
    }

    /// Ten variables with randomly drawn patterns, duration rows and
    /// Bernoulli(0.5) off-diagonal coupling, all fixed by `seed`.
    pub fn ten_variable(seed: u64) -> Self {
        let n = 10;
        let mut rng = stream(seed, "sim10.layout", &[]);
        let vars = (0..n)
            .map(|_| {
                let pattern = rng.random_range(1..=5u8);
                let row = rng.random_range(1..=10usize);
                benchmark_var(pattern, duration_row(row).expect("row")).expect("valid")
            })
            .collect();
        let adjacency = (0..n * n)
            .map(|k| k / n != k % n && rng.random_bool(0.5))
            .collect();
        Self {
            n_states: 2,
            length: 10_000,
            eta: COUPLING_ETA,
            adjacency,
            vars,
            seed,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        if n == 0 {
            return Err(config_err!("n_vars must be at least 1"));
        }
        if self.n_states == 0 {
            return Err(config_err!("n_states must be at least 1"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(config_err!("eta must be finite and nonnegative"));
        }
        if self.adjacency.len() != n * n {
            return Err(config_err!(
                "adjacency has {} entries, expected {}",
                self.adjacency.len(),
                n * n
            ));
        }
        if (0..n).any(|i| self.adjacency[i * n + i]) {
            return Err(config_err!("adjacency diagonal must be zero"));
        }
        let order = self.vars[0].ar_order();
        for (i, v) in self.vars.iter().enumerate() {
            let which = i + 1;
            if v.transition.n_states() != self.n_states {
                return Err(config_err!(
                    "var{} transition tensor has {} states, expected {}",
                    which,
                    v.transition.n_states(),
                    self.n_states
                ));
            }
            if v.durations.len() != self.n_states {
                return Err(config_err!("var{} needs one duration per state", which));
            }
            for d in &v.durations {
                d.validate()
                    .map_err(|e| config_err!("var{} duration: {}", which, e))?;
            }
            if v.ar.len() != self.n_states || v.ar.iter().any(|c| c.len() != order) {
                return Err(config_err!(
                    "var{} needs {} AR coefficients per state",
                    which,
                    order
                ));
            }
            if order == 0 {
                return Err(config_err!("AR order must be at least 1"));
            }
            if v.ar.iter().flatten().any(|c| !c.is_finite()) {
                return Err(config_err!("var{} AR coefficients must be finite", which));
            }
            if !(v.sigma >= 0.0 && v.sigma.is_finite()) {
                return Err(config_err!(
                    "var{} sigma must be finite and nonnegative",
                    which
                ));
            }
        }
        if self.length <= order {
            return Err(config_err!(
                "length {} must exceed the AR order {}",
                self.length,
                order
            ));
        }
        Ok(())
    }

    fn adjacency_row(&self, i: usize) -> &[bool] {
        let n = self.vars.len();
        &self.adjacency[i * n..(i + 1) * n]
    }
}

/// One sampled stay: `state` held on `start..start + len` (the last one may
/// run past the end of the sequence).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sojourn {
    pub start: usize,
    pub len: usize,
    pub state: usize,
}

pub struct Simulation {
    pub dataset: Dataset,
    /// Per variable, the sojourns covering `1..T`; step 0 is warm-up history.
    pub sojourns: Vec<Vec<Sojourn>>,
}

struct VarState {
    state_rng: StreamRng,
    noise_rng: StreamRng,
    remaining: usize,
}

/// Runs the simulator and keeps the sampled sojourns.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let n = cfg.n_vars();
    let m = cfg.n_states;
    let t_len = cfg.length;
    let mut states = vec![0usize; t_len * n];
    let mut values = vec![0.0f64; t_len * n];
    let mut sojourns: Vec<Vec<Sojourn>> = vec![Vec::new(); n];
    let mut runners: Vec<VarState> = (0..n as u64)
        .map(|i| VarState {
            state_rng: stream(cfg.seed, "sim.state", &[i]),
            noise_rng: stream(cfg.seed, "sim.noise", &[i]),
            remaining: 0,
        })
        .collect();

    for (i, run) in runners.iter_mut().enumerate() {
        for t in 0..t_len.min(2) {
            states[t * n + i] = run.state_rng.random_range(0..m);
        }
        if t_len > 1 {
            let s1 = states[n + i];
            let tau = cfg.vars[i].durations[s1].sample(&mut run.state_rng)?;
            sojourns[i].push(Sojourn {
                start: 1,
                len: tau,
                state: s1,
            });
            run.remaining = tau - 1;
        }
    }

    let mut prev = vec![0usize; n];
    for t in 2..t_len {
        prev.copy_from_slice(&states[(t - 1) * n..t * n]);
        for (i, run) in runners.iter_mut().enumerate() {
            let b = prev[i];
            if run.remaining > 0 {
                run.remaining -= 1;
                states[t * n + i] = b;
                continue;
            }
            let a = states[(t - 2) * n + i];
            let base = cfg.vars[i].transition.base_transition(a, b)?;
            let probs = coupled_transition(&base, &prev, cfg.adjacency_row(i), cfg.eta)?;
            let next = sample_index(&probs, &mut run.state_rng);
            let tau = cfg.vars[i].durations[next].sample(&mut run.state_rng)?;
            sojourns[i].push(Sojourn {
                start: t,
                len: tau,
                state: next,
            });
            run.remaining = tau - 1;
            states[t * n + i] = next;
        }
    }

    for (i, run) in runners.iter_mut().enumerate() {
        let var = &cfg.vars[i];
        let order = var.ar_order();
        let mut history: Vec<f64> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = if t < order {
                gaussian(var.sigma, &mut run.noise_rng)
            } else {
                let s = states[t * n + i];
                emit(
                    &var.ar[s],
                    &history[t - order..],
                    var.sigma,
                    &mut run.noise_rng,
                )
            };
            history.push(x);
            values[t * n + i] = x;
        }
    }

    let dataset = Dataset::new(Dataset::default_names(n), m, values, Some(states))?;
    Ok(Simulation { dataset, sojourns })
}

/// Generates a dataset; a pure function of the configuration and its seed.
pub fn generate(cfg: &SimConfig) -> Result<Dataset> {
    simulate(cfg).map(|s| s.dataset)
}

/// Inverse-CDF categorical draw.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn pattern_rows() {
        let p1 = TransitionTensor::pattern(1).unwrap();
        close(&p1.base_transition(0, 0).unwrap(), &[0.9, 0.1]);
        close(&p1.base_transition(1, 1).unwrap(), &[0.1, 0.9]);
        close(&p1.base_transition(0, 1).unwrap(), &[0.5, 0.5]);
        let p3 = TransitionTensor::pattern(3).unwrap();
        close(&p3.base_transition(0, 1).unwrap(), &[0.8, 0.2]);
        close(&p3.base_transition(1, 0).unwrap(), &[0.2, 0.8]);
        let p4 = TransitionTensor::pattern(4).unwrap();
        close(&p4.base_transition(1, 1).unwrap(), &[0.8, 0.2]);
        close(&p4.base_transition(1, 0).unwrap(), &[0.85, 0.15]);
        let p5 = TransitionTensor::pattern(5).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                close(&p5.base_transition(a, b).unwrap(), &[0.5, 0.5]);
            }
        }
        assert!(TransitionTensor::pattern(6).is_err());
    }

    #[test]
    fn uniform_tensor() {
        let t = TransitionTensor::uniform(3);
        for p in t.base_transition(2, 1).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_row_is_a_config_error() {
        let mut psi = vec![1.0; 8];
        psi[2] = 0.0;
        psi[3] = 0.0;
        assert!(TransitionTensor::new(2, psi).is_err());
    }

    #[test]
    fn coupling_examples() {
        let p = coupled_transition(&[0.9, 0.1], &[1], &[true], 0.2).unwrap();
        assert!((p[0] - 0.88051).abs() < 1e-4);
        assert!((p[1] - 0.11949).abs() < 1e-4);
        let q = coupled_transition(&[0.5, 0.5], &[0, 1, 0], &[true, false, true], 0.2).unwrap();
        let e = libm::exp(0.4);
        assert!((q[0] - e / (e + 1.0)).abs() < 1e-15);
        let same = coupled_transition(&[0.3, 0.7], &[1, 1], &[true, true], 0.0).unwrap();
        assert_eq!(same, vec![0.3, 0.7]);
        assert!(coupled_transition(&[0.5, 0.5], &[0], &[true, true], 0.2).is_err());
    }

    #[test]
    fn fixed_and_degenerate_durations() {
        let mut rng = stream(1, "t", &[]);
        for _ in 0..100 {
            assert_eq!(DurationDist::Fixed(200).sample(&mut rng).unwrap(), 200);
            assert_eq!(DurationDist::Geometric(1.0).sample(&mut rng).unwrap(), 1);
        }
        assert!(DurationDist::Geometric(0.0).sample(&mut rng).is_err());
        assert!(DurationDist::OnePlusPoisson(-1.0).validate().is_err());
        assert!(DurationDist::Fixed(0).validate().is_err());
    }

    #[test]
    fn noiseless_emissions() {
        let mut rng = stream(1, "t", &[]);
        assert_eq!(emit(&[1.0], &[2.5], 0.0, &mut rng), 2.5);
        assert_eq!(emit(&[-0.9], &[1.0], 0.0, &mut rng), -0.9);
        assert_eq!(emit(&[0.5, 0.25], &[4.0, 2.0], 0.0, &mut rng), 2.0);
    }

    #[test]
    fn presets_validate() {
        SimConfig::three_variable(1).validate().unwrap();
        SimConfig::fast_switching(1, 1).unwrap().validate().unwrap();
        SimConfig::fast_switching(2, 1).unwrap().validate().unwrap();
        let ten = SimConfig::ten_variable(3);
        ten.validate().unwrap();
        assert_eq!(ten.n_vars(), 10);
        assert!(SimConfig::fast_switching(3, 1).is_err());
        assert!(duration_row(11).is_err());
        assert_eq!(duration_row(6).unwrap(), duration_row(1).unwrap());
    }

    #[test]
    fn validation_catches_bad_diagonal() {
        let mut cfg = SimConfig::three_variable(1);
        cfg.adjacency[4] = true;
        assert!(cfg.validate().is_err());
    }
}
