//! End-to-end reproduction suites with one pass/fail line per criterion.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use statehawk_core::emission::{BaselineModel, DenModel};
use statehawk_core::hmm::{forward, viterbi, HmmParams};
use statehawk_core::nd::{grad_check, Matrix, ParamStore, Tape};
use statehawk_core::policy::{compute_gae, two_armed_bandit, Actor, EpisodeBuffer, PolicyNet, ValueNet};
use statehawk_core::rng::stream;
use statehawk_core::sim::{coupled_transition, generate, DurationDist, SimConfig};
use statehawk_core::stage1::{episodic_reward, immediate_reward, screen_samples, RewardConfig, ScreenConfig};
use statehawk_core::stage2::{Stage2Config, Stage2Policy};

use crate::dataset_io::write_dataset;
use crate::eval::{welch_t_test, MetricsReport};
use crate::pipeline::{score, AblationFlag, Prepared, TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] criterion {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

pub const SUITES: [&str; 14] = [
    "sim3", "ablations", "hmm", "fast1", "rewards", "screening", "gae", "gradcheck", "viterbi",
    "simulator", "welch", "bandit", "oracles", "all",
];

pub fn suite_criteria(name: &str) -> Result<Vec<u8>> {
    Ok(match name {
        "sim3" => vec![1, 3],
        "ablations" => vec![2],
        "hmm" => vec![3],
        "fast1" => vec![4],
        "rewards" => vec![5],
        "screening" => vec![6],
        "gae" => vec![7],
        "gradcheck" => vec![8],
        "viterbi" => vec![9],
        "simulator" => vec![10],
        "welch" => vec![11],
        "bandit" => vec![12],
        "oracles" => (5..=12).collect(),
        "all" => (1..=12).collect(),
        other => {
            return Err(Error::Argument(format!(
                "unknown suite `{other}` (known: {})",
                SUITES.join(", ")
            )))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Sim3,
    Fast1,
}

/// Scores of one training run on the test split.
#[derive(Clone, Debug)]
pub struct RunReports {
    pub staf: MetricsReport,
    pub stage1: MetricsReport,
    pub baseline: MetricsReport,
    pub hmm: MetricsReport,
}

type RunKey = (Scenario, u64, Vec<AblationFlag>);

/// Trainings shared between criteria, keyed by scenario, seed and ablations.
pub struct Runs {
    base: TrainConfig,
    cache: Mutex<HashMap<RunKey, Arc<RunReports>>>,
}

impl Runs {
    /// `base` supplies everything but the seed and ablations.
    pub fn new(base: TrainConfig) -> Self {
        Self {
            base,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base.seed
    }

    pub fn get(&self, scenario: Scenario, seed: u64, ablations: &[AblationFlag]) -> Result<Arc<RunReports>> {
        let key = (scenario, seed, ablations.to_vec());
        if let Some(r) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(r.clone());
        }
        let sim = match scenario {
            Scenario::Sim3 => SimConfig::three_variable(seed),
            Scenario::Fast1 => SimConfig::fast_switching(1, seed)?,
        };
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.ablations = ablations.to_vec();
        log::info!("training {scenario:?} seed {seed} variant {}", cfg.variant());
        let data = Prepared::new(generate(&sim)?, cfg.train_fraction)?;
        let trained = Trainer::new(cfg).run(&data)?;
        let t0 = trained.config.stage1.t0;
        let reports = Arc::new(RunReports {
            staf: score(&trained.final_output, &data, t0)?,
            stage1: score(&trained.stage1_output, &data, t0)?,
            baseline: score(&trained.baseline_output, &data, t0)?,
            hmm: score(&trained.hmm_output, &data, t0)?,
        });
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, reports.clone());
        Ok(reports)
    }
}

pub fn run_criterion(id: u8, runs: &Runs) -> Result<Check> {
    match id {
        1 => criterion_sim3(runs),
        2 => criterion_ablations(runs),
        3 => criterion_hmm(runs),
        4 => criterion_fast1(runs),
        5 => Ok(criterion_rewards()),
        6 => Ok(criterion_screening()),
        7 => Ok(criterion_gae()),
        8 => criterion_gradcheck(),
        9 => Ok(criterion_viterbi()),
        10 => criterion_simulator(),
        11 => criterion_welch(),
        12 => criterion_bandit(),
        other => Err(Error::Argument(format!("no criterion {other}"))),
    }
}

/// Runs every criterion of a suite; an error in one becomes a failed line.
pub fn run_suite(name: &str, runs: &Runs) -> Result<Vec<Check>> {
    Ok(suite_criteria(name)?
        .into_iter()
        .map(|id| {
            run_criterion(id, runs).unwrap_or_else(|e| Check {
                id,
                name: "error",
                passed: false,
                detail: e.to_string(),
            })
        })
        .collect())
}

fn check(id: u8, name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        id,
        name,
        passed,
        detail,
    }
}

fn criterion_sim3(runs: &Runs) -> Result<Check> {
    let r = runs.get(Scenario::Sim3, runs.base_seed(), &[])?;
    let (s, b) = (&r.staf.aggregate, &r.baseline.aggregate);
    let passed = s.accuracy >= 0.90
        && s.mae <= 0.13
        && s.mse <= 0.05
        && s.mae < b.mae
        && s.mse < b.mse;
    Ok(check(
        1,
        "sim3 reproduction",
        passed,
        format!(
            "acc {:.4} (>= 0.90), MAE {:.4} (<= 0.13), MSE {:.4} (<= 0.05); DL-F MAE {:.4} MSE {:.4}",
            s.accuracy, s.mae, s.mse, b.mae, b.mse
        ),
    ))
}

fn criterion_ablations(runs: &Runs) -> Result<Check> {
    let seeds: Vec<u64> = (0..3).map(|k| runs.base_seed() + k).collect();
    let (mut staf_acc, mut s1_acc, mut staf_mse, mut s1_mse) = (0.0, 0.0, 0.0, 0.0);
    let (mut drops, mut collapses) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        let d = runs.get(Scenario::Sim3, seed, &[])?;
        let nsss = runs.get(Scenario::Sim3, seed, &[AblationFlag::NoScreening])?;
        let ner = runs.get(Scenario::Sim3, seed, &[AblationFlag::NoEpisodic])?;
        staf_acc += d.staf.aggregate.accuracy / 3.0;
        s1_acc += d.stage1.aggregate.accuracy / 3.0;
        staf_mse += d.staf.aggregate.mse / 3.0;
        s1_mse += d.stage1.aggregate.mse / 3.0;
        drops.push(d.staf.aggregate.accuracy - nsss.staf.aggregate.accuracy);
        collapses.push(ner.staf.aggregate.f1);
    }
    let staf_ok = staf_acc >= s1_acc && staf_mse <= s1_mse;
    let nsss_ok = drops.iter().filter(|d| **d >= 0.10).count() >= 2;
    let ner_ok = collapses.iter().filter(|f| **f < 0.5).count() >= 2;
    Ok(check(
        2,
        "ablation directions",
        staf_ok && nsss_ok && ner_ok,
        format!(
            "STAF acc {staf_acc:.4} vs S1 {s1_acc:.4}, MSE {staf_mse:.4} vs {s1_mse:.4} [{}]; \
             NSSS drops {:?} [{}]; NER F1 {:?} [{}]",
            ok(staf_ok),
            rounded(&drops),
            ok(nsss_ok),
            rounded(&collapses),
            ok(ner_ok)
        ),
    ))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "miss"
    }
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn criterion_hmm(runs: &Runs) -> Result<Check> {
    let r = runs.get(Scenario::Sim3, runs.base_seed(), &[])?;
    let h = &r.hmm.aggregate;
    let passed = (0.45..=0.70).contains(&h.mae) && (0.65..=0.85).contains(&h.accuracy);
    Ok(check(
        3,
        "parallel HMM baseline",
        passed,
        format!(
            "MAE {:.4} in [0.45, 0.70], acc {:.4} in [0.65, 0.85]",
            h.mae, h.accuracy
        ),
    ))
}

fn criterion_fast1(runs: &Runs) -> Result<Check> {
    let r = runs.get(Scenario::Fast1, runs.base_seed(), &[])?;
    let s = &r.staf.aggregate;
    Ok(check(
        4,
        "fast-switching No. 1",
        s.accuracy >= 0.80 && s.mae <= 0.15,
        format!("acc {:.4} (>= 0.80), MAE {:.4} (<= 0.15)", s.accuracy, s.mae),
    ))
}

fn direct_immediate(eb: (f64, f64), ea: (f64, f64), c: usize, cfg: &RewardConfig) -> f64 {
    let gain = cfg.alpha * (eb.1 - ea.1) + (1.0 - cfg.alpha) * (eb.0 - ea.0);
    let pen = if (c as f64) < cfg.rho_c {
        cfg.lambda2 * (cfg.rho_c - c as f64) / (cfg.rho_c - 1.0)
    } else {
        0.0
    };
    cfg.lambda1 * gain - pen
}

fn criterion_rewards() -> Check {
    let cfg = RewardConfig::default();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let hand = [
        (
            immediate_reward(0.20, 0.30, 0.10, 0.10, 3, &cfg),
            4.0 * (0.5 * 0.2 + 0.5 * 0.1) - 0.015 * 5.0 / 7.0,
        ),
        (immediate_reward(0.3, 0.3, 0.3, 0.3, 1, &cfg), -0.015),
        (immediate_reward(0.3, 0.4, 0.3, 0.4, 8, &cfg), 0.0),
    ];
    for (k, (got, want)) in hand.iter().enumerate() {
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            failures.push(format!("hand case {k}: {got} vs {want}"));
        }
    }
    let errors = Matrix::from_vec(2, 2, vec![0.1, 0.1, 0.4, 0.2]).expect("2x2");
    match episodic_reward(&errors, &[0, 1], &cfg) {
        Ok(er) if (er.value + 0.25).abs() <= 1e-9 => worst = worst.max((er.value + 0.25).abs()),
        Ok(er) => failures.push(format!("episodic hand case {} vs -0.25", er.value)),
        Err(e) => failures.push(e.to_string()),
    }

    let mut rng = stream(5, "repro.rewards", &[]);
    for case in 0..10_000 {
        let cfg = RewardConfig {
            lambda1: rng.random_range(0.0..5.0),
            lambda2: rng.random_range(0.001..0.1),
            lambda3: rng.random_range(0.0..4.0),
            lambda4: rng.random_range(0.0..4.0),
            alpha: rng.random_range(0.0..=1.0),
            rho_c: rng.random_range(2..20) as f64,
            ..RewardConfig::default()
        };
        let eb = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let ea = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let c = rng.random_range(1..30usize);
        let r = immediate_reward(eb.0, eb.1, ea.0, ea.1, c, &cfg);
        let want = direct_immediate(eb, ea, c, &cfg);
        worst = worst.max((r - want).abs());
        if (r - want).abs() > 1e-9 {
            failures.push(format!("case {case}: oracle {r} vs {want}"));
        }
        let d = rng.random_range(0.0..1.0);
        let worse_t = immediate_reward(eb.0, eb.1, ea.0 + d, ea.1, c, &cfg);
        let worse_t1 = immediate_reward(eb.0, eb.1, ea.0, ea.1 + d, c, &cfg);
        if worse_t > r + 1e-12 || worse_t1 > r + 1e-12 {
            failures.push(format!("case {case}: reward rose with error"));
        }
        let pen = cfg.switch_penalty(c);
        if (pen == 0.0) != (c as f64 >= cfg.rho_c) {
            failures.push(format!("case {case}: penalty {pen} at c={c}, rho_c={}", cfg.rho_c));
        }
        if (cfg.switch_penalty(1) - cfg.lambda2).abs() > 1e-12 {
            failures.push(format!("case {case}: penalty at c=1 is not lambda2"));
        }

        let (te, m) = (rng.random_range(2..40usize), rng.random_range(2..5usize));
        let mut errs = Matrix::zeros(te, m);
        errs.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.0..3.0));
        let actions: Vec<usize> = (0..te).map(|_| rng.random_range(0..m)).collect();
        let base = match episodic_reward(&errs, &actions, &cfg) {
            Ok(e) => e.value,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        let mut perm: Vec<usize> = (0..m).collect();
        let mut order: Vec<usize> = (0..te).collect();
        shuffle(&mut perm, &mut rng);
        shuffle(&mut order, &mut rng);
        let mut relabeled = Matrix::zeros(te, m);
        let mut new_actions = vec![0; te];
        for (k, &t) in order.iter().enumerate() {
            for s in 0..m {
                relabeled.set(k, perm[s], errs.get(t, s));
            }
            new_actions[k] = perm[actions[t]];
        }
        match episodic_reward(&relabeled, &new_actions, &cfg) {
            Ok(e) if (e.value - base).abs() <= 1e-9 * (1.0 + base.abs()) => {}
            Ok(e) => failures.push(format!("case {case}: relabeled {} vs {base}", e.value)),
            Err(e) => failures.push(e.to_string()),
        }
    }
    check(
        5,
        "reward oracles",
        failures.is_empty(),
        summary(
            format!("hand cases and 1e4 property cases, max |diff| {worst:.2e}"),
            &failures,
        ),
    )
}

fn summary(ok_text: String, failures: &[String]) -> String {
    match failures.first() {
        None => ok_text,
        Some(f) => format!("{} failures, first: {f}", failures.len()),
    }
}

fn shuffle<T, R: Rng + ?Sized>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.random_range(0..=i));
    }
}

/// Straightforward rendition of the screening rules: explicit segments,
/// then per-segment filtering.
fn screen_oracle(actions: &[usize], scores: &[f64], cfg: &ScreenConfig) -> Vec<usize> {
    let n = actions.len();
    if !cfg.enabled {
        return (0..n).collect();
    }
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for t in 0..n {
        match segments.last_mut() {
            Some((_, end)) if actions[*end - 1] == actions[t] => *end = t + 1,
            _ => segments.push((t, t + 1)),
        }
    }
    let survivors: Vec<usize> = {
        let pos: Vec<usize> = (0..n).filter(|&t| scores[t] >= 0.0).collect();
        if pos.is_empty() {
            let mut ranked: Vec<(f64, usize)> = (0..n).map(|t| (scores[t], t)).collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut top: Vec<usize> = ranked.iter().take(cfg.k_sup).map(|p| p.1).collect();
            top.sort();
            top
        } else {
            pos
        }
    };
    for phi in [cfg.phi_h, cfg.phi_l] {
        let mut kept = Vec::new();
        for &(lo, hi) in &segments {
            if hi - lo > phi {
                kept.extend(survivors.iter().filter(|&&t| t >= lo && t < hi));
            }
        }
        if !kept.is_empty() {
            kept.sort();
            return kept;
        }
    }
    survivors
}

fn criterion_screening() -> Check {
    let mut rng = stream(6, "repro.screening", &[]);
    let mut failures = Vec::new();
    let mut kept_total = 0;
    for case in 0..10_000 {
        let n = rng.random_range(1..80usize);
        let m = rng.random_range(2..4usize);
        let stickiness: f64 = rng.random_range(0.0..1.0);
        let mut actions = vec![rng.random_range(0..m)];
        for t in 1..n {
            let prev = actions[t - 1];
            actions.push(if rng.random_bool(stickiness) {
                prev
            } else {
                rng.random_range(0..m)
            });
        }
        let neg_bias: f64 = rng.random_range(-1.0..1.0);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) + neg_bias).collect();
        let phi_l = rng.random_range(1..4usize);
        let cfg = ScreenConfig {
            k_sup: rng.random_range(1..40),
            phi_l,
            phi_h: phi_l + rng.random_range(1..10usize),
            enabled: rng.random_bool(0.95),
        };
        let got = screen_samples(&actions, &scores, &cfg);
        let want = screen_oracle(&actions, &scores, &cfg);
        kept_total += got.len();
        if got != want {
            failures.push(format!("case {case}: {got:?} vs {want:?}"));
        }
    }
    check(
        6,
        "screening oracle",
        failures.is_empty(),
        summary(
            format!("1e4 random instances agree ({kept_total} indices kept)"),
            &failures,
        ),
    )
}

/// Advantage as the λ-weighted mixture of n-step advantages.
fn gae_oracle(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut h = 0;
            let mut terminal = false;
            while t + h < n {
                h += 1;
                if dones[t + h - 1] {
                    terminal = true;
                    break;
                }
            }
            let tail = if terminal {
                0.0
            } else if t + h < n {
                values[t + h]
            } else {
                bootstrap
            };
            let n_step = |k: usize| {
                let ret: f64 = (0..k).map(|j| gamma.powi(j as i32) * rewards[t + j]).sum();
                let end = if k == h { tail } else { values[t + k] };
                ret + gamma.powi(k as i32) * end - values[t]
            };
            let mixed: f64 = (1..h)
                .map(|k| (1.0 - lambda) * lambda.powi(k as i32 - 1) * n_step(k))
                .sum();
            mixed + lambda.powi(h as i32 - 1) * n_step(h)
        })
        .collect()
}

fn criterion_gae() -> Check {
    let mut rng = stream(7, "repro.gae", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10usize);
        let gamma = rng.random_range(0.0..=1.0);
        let lambda = [0.0, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..3)];
        let mut buffer = EpisodeBuffer::new(1, 1);
        for t in 0..n {
            let done = t + 1 == n && rng.random_bool(0.5) || rng.random_bool(0.15);
            buffer
                .push(
                    &[0.0],
                    &[0],
                    0.0,
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    done,
                )
                .expect("fixed widths");
        }
        buffer.bootstrap = rng.random_range(-2.0..2.0);
        let (adv, targets) = compute_gae(&buffer, gamma, lambda);
        let want = gae_oracle(
            buffer.rewards(),
            buffer.values(),
            buffer.dones(),
            buffer.bootstrap,
            gamma,
            lambda,
        );
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs());
            worst = worst.max((targets[t] - want[t] - buffer.values()[t]).abs());
        }
    }
    check(
        7,
        "GAE oracle",
        worst < 1e-10,
        format!("1e3 buffers of length <= 10, max |diff| {worst:.2e} (< 1e-10)"),
    )
}

fn randomize<R: Rng + ?Sized>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    for (_, t) in store.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn criterion_gradcheck() -> Result<Check> {
    const POINTS: usize = 100;
    const TOL: f64 = 1e-5;
    let mut rng = stream(8, "repro.gradcheck", &[]);
    let mut lines = Vec::new();
    let mut passed = true;
    let mut tally = |name: &str, worst: f64, checked: usize, skipped: usize| {
        passed &= worst < TOL;
        lines.push(format!("{name} {worst:.1e} ({checked} coords, {skipped} kinks)"));
    };

    let den = DenModel::new(&mut rng, 3, 2, 8)?;
    let base = BaselineModel::new(&mut rng, 3, 8)?;
    for (name, net) in [("DEN", &den), ("baseline", &base.net)] {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for _ in 0..POINTS {
            let mut p = net.params.clone();
            randomize(&mut p, 0.8, &mut rng);
            let x = random_matrix(4, 3, &mut rng);
            let y = random_matrix(4, net.heads(), &mut rng);
            let r = grad_check(
                |tape: &mut Tape, p: &ParamStore| {
                    let xv = tape.constant(x.clone());
                    let out = net.forward(tape, p, xv)?;
                    let yv = tape.constant(y.clone());
                    let d = tape.sub(out, yv)?;
                    let sq = tape.square(d);
                    Ok(tape.sum(sq))
                },
                &p,
                TOL,
            )?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
        tally(name, worst, checked, skipped);
    }

    let policy = PolicyNet::new(&mut rng, 5, 8, 3)?;
    let value = ValueNet::new(&mut rng, 5, 8)?;
    let s2cfg = Stage2Config {
        t2: 1,
        features: 6,
        gat_heads: 2,
        ..Stage2Config::default()
    };
    let gat = Stage2Policy::new(&mut rng, 3, &s2cfg)?;
    for name in ["policy", "value", "ResGAT stack"] {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for _ in 0..POINTS {
            let r = match name {
                "policy" => {
                    let mut p = policy.params.clone();
                    randomize(&mut p, 0.8, &mut rng);
                    let obs = random_matrix(4, 5, &mut rng);
                    let w = random_matrix(4, 3, &mut rng);
                    grad_check(
                        |tape: &mut Tape, p: &ParamStore| {
                            let lp = policy.log_probs(tape, p, &obs)?;
                            let wv = tape.constant(w.clone());
                            let prod = tape.mul(lp, wv)?;
                            Ok(tape.sum(prod))
                        },
                        &p,
                        TOL,
                    )?
                }
                "value" => {
                    let mut p = value.params.clone();
                    randomize(&mut p, 0.8, &mut rng);
                    let obs = random_matrix(4, 5, &mut rng);
                    let y = random_matrix(4, 1, &mut rng);
                    grad_check(
                        |tape: &mut Tape, p: &ParamStore| {
                            let ov = tape.constant(obs.clone());
                            let v = value.forward(tape, p, ov)?;
                            let yv = tape.constant(y.clone());
                            let d = tape.sub(v, yv)?;
                            let sq = tape.square(d);
                            Ok(tape.sum(sq))
                        },
                        &p,
                        TOL,
                    )?
                }
                _ => {
                    let mut p = gat.params.clone();
                    randomize(&mut p, 0.8, &mut rng);
                    let obs = random_matrix(2, gat.obs_width(), &mut rng);
                    let w = random_matrix(2 * 3, 2, &mut rng);
                    grad_check(
                        |tape: &mut Tape, p: &ParamStore| {
                            let lp = gat.log_probs(tape, p, &obs)?;
                            let wv = tape.constant(w.clone());
                            let prod = tape.mul(lp, wv)?;
                            Ok(tape.sum(prod))
                        },
                        &p,
                        TOL,
                    )?
                }
            };
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
        tally(name, worst, checked, skipped);
    }
    Ok(check(
        8,
        "gradient checks",
        passed,
        format!("{POINTS} points each, max rel error: {}", lines.join("; ")),
    ))
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn random_hmm<R: Rng + ?Sized>(m: usize, rng: &mut R) -> HmmParams {
    let row = |rng: &mut R| {
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let initial = row(rng);
    let mut trans = Vec::new();
    for _ in 0..m {
        trans.extend(row(rng));
    }
    HmmParams {
        initial,
        transition: Matrix::from_vec(m, m, trans).expect("m x m"),
        means: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        variances: (0..m).map(|_| rng.random_range(0.2..2.0)).collect(),
    }
}

fn path_log_prob(p: &HmmParams, xs: &[f64], path: &[usize]) -> f64 {
    let mut lp = p.initial[path[0]].ln() + normal_density(xs[0], p.means[path[0]], p.variances[path[0]]).ln();
    for t in 1..xs.len() {
        lp += p.transition.get(path[t - 1], path[t]).ln()
            + normal_density(xs[t], p.means[path[t]], p.variances[path[t]]).ln();
    }
    lp
}

fn criterion_viterbi() -> Check {
    let mut rng = stream(9, "repro.viterbi", &[]);
    let mut failures = Vec::new();
    let (mut worst_path, mut worst_ll): (f64, f64) = (0.0, 0.0);
    for draw in 0..200 {
        let p = random_hmm(2, &mut rng);
        let len = rng.random_range(1..=12usize);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (mut best, mut total) = (f64::NEG_INFINITY, 0.0);
        for code in 0..1usize << len {
            let path: Vec<usize> = (0..len).map(|t| (code >> t) & 1).collect();
            let lp = path_log_prob(&p, &xs, &path);
            best = best.max(lp);
            total += lp.exp();
        }
        let got = path_log_prob(&p, &xs, &viterbi(&p, &xs));
        worst_path = worst_path.max((got - best).abs());
        if (got - best).abs() > 1e-9 {
            failures.push(format!("draw {draw}: viterbi {got} vs best {best}"));
        }
        let ll = forward(&p, &xs).log_likelihood;
        worst_ll = worst_ll.max((ll - total.ln()).abs());
        if (ll - total.ln()).abs() > 1e-8 {
            failures.push(format!("draw {draw}: forward {ll} vs paths {}", total.ln()));
        }
    }
    for draw in 0..200 {
        let m = rng.random_range(2..4usize);
        let p = random_hmm(m, &mut rng);
        let len = rng.random_range(1..=50usize);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut alpha: Vec<f64> = (0..m)
            .map(|s| p.initial[s] * normal_density(xs[0], p.means[s], p.variances[s]))
            .collect();
        for &x in &xs[1..] {
            alpha = (0..m)
                .map(|j| {
                    let inflow: f64 = (0..m).map(|i| alpha[i] * p.transition.get(i, j)).sum();
                    inflow * normal_density(x, p.means[j], p.variances[j])
                })
                .collect();
        }
        let direct = alpha.iter().sum::<f64>().ln();
        let ll = forward(&p, &xs).log_likelihood;
        worst_ll = worst_ll.max((ll - direct).abs());
        if (ll - direct).abs() > 1e-8 {
            failures.push(format!("long draw {draw}: forward {ll} vs direct {direct}"));
        }
    }
    check(
        9,
        "Viterbi and forward oracles",
        failures.is_empty(),
        summary(
            format!(
                "200 exhaustive draws (T <= 12) and 200 direct draws (T <= 50); max path gap {worst_path:.1e}, max log-likelihood gap {worst_ll:.1e}"
            ),
            &failures,
        ),
    )
}

fn criterion_simulator() -> Result<Check> {
    const DRAWS: usize = 100_000;
    let mut failures = Vec::new();
    let mut rng = stream(10, "repro.durations", &[]);
    let dists = [
        DurationDist::Geometric(0.01),
        DurationDist::Geometric(0.3),
        DurationDist::OnePlusPoisson(250.0),
        DurationDist::OnePlusPoisson(2.0),
    ];
    let mut zs = Vec::new();
    for d in dists {
        let mut total = 0usize;
        for _ in 0..DRAWS {
            total += d.sample(&mut rng)?;
        }
        let mean = total as f64 / DRAWS as f64;
        let z = (mean - d.mean()) / (d.variance() / DRAWS as f64).sqrt();
        zs.push((z * 100.0).round() / 100.0);
        if z.abs() >= 3.0 {
            failures.push(format!("{d:?}: mean {mean} is {z:.2} SE from {}", d.mean()));
        }
    }
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.0..1.0);
        let base = [p, 1.0 - p];
        let nb = [rng.random_range(0..2usize), rng.random_range(0..2usize)];
        let out = coupled_transition(&base, &nb, &[true, true], 0.0)?;
        if out != base {
            failures.push(format!("eta = 0 changed {base:?} into {out:?}"));
            break;
        }
    }
    let bytes = |seed| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &generate(&SimConfig::three_variable(seed))?)?;
        Ok(buf)
    };
    let (a, b) = (bytes(3)?, bytes(3)?);
    if a != b {
        failures.push("repeated seeded runs differ".into());
    }
    Ok(check(
        10,
        "simulator statistics",
        failures.is_empty(),
        summary(
            format!(
                "duration z-scores {zs:?} (|z| < 3, 1e5 draws); eta = 0 identity exact; seeded CSV byte-identical ({} bytes)",
                a.len()
            ),
            &failures,
        ),
    ))
}

fn criterion_welch() -> Result<Check> {
    let w = welch_t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0])?;
    let same = welch_t_test(&[2.0, 3.0, 5.0], &[2.0, 3.0, 5.0])?;
    let passed = (w.t + 3.674).abs() < 1e-3
        && (w.dof - 4.0).abs() < 1e-3
        && (w.p - 0.0213).abs() < 1e-3
        && same.p == 1.0;
    Ok(check(
        11,
        "Welch t-test",
        passed,
        format!(
            "t {:.4}, dof {:.4}, p {:.4}; identical groups p {}",
            w.t, w.dof, w.p, same.p
        ),
    ))
}

fn criterion_bandit() -> Result<Check> {
    let mut finals = Vec::new();
    for seed in 0..5 {
        let curve = two_armed_bandit(seed, 200, 64)?;
        finals.push(curve.iter().copied().fold(0.0, f64::max));
    }
    let wins = finals.iter().filter(|p| **p > 0.95).count();
    Ok(check(
        12,
        "PPO bandit",
        wins == 5,
        format!(
            "peak better-arm probability within 200 updates {:?}, {wins}/5 above 0.95",
            rounded(&finals)
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_resolve() {
        for s in SUITES {
            assert!(!suite_criteria(s).unwrap().is_empty());
        }
        assert_eq!(suite_criteria("all").unwrap().len(), 12);
        assert!(suite_criteria("nope").is_err());
    }

    #[test]
    fn gae_oracle_hand_case() {
        // one step, terminal: A = r − V
        let a = gae_oracle(&[1.0], &[0.25], &[true], 9.0, 0.9, 0.5);
        assert!((a[0] - 0.75).abs() < 1e-12);
        // λ = 1, no terminal: discounted return to bootstrap minus value
        let a = gae_oracle(&[1.0, 2.0], &[0.5, 0.5], &[false, false], 4.0, 0.5, 1.0);
        assert!((a[0] - (1.0 + 0.5 * 2.0 + 0.25 * 4.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn screen_oracle_examples() {
        let cfg = ScreenConfig::default();
        let mut actions = vec![0; 3];
        actions.extend(vec![1; 9]);
        actions.extend(vec![0; 2]);
        let scores = vec![0.5; 14];
        assert_eq!(screen_oracle(&actions, &scores, &cfg), (3..12).collect::<Vec<_>>());
        let neg = vec![-1.0; 100];
        assert_eq!(screen_oracle(&[0; 100], &neg, &cfg).len(), 32);
    }

    #[test]
    fn oracle_criteria_pass() {
        for c in [criterion_rewards(), criterion_screening(), criterion_gae(), criterion_viterbi()] {
            assert!(c.passed, "{c}");
        }
        for c in [criterion_simulator(), criterion_welch(), criterion_bandit()] {
            let c = c.unwrap();
            assert!(c.passed, "{c}");
        }
    }
}
