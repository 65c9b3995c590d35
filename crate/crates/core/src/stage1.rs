//! Stage one: independent per-variable training of a hard state estimator
//! and its multi-head emission network.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::emission::{history_matrix, train_screened_with, DenModel, FitConfig, ScreenedSample};
use crate::error::{arg_err, config_err, Result};
use crate::nd::{AdamConfig, AdamState, Matrix, ParamStore};
use crate::policy::{
    hard_decode, ppo_update, sample_action, EpisodeBuffer, PolicyNet, PpoConfig, PpoOptimizers,
    PpoStats, ValueNet,
};

/// Reward-term switches used by the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RewardAblation {
    pub no_switch_penalty: bool,
    pub no_baseline: bool,
    pub no_state_separation: bool,
    pub no_pairwise: bool,
    pub no_episodic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub alpha: f64,
    pub rho_c: f64,
    pub ablation: RewardAblation,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 4.0,
            lambda2: 0.015,
            lambda3: 2.0,
            lambda4: 2.0,
            alpha: 0.5,
            rho_c: 8.0,
            ablation: RewardAblation::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.rho_c >= 2.0) {
            return Err(config_err!("rho_c must be at least 2, got {}", self.rho_c));
        }
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(config_err!(
                "reward weights must be nonnegative: {:?}",
                lambdas
            ));
        }
        Ok(())
    }

    /// Switching penalty for a run of `c` identical actions.
    pub fn switch_penalty(&self, c: usize) -> f64 {
        if self.ablation.no_switch_penalty {
            return 0.0;
        }
        self.lambda2 * (self.rho_c - c as f64).max(0.0) / (self.rho_c - 1.0)
    }
}

/// Per-step reward: prediction gain over the baseline minus the switching
/// penalty.
pub fn immediate_reward(
    e_base_t: f64,
    e_base_t1: f64,
    e_a_t: f64,
    e_a_t1: f64,
    c: usize,
    cfg: &RewardConfig,
) -> f64 {
    let (b0, b1) = if cfg.ablation.no_baseline {
        (0.0, 0.0)
    } else {
        (e_base_t, e_base_t1)
    };
    let gain = cfg.alpha * (b1 - e_a_t1) + (1.0 - cfg.alpha) * (b0 - e_a_t);
    cfg.lambda1 * gain - cfg.switch_penalty(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicReward {
    pub value: f64,
    /// Mean error of each head on the steps that selected it.
    pub selected: Vec<f64>,
    /// Mean error of each head on the steps that did not select it.
    pub unselected: Vec<f64>,
    /// Heads that were never or always selected; their missing mean is 0.
    pub degenerate: Vec<usize>,
}

/// End-of-episode reward from per-head errors (`T x m`) and actions.
pub fn episodic_reward(
    errors: &Matrix,
    actions: &[usize],
    cfg: &RewardConfig,
) -> Result<EpisodicReward> {
    let m = errors.cols();
    if errors.rows() != actions.len() || m == 0 {
        return Err(arg_err!(
            "{} error rows for {} actions",
            errors.rows(),
            actions.len()
        ));
    }
    if let Some(a) = actions.iter().find(|a| **a >= m) {
        return Err(arg_err!("action {} outside 1..={}", a + 1, m));
    }
    let mut sel_sum = vec![0.0; m];
    let mut sel_n = vec![0usize; m];
    let mut un_sum = vec![0.0; m];
    for (t, &a) in actions.iter().enumerate() {
        for s in 0..m {
            if s == a {
                sel_sum[s] += errors.get(t, s);
                sel_n[s] += 1;
            } else {
                un_sum[s] += errors.get(t, s);
            }
        }
    }
    let n = actions.len();
    let mut degenerate = Vec::new();
    let mut selected = vec![0.0; m];
    let mut unselected = vec![0.0; m];
    for s in 0..m {
        if sel_n[s] == 0 || sel_n[s] == n {
            degenerate.push(s);
        }
        if sel_n[s] > 0 {
            selected[s] = sel_sum[s] / sel_n[s] as f64;
        }
        if sel_n[s] < n {
            unselected[s] = un_sum[s] / (n - sel_n[s]) as f64;
        }
    }
    let mut value = 0.0;
    if !cfg.ablation.no_state_separation {
        for s in 0..m {
            let delta = unselected[s] - selected[s];
            value += delta.max(0.0) + cfg.lambda3 * delta.min(0.0) - selected[s] / m as f64;
        }
    }
    if !cfg.ablation.no_pairwise {
        let mut spread = 0.0;
        for p in 0..m {
            for q in 0..m {
                spread += (selected[p] - selected[q]).abs();
            }
        }
        value -= cfg.lambda4 * 0.5 * spread;
    }
    Ok(EpisodicReward {
        value,
        selected,
        unselected,
        degenerate,
    })
}

/// Margin by which the selected head beats the best other head.
pub fn confidence_score(errors: &[f64], action: usize) -> Result<f64> {
    if errors.len() < 2 || action >= errors.len() {
        return Err(arg_err!(
            "confidence score needs at least two heads and a valid action ({} of {})",
            action + 1,
            errors.len()
        ));
    }
    let best_other = errors
        .iter()
        .enumerate()
        .filter(|(s, _)| *s != action)
        .map(|(_, e)| *e)
        .fold(f64::INFINITY, f64::min);
    Ok(best_other - errors[action])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenConfig {
    pub k_sup: usize,
    pub phi_h: usize,
    pub phi_l: usize,
    /// Off keeps every sample.
    pub enabled: bool,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            k_sup: 32,
            phi_h: 8,
            phi_l: 2,
            enabled: true,
        }
    }
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi_h > self.phi_l && self.phi_l >= 1 && self.k_sup >= 1) {
            return Err(config_err!(
                "screening needs phi_h > phi_l >= 1 and k_sup >= 1 (got {}, {}, {})",
                self.phi_h,
                self.phi_l,
                self.k_sup
            ));
        }
        Ok(())
    }
}

/// Length of the run of identical actions containing each step.
pub fn run_lengths(actions: &[usize]) -> Vec<usize> {
    let mut out = vec![0; actions.len()];
    let mut start = 0;
    for t in 1..=actions.len() {
        if t == actions.len() || actions[t] != actions[start] {
            out[start..t].iter_mut().for_each(|v| *v = t - start);
            start = t;
        }
    }
    out
}

/// Indices of the samples kept for emission-network training.
pub fn screen_samples(actions: &[usize], scores: &[f64], cfg: &ScreenConfig) -> Vec<usize> {
    let n = actions.len().min(scores.len());
    if !cfg.enabled {
        return (0..n).collect();
    }
    let mut kept: Vec<usize> = (0..n).filter(|&t| scores[t] >= 0.0).collect();
    if kept.is_empty() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(cfg.k_sup);
        order.sort_unstable();
        kept = order;
    }
    let runs = run_lengths(&actions[..n]);
    for threshold in [cfg.phi_h, cfg.phi_l] {
        let long: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&t| runs[t] > threshold)
            .collect();
        if !long.is_empty() {
            return long;
        }
    }
    kept
}

/// Length of the current run of identical actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunLengthTracker {
    last: Option<usize>,
    len: usize,
}

impl RunLengthTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an action and returns the updated run length (at least 1).
    pub fn push(&mut self, action: usize) -> usize {
        if self.last == Some(action) {
            self.len += 1;
        } else {
            self.last = Some(action);
            self.len = 1;
        }
        self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flattens `[history ‖ prob_history ‖ error_history]`.
pub fn build_observation(
    history: &[f64],
    prob_history: &Matrix,
    error_history: &Matrix,
) -> Result<Vec<f64>> {
    if prob_history.shape() != error_history.shape() {
        return Err(arg_err!(
            "probability history {:?} and error history {:?} differ in shape",
            prob_history.shape(),
            error_history.shape()
        ));
    }
    let mut out = Vec::with_capacity(history.len() + 2 * prob_history.len());
    out.extend_from_slice(history);
    out.extend_from_slice(prob_history.data());
    out.extend_from_slice(error_history.data());
    Ok(out)
}

pub fn observation_width(t0: usize, t1: usize, m: usize) -> usize {
    t0 + 2 * t1 * m
}

/// Standardized series of one variable plus its frozen baseline errors.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesContext {
    pub z: Vec<f64>,
    pub t0: usize,
    /// Exclusive end of the training split.
    pub train_end: usize,
    /// `e_base_t` for every `t ≥ t0` (entries before `t0` are 0).
    pub base_errors: Vec<f64>,
}

impl SeriesContext {
    /// `base_predictions[t]` is the baseline's prediction of `z[t]`.
    pub fn new(
        z: Vec<f64>,
        t0: usize,
        train_end: usize,
        base_predictions: &[f64],
        e_clip: f64,
    ) -> Result<Self> {
        if base_predictions.len() != z.len() || train_end > z.len() || t0 == 0 {
            return Err(arg_err!(
                "series of length {} with {} baseline predictions, split {}",
                z.len(),
                base_predictions.len(),
                train_end
            ));
        }
        let base_errors = (0..z.len())
            .map(|t| {
                if t < t0 {
                    0.0
                } else {
                    clip_error(base_predictions[t] - z[t], e_clip)
                }
            })
            .collect();
        Ok(Self {
            z,
            t0,
            train_end,
            base_errors,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Model input `H_t`.
    pub fn history(&self, t: usize) -> &[f64] {
        &self.z[t + 1 - self.t0..=t]
    }
}

pub fn clip_error(diff: f64, e_clip: f64) -> f64 {
    (diff * diff).min(e_clip)
}

/// Per-head errors `e_t` for `t` in `steps` (each `t ≥ t0`), `len x m`.
pub fn head_error_matrix(
    ctx: &SeriesContext,
    den: &DenModel,
    steps: core::ops::Range<usize>,
    e_clip: f64,
) -> Result<Matrix> {
    if steps.start < ctx.t0 {
        return Err(arg_err!("errors need t >= {}", ctx.t0));
    }
    let inputs = history_matrix(&ctx.z, ctx.t0, steps.start - 1..steps.end - 1)?;
    let mut preds = den.predict_batch(&inputs)?;
    for (r, t) in steps.enumerate() {
        for v in preds.row_mut(r) {
            *v = clip_error(*v - ctx.z[t], e_clip);
        }
    }
    Ok(preds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Config {
    pub n_states: usize,
    pub t0: usize,
    pub t1: usize,
    pub episode_len: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub e_clip: f64,
    pub tau: f64,
    pub den_fit: FitConfig,
    pub den_lr: f64,
    pub reward: RewardConfig,
    pub screen: ScreenConfig,
    pub ppo: PpoConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            n_states: 2,
            t0: 1,
            t1: 4,
            episode_len: 2000,
            epochs: 150,
            hidden: 64,
            e_clip: 10.0,
            tau: 0.01,
            den_fit: FitConfig {
                steps: 32,
                batch: 256,
            },
            den_lr: 1e-3,
            reward: RewardConfig::default(),
            screen: ScreenConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(config_err!("stage one needs at least two states"));
        }
        if self.t0 == 0 || self.t1 == 0 || self.episode_len == 0 || self.hidden == 0 {
            return Err(config_err!(
                "t0, t1, episode length and hidden width must be positive"
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_err!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.e_clip > 0.0 && self.den_lr > 0.0) {
            return Err(config_err!("e_clip and den_lr must be positive"));
        }
        if self.den_fit.batch == 0 {
            return Err(config_err!("emission minibatch must be positive"));
        }
        self.reward.validate()?;
        self.screen.validate()?;
        self.ppo.validate()
    }

    pub fn obs_width(&self) -> usize {
        observation_width(self.t0, self.t1, self.n_states)
    }
}

/// Everything stage one learns for one variable.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableAgent {
    /// Emission network used for decisions, rewards and forecasts.
    pub den: DenModel,
    /// Parameters trained directly on screened samples; `den` follows them
    /// by soft updates.
    pub online: ParamStore,
    pub den_adam: AdamState,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub opt: PpoOptimizers,
}

impl VariableAgent {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &Stage1Config) -> Result<Self> {
        let den = DenModel::new(rng, cfg.t0, cfg.n_states, cfg.hidden)?;
        let policy = PolicyNet::new(rng, cfg.obs_width(), cfg.hidden, cfg.n_states)?;
        let value = ValueNet::new(rng, cfg.obs_width(), cfg.hidden)?;
        Ok(Self {
            online: den.params.clone(),
            den,
            den_adam: AdamState::new(AdamConfig::with_lr(cfg.den_lr)),
            policy,
            value,
            opt: PpoOptimizers::new(&cfg.ppo),
        })
    }
}

/// Rolling `T1 x m` histories of probabilities and errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    probs: VecDeque<Vec<f64>>,
    errors: VecDeque<Vec<f64>>,
    m: usize,
}

impl ObservationWindow {
    /// Empty rows are zero-filled.
    pub fn new(t1: usize, m: usize) -> Self {
        Self {
            probs: (0..t1).map(|_| vec![0.0; m]).collect(),
            errors: (0..t1).map(|_| vec![0.0; m]).collect(),
            m,
        }
    }

    pub fn push_probs(&mut self, p: &[f64]) {
        self.probs.pop_front();
        self.probs.push_back(p.to_vec());
    }

    pub fn push_errors(&mut self, e: &[f64]) {
        self.errors.pop_front();
        self.errors.push_back(e.to_vec());
    }

    pub fn observation(&self, history: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(history.len() + 2 * self.probs.len() * self.m);
        out.extend_from_slice(history);
        self.probs.iter().for_each(|r| out.extend_from_slice(r));
        self.errors.iter().for_each(|r| out.extend_from_slice(r));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub start: usize,
    pub buffer: EpisodeBuffer,
    pub actions: Vec<usize>,
    pub scores: Vec<f64>,
    pub samples: Vec<ScreenedSample>,
    /// Per-head errors of the episode steps, `T_E x m`.
    pub errors: Matrix,
    pub immediate: Vec<f64>,
    pub episodic: EpisodicReward,
}

/// Errors for `[start − T1 + 1, end]`, aligned so row `k` is step
/// `start − T1 + 1 + k`; steps before `t0` are zero rows.
fn episode_errors(
    ctx: &SeriesContext,
    den: &DenModel,
    cfg: &Stage1Config,
    start: usize,
    end: usize,
) -> Result<(Matrix, usize)> {
    let first = (start + 1).saturating_sub(cfg.t1);
    let lo = first.max(ctx.t0);
    let computed = head_error_matrix(ctx, den, lo..end + 1, cfg.e_clip)?;
    let mut out = Matrix::zeros(end + 1 - first, cfg.n_states);
    for r in 0..computed.rows() {
        out.row_mut(r + lo - first).copy_from_slice(computed.row(r));
    }
    Ok((out, first))
}

/// Rolls the policy over `T_E` steps from `start`.
///
/// Step `t` sees `H_t` and the errors up to `e_t`, chooses `a_t` as the
/// estimate of `s_t` and is rewarded on `e_t` and `e_{t+1}`.
pub fn run_episode<R: Rng + ?Sized>(
    ctx: &SeriesContext,
    agent: &VariableAgent,
    cfg: &Stage1Config,
    start: usize,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let te = cfg.episode_len;
    if start < ctx.t0 || start + te >= ctx.len() {
        return Err(config_err!(
            "episode [{}, {}] does not fit a series of length {} with t0={}",
            start,
            start + te,
            ctx.len(),
            ctx.t0
        ));
    }
    let m = cfg.n_states;
    let (errors, first) = episode_errors(ctx, &agent.den, cfg, start, start + te)?;
    let mut window = ObservationWindow::new(cfg.t1, m);
    for t in first..start {
        window.push_errors(errors.row(t - first));
    }
    let mut buffer = EpisodeBuffer::new(cfg.obs_width(), 1);
    let mut actions = Vec::with_capacity(te);
    let mut scores = Vec::with_capacity(te);
    let mut samples = Vec::with_capacity(te);
    let mut immediate = Vec::with_capacity(te);
    let mut ep_errors = Matrix::zeros(te, m);
    let mut runs = RunLengthTracker::new();
    for (k, t) in (start..start + te).enumerate() {
        let e_t = errors.row(t - first);
        window.push_errors(e_t);
        let obs = window.observation(ctx.history(t));
        let probs = agent.policy.distribution(&obs)?;
        let value = agent.value.value(&obs)?;
        let (a, log_prob) = sample_action(&probs, rng)?;
        let c = runs.push(a);
        let e_t1 = errors.row(t + 1 - first);
        let r = immediate_reward(
            ctx.base_errors[t],
            ctx.base_errors[t + 1],
            e_t[a],
            e_t1[a],
            c,
            &cfg.reward,
        );
        buffer.push(&obs, &[a], log_prob, value, r, k + 1 == te)?;
        scores.push(confidence_score(e_t, a)?);
        samples.push(ScreenedSample {
            input: ctx.history(t - 1).to_vec(),
            head: a,
            target: ctx.z[t],
        });
        ep_errors.row_mut(k).copy_from_slice(e_t);
        actions.push(a);
        immediate.push(r);
        window.push_probs(&probs);
    }
    let episodic = episodic_reward(&ep_errors, &actions, &cfg.reward)?;
    if !cfg.reward.ablation.no_episodic {
        if let Some(last) = buffer.rewards_mut().last_mut() {
            *last += episodic.value;
        }
    }
    Ok(EpisodeOutcome {
        start,
        buffer,
        actions,
        scores,
        samples,
        errors: ep_errors,
        immediate,
        episodic,
    })
}

/// One record per (epoch, variable).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub var: usize,
    pub mean_reward: f64,
    pub episodic_reward: f64,
    pub screened_count: usize,
    pub den_loss: f64,
    pub policy_entropy: f64,
    pub ppo: PpoStats,
}

/// Uniform episode start leaving room for `T_E + 1` steps in the train split.
pub fn sample_start<R: Rng + ?Sized>(
    ctx: &SeriesContext,
    episode_len: usize,
    rng: &mut R,
) -> Result<usize> {
    let lo = ctx.t0;
    if ctx.train_end < lo + episode_len + 1 {
        return Err(config_err!(
            "training split of {} steps is too short for episodes of {} with t0={}",
            ctx.train_end,
            episode_len,
            ctx.t0
        ));
    }
    let hi = ctx.train_end - episode_len - 1;
    Ok(rng.random_range(lo..=hi))
}

/// Fits the online emission parameters to screened samples. After every
/// optimizer step the decision copy moves toward them by `tau`. Returns the
/// post-fit loss (`NaN` when there was nothing to fit).
pub fn refine_den<R: Rng + ?Sized>(
    agent: &mut VariableAgent,
    samples: &[ScreenedSample],
    fit: FitConfig,
    tau: f64,
    rng: &mut R,
) -> Result<f64> {
    let online = agent.den.with_params(agent.online.clone())?;
    let target = &mut agent.den.params;
    let fitted = train_screened_with(&online, samples, fit, &mut agent.den_adam, rng, |p| {
        target.soft_update(p, tau)
    })?;
    match fitted {
        Some(f) => {
            agent.online = f.params;
            Ok(f.loss_after)
        }
        None => Ok(f64::NAN),
    }
}

/// The episode samples that survive screening.
pub fn screened(ep: &EpisodeOutcome, cfg: &ScreenConfig) -> Vec<ScreenedSample> {
    screen_samples(&ep.actions, &ep.scores, cfg)
        .into_iter()
        .map(|k| ep.samples[k].clone())
        .collect()
}

/// One stage-one epoch for one variable.
pub fn train_epoch<R: Rng + ?Sized>(
    ctx: &SeriesContext,
    agent: &mut VariableAgent,
    cfg: &Stage1Config,
    epoch: usize,
    var: usize,
    rng: &mut R,
) -> Result<EpochLog> {
    let start = sample_start(ctx, cfg.episode_len, rng)?;
    let ep = run_episode(ctx, agent, cfg, start, rng)?;
    let kept = screened(&ep, &cfg.screen);
    let den_loss = refine_den(agent, &kept, cfg.den_fit, cfg.tau, rng)?;
    let ppo = ppo_update(
        &mut agent.policy,
        &mut agent.value,
        &ep.buffer,
        &cfg.ppo,
        &mut agent.opt,
        rng,
    )?;
    Ok(EpochLog {
        epoch,
        var,
        mean_reward: ep.immediate.iter().sum::<f64>() / ep.immediate.len() as f64,
        episodic_reward: ep.episodic.value,
        screened_count: kept.len(),
        den_loss,
        policy_entropy: ppo.entropy,
        ppo,
    })
}

/// Greedy decode over a whole series.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Estimated state per step; steps before `t0` copy the first estimate.
    pub states: Vec<usize>,
    /// Stage-one probabilities per step (rows before `t0` are uniform).
    pub probs: Matrix,
    /// Per-head errors per step (rows before `t0` are zero).
    pub errors: Matrix,
    /// Standardized forecast of `z[t]` from step `t − 1`; `NaN` before `t0 + 1`.
    pub forecasts: Vec<f64>,
}

/// Runs the policy with hard decoding from `t0` to the end of the series.
pub fn decode(
    ctx: &SeriesContext,
    den: &DenModel,
    policy: &PolicyNet,
    cfg: &Stage1Config,
) -> Result<Decoded> {
    let n = ctx.len();
    let m = cfg.n_states;
    if n <= ctx.t0 {
        return Err(arg_err!("series of length {} is too short to decode", n));
    }
    let mut errors = Matrix::zeros(n, m);
    let computed = head_error_matrix(ctx, den, ctx.t0..n, cfg.e_clip)?;
    for r in 0..computed.rows() {
        errors.row_mut(r + ctx.t0).copy_from_slice(computed.row(r));
    }
    let heads = den.predict_batch(&history_matrix(&ctx.z, ctx.t0, ctx.t0 - 1..n)?)?;
    let mut probs = Matrix::filled(n, m, 1.0 / m as f64);
    let mut states = vec![0; n];
    let mut forecasts = vec![f64::NAN; n];
    let mut window = ObservationWindow::new(cfg.t1, m);
    for t in ctx.t0..n {
        window.push_errors(errors.row(t));
        let p = policy.distribution(&window.observation(ctx.history(t)))?;
        let a = hard_decode(&p);
        states[t] = a;
        probs.row_mut(t).copy_from_slice(&p);
        if t + 1 < n {
            forecasts[t + 1] = heads.get(t + 1 - ctx.t0, a);
        }
        window.push_probs(&p);
    }
    let first = states[ctx.t0];
    states[..ctx.t0].iter_mut().for_each(|s| *s = first);
    Ok(Decoded {
        states,
        probs,
        errors,
        forecasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn immediate_reward_hand_cases() {
        let cfg = RewardConfig::default();
        assert!(close(
            immediate_reward(0.20, 0.30, 0.10, 0.10, 3, &cfg),
            0.60 - 0.015 * 5.0 / 7.0
        ));
        assert!(close(immediate_reward(0.4, 0.4, 0.4, 0.4, 1, &cfg), -0.015));
        assert_eq!(immediate_reward(0.4, 0.3, 0.4, 0.3, 8, &cfg), 0.0);
        let nb = RewardConfig {
            ablation: RewardAblation {
                no_baseline: true,
                ..Default::default()
            },
            ..cfg
        };
        assert!(close(immediate_reward(9.0, 9.0, 0.1, 0.3, 8, &nb), -0.8));
    }

    #[test]
    fn episodic_reward_hand_case() {
        // head 1 selected at t=0 (0.1) and unselected at t=1 (0.4);
        // head 2 selected at t=1 (0.2) and unselected at t=0 (0.1)
        let errors = Matrix::from_vec(2, 2, vec![0.1, 0.1, 0.4, 0.2]).unwrap();
        let r = episodic_reward(&errors, &[0, 1], &RewardConfig::default()).unwrap();
        assert!(close(r.value, -0.25), "{}", r.value);
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn episodic_reward_degenerate_heads() {
        let errors = Matrix::from_vec(2, 2, vec![0.3, 0.5, 0.3, 0.5]).unwrap();
        let r = episodic_reward(&errors, &[0, 0], &RewardConfig::default()).unwrap();
        assert_eq!(r.degenerate, vec![0, 1]);
        assert_eq!(r.selected, vec![0.3, 0.0]);
        assert_eq!(r.unselected, vec![0.0, 0.5]);
    }

    #[test]
    fn confidence_cases() {
        assert!(close(confidence_score(&[0.5, 0.2], 1).unwrap(), 0.3));
        assert!(close(confidence_score(&[0.2, 0.5], 1).unwrap(), -0.3));
        assert_eq!(confidence_score(&[0.4, 0.4, 0.4], 2).unwrap(), 0.0);
        assert!(confidence_score(&[0.4], 0).is_err());
    }

    #[test]
    fn screening_cases() {
        let cfg = ScreenConfig::default();
        let long = vec![1; 20];
        assert_eq!(
            screen_samples(&long, &[0.5; 20], &cfg),
            (0..20).collect::<Vec<_>>()
        );
        let neg: Vec<f64> = (0..50).map(|k| -1.0 - k as f64).collect();
        let kept = screen_samples(&[0; 50], &neg, &cfg);
        assert_eq!(kept, (0..32).collect::<Vec<_>>());
        let mut actions = vec![0; 3];
        actions.extend(vec![1; 9]);
        actions.extend(vec![0; 2]);
        assert_eq!(
            screen_samples(&actions, &[1.0; 14], &cfg),
            (3..12).collect::<Vec<_>>()
        );
    }

    #[test]
    fn run_tracker() {
        let mut r = RunLengthTracker::new();
        assert_eq!([0, 0, 1, 1, 1, 0].map(|a| r.push(a)), [1, 2, 1, 2, 3, 1]);
        assert_eq!(run_lengths(&[2, 2, 0, 1, 1, 1]), vec![2, 2, 1, 3, 3, 3]);
    }

    #[test]
    fn observation_layout() {
        let p = Matrix::zeros(4, 2);
        let obs = build_observation(&[0.0], &p, &p).unwrap();
        assert_eq!(obs.len(), 17);
        assert!(obs.iter().all(|v| *v == 0.0));
        assert!(build_observation(&[0.0], &p, &Matrix::zeros(3, 2)).is_err());
        let mut w = ObservationWindow::new(2, 2);
        w.push_probs(&[0.3, 0.7]);
        w.push_errors(&[1.0, 2.0]);
        assert_eq!(
            w.observation(&[9.0]),
            vec![9.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.0, 1.0, 2.0]
        );
    }
}
