//! Stage two: joint refinement of the per-variable state estimates through
//! graph attention over variables.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::emission::ScreenedSample;
use crate::error::{arg_err, config_err, Result};
use crate::nd::{
    dense, gat_layer, init_dense, GatConfig, Matrix, ParamStore, Tape, Tensor, Var,
};
use crate::policy::{
    hard_decode, ppo_update, sample_action, Actor, EpisodeBuffer, PpoConfig, PpoOptimizers,
    PpoStats, ValueNet,
};
use crate::stage1::{
    confidence_score, decode, episodic_reward, immediate_reward, refine_den, screen_samples,
    Decoded, ObservationWindow, RewardConfig, RunLengthTracker, ScreenConfig, SeriesContext,
    Stage1Config, VariableAgent,
};
use crate::emission::FitConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Config {
    pub n_states: usize,
    pub t2: usize,
    pub features: usize,
    pub gat_heads: usize,
    pub episode_len: usize,
    pub epochs: usize,
    pub hidden: usize,
    /// Half-width of the uniform init of the output projection.
    pub proj_init: f64,
    pub t_m: usize,
    pub tau: f64,
    pub den_fit: FitConfig,
    pub unfreeze: bool,
    pub reward: RewardConfig,
    pub screen: ScreenConfig,
    pub ppo: PpoConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            n_states: 2,
            t2: 4,
            features: 32,
            gat_heads: 4,
            episode_len: 2000,
            epochs: 50,
            hidden: 64,
            proj_init: 0.01,
            t_m: 200,
            tau: 0.01,
            den_fit: FitConfig {
                steps: 32,
                batch: 256,
            },
            unfreeze: true,
            reward: RewardConfig {
                lambda2: 0.02,
                ..RewardConfig::default()
            },
            screen: ScreenConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(config_err!("need at least 2 states, got {}", self.n_states));
        }
        if self.t2 == 0 || self.features == 0 || self.gat_heads == 0 || self.hidden == 0 {
            return Err(config_err!("stage-two widths and history must be positive"));
        }
        if self.episode_len == 0 || self.t_m == 0 {
            return Err(config_err!("episode length and monitoring window must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_err!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.proj_init >= 0.0) {
            return Err(config_err!("projection init {} is negative", self.proj_init));
        }
        self.reward.validate()?;
        self.screen.validate()?;
        self.ppo.validate()
    }

    /// Per-variable feature width `m + 2·T2·m`.
    pub fn feature_width(&self) -> usize {
        self.n_states * (1 + 2 * self.t2)
    }
}

/// Scales row `i` of `p` by `mu[i]`.
pub fn confidence_adjust(p: &Matrix, mu: &[f64]) -> Result<Matrix> {
    if p.rows() != mu.len() {
        return Err(arg_err!(
            "{} confidence factors for {} rows",
            mu.len(),
            p.rows()
        ));
    }
    let mut out = p.clone();
    for (i, &s) in mu.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn relative_reward(r_stage2: f64, r_stage1: f64) -> f64 {
    r_stage2 - r_stage1
}

/// True once the last `t_m` gains sum above zero; the flag latches.
pub fn unfreeze_check(gains: &[f64], t_m: usize, flag: &mut bool) -> bool {
    if *flag {
        return true;
    }
    if t_m == 0 || gains.len() < t_m {
        return false;
    }
    if gains[gains.len() - t_m..].iter().sum::<f64>() > 0.0 {
        *flag = true;
    }
    *flag
}

/// Joint actor: embeds each variable's features, mixes them with residual
/// graph attention over the complete variable graph and adds the projection
/// to the rescaled stage-one probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Policy {
    pub params: ParamStore,
    n_vars: usize,
    n_states: usize,
    feature_width: usize,
    gat: GatConfig,
}

impl Stage2Policy {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_vars: usize, cfg: &Stage2Config) -> Result<Self> {
        if n_vars == 0 {
            return Err(arg_err!("stage two needs at least one variable"));
        }
        let gat = GatConfig {
            features: cfg.features,
            heads: cfg.gat_heads,
            ..GatConfig::default()
        };
        let mut params = ParamStore::new();
        params.insert("mu", Tensor::filled(vec![n_vars, 1], 1.0))?;
        init_dense(&mut params, rng, "embed", cfg.feature_width(), cfg.features)?;
        gat.init(&mut params, rng, "gat")?;
        let w = (0..cfg.n_states * cfg.features)
            .map(|_| rng.random_range(-1.0..=1.0) * cfg.proj_init)
            .collect();
        params.insert("proj.w", Tensor::new(vec![cfg.n_states, cfg.features], w)?)?;
        Ok(Self {
            params,
            n_vars,
            n_states: cfg.n_states,
            feature_width: cfg.feature_width(),
            gat,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn mu(&self) -> &[f64] {
        self.params.get("mu").map(|t| t.data()).unwrap_or(&[])
    }

    /// Logits `μ·P + W_p·H'` for `B` joint observations, `(B·N) x m`.
    pub fn logits(&self, tape: &mut Tape, params: &ParamStore, obs: &Matrix) -> Result<Var> {
        if obs.cols() != self.obs_width() {
            return Err(arg_err!(
                "stage-two observation width {} != {}",
                obs.cols(),
                self.obs_width()
            ));
        }
        let (n, m) = (self.n_vars, self.n_states);
        let rows = obs.rows() * n;
        let feats = Matrix::from_vec(rows, self.feature_width, obs.data().to_vec())?;
        let mut p = Matrix::zeros(rows, m);
        for r in 0..rows {
            p.row_mut(r).copy_from_slice(&feats.row(r)[..m]);
        }
        let p = tape.constant(p);
        let x = tape.constant(feats);
        let mu = tape.param(params, "mu")?;
        let mu_rows = tape.gather_rows(mu, (0..rows).map(|r| r % n).collect())?;
        let scaled = tape.mul_col(p, mu_rows)?;
        let h = dense(tape, params, x, "embed")?;
        let g = gat_layer(tape, params, "gat", h, n, None, &self.gat)?;
        let w = tape.param(params, "proj.w")?;
        let proj = tape.matmul_nt(g.out, w)?;
        tape.add(scaled, proj)
    }

    /// `P'_t` for one joint observation, `N x m`.
    pub fn distribution(&self, obs: &[f64]) -> Result<Matrix> {
        self.probs(&Matrix::row_vector(obs.to_vec()))
    }
}

impl Actor for Stage2Policy {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn obs_width(&self) -> usize {
        self.n_vars * self.feature_width
    }

    fn n_actions(&self) -> usize {
        self.n_states
    }

    fn factors(&self) -> usize {
        self.n_vars
    }

    fn log_probs(&self, tape: &mut Tape, params: &ParamStore, obs: &Matrix) -> Result<Var> {
        let logits = self.logits(tape, params, obs)?;
        Ok(tape.log_softmax_rows(logits))
    }

    fn probs(&self, obs: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, &self.params, obs)?;
        Ok(crate::nd::softmax_rows(tape.value(logits)))
    }
}

/// Stage-two learner state: actor, joint critic and per-variable latches.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Agent {
    pub policy: Stage2Policy,
    pub value: ValueNet,
    pub opt: PpoOptimizers,
    pub unfrozen: Vec<bool>,
}

impl Stage2Agent {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_vars: usize, cfg: &Stage2Config) -> Result<Self> {
        cfg.validate()?;
        let policy = Stage2Policy::new(rng, n_vars, cfg)?;
        let value = ValueNet::new(rng, policy.obs_width(), cfg.hidden)?;
        Ok(Self {
            policy,
            value,
            opt: PpoOptimizers::new(&cfg.ppo),
            unfrozen: vec![false; n_vars],
        })
    }
}

/// Frozen stage-one models together with their decodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Frozen {
    pub agents: Vec<VariableAgent>,
    pub decodes: Vec<Decoded>,
    pub cfg: Stage1Config,
}

impl Stage1Frozen {
    pub fn new(ctxs: &[SeriesContext], agents: Vec<VariableAgent>, cfg: Stage1Config) -> Result<Self> {
        if ctxs.len() != agents.len() || ctxs.is_empty() {
            return Err(arg_err!(
                "{} series for {} stage-one agents",
                ctxs.len(),
                agents.len()
            ));
        }
        let decodes = ctxs
            .iter()
            .zip(&agents)
            .map(|(c, a)| decode(c, &a.den, &a.policy, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            agents,
            decodes,
            cfg,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.agents.len()
    }

    /// Re-decodes variable `i` after its emission network changed.
    pub fn refresh(&mut self, ctx: &SeriesContext, i: usize) -> Result<()> {
        let a = &self.agents[i];
        self.decodes[i] = decode(ctx, &a.den, &a.policy, &self.cfg)?;
        Ok(())
    }
}

fn check_series(ctxs: &[SeriesContext], frozen: &Stage1Frozen, cfg: &Stage2Config) -> Result<()> {
    if ctxs.len() != frozen.n_vars() {
        return Err(arg_err!(
            "{} series for {} variables",
            ctxs.len(),
            frozen.n_vars()
        ));
    }
    let n = ctxs[0].len();
    if ctxs.iter().any(|c| c.len() != n || c.t0 != ctxs[0].t0) {
        return Err(arg_err!("stage two needs aligned series"));
    }
    if frozen.cfg.n_states != cfg.n_states {
        return Err(config_err!(
            "stage one has {} states, stage two {}",
            frozen.cfg.n_states,
            cfg.n_states
        ));
    }
    Ok(())
}

fn joint_observation(windows: &[ObservationWindow], frozen: &Stage1Frozen, t: usize) -> Vec<f64> {
    windows
        .iter()
        .zip(&frozen.decodes)
        .flat_map(|(w, d)| w.observation(d.probs.row(t)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Episode {
    pub start: usize,
    pub buffer: EpisodeBuffer,
    /// Stage-two actions per variable.
    pub actions: Vec<Vec<usize>>,
    /// Stage-one replayed actions per variable.
    pub replay: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
    pub samples: Vec<Vec<ScreenedSample>>,
    /// Immediate relative gains per variable.
    pub gains: Vec<Vec<f64>>,
    pub episodic_gains: Vec<f64>,
}

/// Rolls the joint policy over one segment, rewarding each step with the
/// summed per-variable gains over the replayed stage-one decisions.
pub fn run_stage2_episode<R: Rng + ?Sized>(
    ctxs: &[SeriesContext],
    frozen: &Stage1Frozen,
    agent: &Stage2Agent,
    cfg: &Stage2Config,
    start: usize,
    rng: &mut R,
) -> Result<Stage2Episode> {
    check_series(ctxs, frozen, cfg)?;
    let te = cfg.episode_len;
    let (n_vars, m) = (ctxs.len(), cfg.n_states);
    let t0 = ctxs[0].t0;
    if start < t0 || start + te >= ctxs[0].len() {
        return Err(config_err!(
            "episode [{}, {}] does not fit a series of length {}",
            start,
            start + te,
            ctxs[0].len()
        ));
    }
    let mut windows: Vec<ObservationWindow> =
        (0..n_vars).map(|_| ObservationWindow::new(cfg.t2, m)).collect();
    for (w, d) in windows.iter_mut().zip(&frozen.decodes) {
        for t in (start + 1).saturating_sub(cfg.t2)..start {
            w.push_errors(d.errors.row(t));
        }
    }
    let mut buffer = EpisodeBuffer::new(agent.policy.obs_width(), n_vars);
    let mut actions = vec![Vec::with_capacity(te); n_vars];
    let mut replay = vec![Vec::with_capacity(te); n_vars];
    let mut scores = vec![Vec::with_capacity(te); n_vars];
    let mut samples = vec![Vec::with_capacity(te); n_vars];
    let mut gains = vec![Vec::with_capacity(te); n_vars];
    let mut runs2 = vec![RunLengthTracker::new(); n_vars];
    let mut runs1 = vec![RunLengthTracker::new(); n_vars];
    let mut step_actions = vec![0; n_vars];
    for (k, t) in (start..start + te).enumerate() {
        for (w, d) in windows.iter_mut().zip(&frozen.decodes) {
            w.push_errors(d.errors.row(t));
        }
        let obs = joint_observation(&windows, frozen, t);
        let dist = agent.policy.distribution(&obs)?;
        let value = agent.value.value(&obs)?;
        let mut log_prob = 0.0;
        let mut reward = 0.0;
        for i in 0..n_vars {
            let (ctx, d) = (&ctxs[i], &frozen.decodes[i]);
            let (a, lp) = sample_action(dist.row(i), rng)?;
            log_prob += lp;
            step_actions[i] = a;
            let a1 = d.states[t];
            let (e_t, e_t1) = (d.errors.row(t), d.errors.row(t + 1));
            let (b0, b1) = (ctx.base_errors[t], ctx.base_errors[t + 1]);
            let r2 = immediate_reward(b0, b1, e_t[a], e_t1[a], runs2[i].push(a), &cfg.reward);
            let r1 = immediate_reward(b0, b1, e_t[a1], e_t1[a1], runs1[i].push(a1), &cfg.reward);
            let g = relative_reward(r2, r1);
            reward += g;
            gains[i].push(g);
            actions[i].push(a);
            replay[i].push(a1);
            scores[i].push(confidence_score(e_t, a)?);
            samples[i].push(ScreenedSample {
                input: ctx.history(t - 1).to_vec(),
                head: a,
                target: ctx.z[t],
            });
        }
        buffer.push(&obs, &step_actions, log_prob, value, reward, k + 1 == te)?;
        for (i, w) in windows.iter_mut().enumerate() {
            w.push_probs(dist.row(i));
        }
    }
    let mut episodic_gains = Vec::with_capacity(n_vars);
    for i in 0..n_vars {
        let errors = frozen.decodes[i].errors.slice_rows(start, start + te)?;
        let r2 = episodic_reward(&errors, &actions[i], &cfg.reward)?;
        let r1 = episodic_reward(&errors, &replay[i], &cfg.reward)?;
        episodic_gains.push(relative_reward(r2.value, r1.value));
    }
    if !cfg.reward.ablation.no_episodic {
        if let Some(last) = buffer.rewards_mut().last_mut() {
            *last += episodic_gains.iter().sum::<f64>();
        }
    }
    Ok(Stage2Episode {
        start,
        buffer,
        actions,
        replay,
        scores,
        samples,
        gains,
        episodic_gains,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Log {
    pub epoch: usize,
    pub mean_reward: f64,
    pub relative_gain: Vec<f64>,
    pub unfroze: Vec<bool>,
    pub den_loss: Vec<f64>,
    pub ppo: PpoStats,
}

/// One stage-two epoch: episode, conditional emission refinement, PPO.
pub fn train_stage2_epoch<R: Rng + ?Sized>(
    ctxs: &[SeriesContext],
    frozen: &mut Stage1Frozen,
    agent: &mut Stage2Agent,
    cfg: &Stage2Config,
    epoch: usize,
    rng: &mut R,
) -> Result<Stage2Log> {
    check_series(ctxs, frozen, cfg)?;
    let ctx = &ctxs[0];
    let lo = ctx.t0;
    if ctx.train_end < lo + cfg.episode_len + 1 {
        return Err(config_err!(
            "training split of {} steps is too short for episodes of {}",
            ctx.train_end,
            cfg.episode_len
        ));
    }
    let start = rng.random_range(lo..=ctx.train_end - cfg.episode_len - 1);
    let ep = run_stage2_episode(ctxs, frozen, agent, cfg, start, rng)?;
    let n_vars = ctxs.len();
    let mut den_loss = vec![f64::NAN; n_vars];
    let mut updated = vec![false; n_vars];
    for i in 0..n_vars {
        if !cfg.unfreeze || !unfreeze_check(&ep.gains[i], cfg.t_m, &mut agent.unfrozen[i]) {
            continue;
        }
        let kept: Vec<ScreenedSample> = screen_samples(&ep.actions[i], &ep.scores[i], &cfg.screen)
            .into_iter()
            .map(|k| ep.samples[i][k].clone())
            .collect();
        den_loss[i] = refine_den(&mut frozen.agents[i], &kept, cfg.den_fit, cfg.tau, rng)?;
        updated[i] = !kept.is_empty();
    }
    let ppo = ppo_update(
        &mut agent.policy,
        &mut agent.value,
        &ep.buffer,
        &cfg.ppo,
        &mut agent.opt,
        rng,
    )?;
    for (i, &u) in updated.iter().enumerate() {
        if u {
            frozen.refresh(&ctxs[i], i)?;
        }
    }
    let rewards = ep.buffer.rewards();
    Ok(Stage2Log {
        epoch,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        relative_gain: ep.gains.iter().map(|g| g.iter().sum()).collect(),
        unfroze: agent.unfrozen.clone(),
        den_loss,
        ppo,
    })
}

/// Greedy joint decode over the whole series, one [`Decoded`] per variable.
pub fn decode_stage2(
    ctxs: &[SeriesContext],
    frozen: &Stage1Frozen,
    policy: &Stage2Policy,
    cfg: &Stage2Config,
) -> Result<Vec<Decoded>> {
    check_series(ctxs, frozen, cfg)?;
    let (n_vars, m) = (ctxs.len(), cfg.n_states);
    let n = ctxs[0].len();
    let t0 = ctxs[0].t0;
    let mut out: Vec<Decoded> = frozen
        .decodes
        .iter()
        .map(|d| Decoded {
            states: vec![0; n],
            probs: Matrix::filled(n, m, 1.0 / m as f64),
            errors: d.errors.clone(),
            forecasts: vec![f64::NAN; n],
        })
        .collect();
    let heads: Vec<Matrix> = ctxs
        .iter()
        .zip(&frozen.agents)
        .map(|(c, a)| {
            a.den
                .predict_batch(&crate::emission::history_matrix(&c.z, t0, t0 - 1..n)?)
        })
        .collect::<Result<_>>()?;
    let mut windows: Vec<ObservationWindow> =
        (0..n_vars).map(|_| ObservationWindow::new(cfg.t2, m)).collect();
    for t in t0..n {
        for (w, d) in windows.iter_mut().zip(&frozen.decodes) {
            w.push_errors(d.errors.row(t));
        }
        let dist = policy.distribution(&joint_observation(&windows, frozen, t))?;
        for i in 0..n_vars {
            let a = hard_decode(dist.row(i));
            let d = &mut out[i];
            d.states[t] = a;
            d.probs.row_mut(t).copy_from_slice(dist.row(i));
            if t + 1 < n {
                d.forecasts[t + 1] = heads[i].get(t + 1 - t0, a);
            }
            windows[i].push_probs(dist.row(i));
        }
    }
    for d in &mut out {
        let first = d.states[t0];
        d.states[..t0].iter_mut().for_each(|s| *s = first);
    }
    Ok(out)
}
