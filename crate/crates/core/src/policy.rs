//! Categorical actor-critic trained with clipped PPO and GAE.
//!
//! An [`Actor`] may emit several independent categorical factors per
//! observation (stage two samples one state per variable); the joint
//! log-probability of a step is the sum over its factors.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::nd::{AdamConfig, AdamState, Matrix, Mlp, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub entropy_beta: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            entropy_beta: 0.04,
            ppo_epochs: 4,
            minibatch: 256,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::config_err;
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(config_err!(
                "gamma {} and lambda_gae {} must lie in [0, 1]",
                self.gamma,
                self.lambda_gae
            ));
        }
        if !(self.clip_eps > 0.0) {
            return Err(config_err!(
                "clip_eps must be positive, got {}",
                self.clip_eps
            ));
        }
        if self.ppo_epochs == 0 || self.minibatch == 0 {
            return Err(config_err!("ppo_epochs and minibatch must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.entropy_beta >= 0.0) {
            return Err(config_err!(
                "learning rates must be positive, entropy_beta nonnegative"
            ));
        }
        Ok(())
    }
}

/// Draws from a categorical distribution. Returns `(action, log p[action])`.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<(usize, f64)> {
    check_distribution(probs)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut action = probs.len() - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            action = k;
            break;
        }
    }
    // guard against rounding picking a zero-probability tail entry
    while probs[action] == 0.0 && action > 0 {
        action -= 1;
    }
    Ok((action, libm::log(probs[action])))
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(arg_err!("empty distribution"));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(arg_err!("not a distribution: {:?}", probs));
    }
    Ok(())
}

/// Most probable action, lowest index on ties.
pub fn hard_decode(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = k;
        }
    }
    best
}

/// `−Σ p log p` with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * libm::log(*p))
        .sum::<f64>()
}

/// A differentiable categorical policy.
pub trait Actor {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn obs_width(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Independent categorical factors per observation.
    fn factors(&self) -> usize {
        1
    }
    /// Log-probabilities for a batch of `B` observations, `(B·factors) x m`,
    /// observation-major.
    fn log_probs(&self, tape: &mut Tape, params: &ParamStore, obs: &Matrix) -> Result<Var>;
    /// Probabilities without a tape, same layout as [`Actor::log_probs`].
    fn probs(&self, obs: &Matrix) -> Result<Matrix>;
}

/// Stage-one actor: tanh MLP from observation to action logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub params: ParamStore,
    mlp: Mlp,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        obs_width: usize,
        hidden: usize,
        n_actions: usize,
    ) -> Result<Self> {
        if obs_width == 0 || hidden == 0 || n_actions == 0 {
            return Err(arg_err!("policy network needs positive widths"));
        }
        let mlp = Mlp::new("pi", &[obs_width, hidden, hidden, n_actions], false);
        let mut params = ParamStore::new();
        mlp.init(&mut params, rng)?;
        // start near uniform
        if let Some(w) = params.get_mut("pi.l2.w") {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.01);
        }
        Ok(Self { params, mlp })
    }

    pub fn logits(&self, obs: &Matrix) -> Result<Matrix> {
        self.mlp.eval(&self.params, obs)
    }

    /// Action distribution for one observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.probs(&Matrix::row_vector(obs.to_vec()))?.into_vec())
    }
}

impl Actor for PolicyNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn obs_width(&self) -> usize {
        self.mlp.input_width()
    }

    fn n_actions(&self) -> usize {
        self.mlp.output_width()
    }

    fn log_probs(&self, tape: &mut Tape, params: &ParamStore, obs: &Matrix) -> Result<Var> {
        let x = tape.constant(obs.clone());
        let logits = self.mlp.forward(tape, params, x)?;
        Ok(tape.log_softmax_rows(logits))
    }

    fn probs(&self, obs: &Matrix) -> Result<Matrix> {
        Ok(crate::nd::softmax_rows(&self.logits(obs)?))
    }
}

/// State-value critic.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub params: ParamStore,
    mlp: Mlp,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, obs_width: usize, hidden: usize) -> Result<Self> {
        if obs_width == 0 || hidden == 0 {
            return Err(arg_err!("value network needs positive widths"));
        }
        let mlp = Mlp::new("v", &[obs_width, hidden, hidden, 1], false);
        let mut params = ParamStore::new();
        mlp.init(&mut params, rng)?;
        Ok(Self { params, mlp })
    }

    pub fn obs_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, obs: Var) -> Result<Var> {
        self.mlp.forward(tape, params, obs)
    }

    pub fn values(&self, obs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.mlp.eval(&self.params, obs)?.into_vec())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.values(&Matrix::row_vector(obs.to_vec()))?[0])
    }
}

/// One collected trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBuffer {
    width: usize,
    factors: usize,
    obs: Vec<f64>,
    actions: Vec<usize>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    /// `V` of the observation after the last step.
    pub bootstrap: f64,
}

impl EpisodeBuffer {
    pub fn new(width: usize, factors: usize) -> Self {
        Self {
            width,
            factors,
            obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            bootstrap: 0.0,
        }
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        actions: &[usize],
        log_prob: f64,
        value: f64,
        reward: f64,
        done: bool,
    ) -> Result<()> {
        if obs.len() != self.width || actions.len() != self.factors {
            return Err(arg_err!(
                "step with {} features and {} actions, buffer holds {} and {}",
                obs.len(),
                actions.len(),
                self.width,
                self.factors
            ));
        }
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(actions);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.obs[t * self.width..(t + 1) * self.width]
    }

    pub fn actions(&self, t: usize) -> &[usize] {
        &self.actions[t * self.factors..(t + 1) * self.factors]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn rewards_mut(&mut self) -> &mut [f64] {
        &mut self.rewards
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }
}

/// Generalized advantage estimates and value targets `A + V`, unnormalized.
pub fn compute_gae(buffer: &EpisodeBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buffer.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if buffer.dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n {
            buffer.values[t + 1]
        } else {
            buffer.bootstrap
        };
        let delta = buffer.rewards[t] + gamma * live * next_v - buffer.values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let targets = adv.iter().zip(&buffer.values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var).max(1e-8);
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Adam states for an actor-critic pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoOptimizers {
    pub actor: AdamState,
    pub critic: AdamState,
}

impl PpoOptimizers {
    pub fn new(cfg: &PpoConfig) -> Self {
        Self {
            actor: AdamState::new(AdamConfig::with_lr(cfg.actor_lr)),
            critic: AdamState::new(AdamConfig::with_lr(cfg.critic_lr)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean per-step entropy under the pre-update policy.
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Minibatch of PPO inputs; `actions` holds `factors` entries per row of `obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateBatch {
    pub obs: Matrix,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Clipped-surrogate objective plus `β·entropy` for one minibatch, returned
/// negated (a loss).
pub fn surrogate_loss<A: Actor + ?Sized>(
    actor: &A,
    tape: &mut Tape,
    params: &ParamStore,
    batch: &SurrogateBatch,
    clip_eps: f64,
    entropy_beta: f64,
) -> Result<Var> {
    let k = actor.factors();
    let logp = actor.log_probs(tape, params, &batch.obs)?;
    let picked = tape.pick(logp, batch.actions.clone())?;
    let joint = tape.group_sum_rows(picked, k)?;
    let old = tape.constant(Matrix::column_vector(batch.old_log_probs.clone()));
    let diff = tape.sub(joint, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(Matrix::column_vector(batch.advantages.clone()));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surr = tape.minimum(unclipped, clipped)?;
    let objective = tape.mean(surr);
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp)?;
    let per_factor = tape.sum_cols(plogp);
    let per_step = tape.group_sum_rows(per_factor, k)?;
    // mean of −Σ p log p
    let neg_entropy = tape.mean(per_step);
    let bonus = tape.scale(neg_entropy, entropy_beta);
    let neg_objective = tape.scale(objective, -1.0);
    tape.add(neg_objective, bonus)
}

fn gather_obs(buffer: &EpisodeBuffer, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * buffer.width);
    for &t in idx {
        data.extend_from_slice(buffer.observation(t));
    }
    Matrix::from_vec(idx.len(), buffer.width, data)
}

/// One PPO update: `ppo_epochs` shuffled passes of minibatches over the
/// buffer for both actor and critic.
pub fn ppo_update<A: Actor + ?Sized, R: Rng + ?Sized>(
    actor: &mut A,
    critic: &mut ValueNet,
    buffer: &EpisodeBuffer,
    cfg: &PpoConfig,
    opt: &mut PpoOptimizers,
    rng: &mut R,
) -> Result<PpoStats> {
    if buffer.is_empty() {
        return Err(arg_err!("PPO update on an empty buffer"));
    }
    if buffer.width != actor.obs_width()
        || buffer.width != critic.obs_width()
        || buffer.factors != actor.factors()
    {
        return Err(arg_err!("buffer layout does not match the actor-critic"));
    }
    let (mut adv, targets) = compute_gae(buffer, cfg.gamma, cfg.lambda_gae);
    normalize(&mut adv);
    let n = buffer.len();
    let k = buffer.factors;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut batches = 0usize;
    {
        let all = gather_obs(buffer, &order)?;
        let probs = actor.probs(&all)?;
        stats.entropy = (0..probs.rows())
            .map(|r| entropy(probs.row(r)))
            .sum::<f64>()
            / n as f64;
    }
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch = SurrogateBatch {
                obs: gather_obs(buffer, chunk)?,
                actions: chunk
                    .iter()
                    .flat_map(|&t| buffer.actions(t).iter().copied())
                    .collect(),
                old_log_probs: chunk.iter().map(|&t| buffer.log_probs[t]).collect(),
                advantages: chunk.iter().map(|&t| adv[t]).collect(),
            };

            let mut tape = Tape::new();
            let loss = surrogate_loss(
                &*actor,
                &mut tape,
                actor.params(),
                &batch,
                cfg.clip_eps,
                cfg.entropy_beta,
            )?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Training("PPO policy loss is not finite".into()));
            }
            let grads = tape.backward(loss)?;
            opt.actor.step(actor.params_mut(), &grads)?;

            let mut tape = Tape::new();
            let x = tape.constant(batch.obs);
            let v = critic.forward(&mut tape, &critic.params, x)?;
            let tgt = tape.constant(Matrix::column_vector(
                chunk.iter().map(|&t| targets[t]).collect(),
            ));
            let err = tape.sub(v, tgt)?;
            let sq = tape.square(err);
            let vloss = tape.mean(sq);
            let vloss_value = tape.scalar(vloss);
            if !vloss_value.is_finite() {
                return Err(Error::Training("PPO value loss is not finite".into()));
            }
            let grads = tape.backward(vloss)?;
            opt.critic.step(&mut critic.params, &grads)?;

            stats.policy_loss += loss_value;
            stats.value_loss += vloss_value;
            batches += 1;
        }
    }
    stats.policy_loss /= batches as f64;
    stats.value_loss /= batches as f64;

    let all = gather_obs(buffer, &(0..n).collect::<Vec<_>>())?;
    let probs = actor.probs(&all)?;
    let mut clipped = 0usize;
    for t in 0..n {
        let new_lp: f64 = (0..k)
            .map(|f| libm::log(probs.get(t * k + f, buffer.actions[t * k + f]).max(1e-300)))
            .sum();
        let log_ratio = new_lp - buffer.log_probs[t];
        stats.approx_kl += -log_ratio / n as f64;
        if (libm::exp(log_ratio) - 1.0).abs() > cfg.clip_eps {
            clipped += 1;
        }
    }
    stats.clip_fraction = clipped as f64 / n as f64;
    Ok(stats)
}

/// Two-armed bandit with fixed rewards `0` (arm 1) and `1` (arm 2) and a
/// constant observation. Runs `updates` PPO updates on `batch` one-step
/// episodes each and returns the better arm's probability after each update.
pub fn two_armed_bandit(seed: u64, updates: usize, batch: usize) -> Result<Vec<f64>> {
    let cfg = PpoConfig::default();
    let mut rng = crate::rng::stream(seed, "bandit", &[]);
    let mut actor = PolicyNet::new(&mut rng, 1, 64, 2)?;
    let mut critic = ValueNet::new(&mut rng, 1, 64)?;
    let mut opt = PpoOptimizers::new(&cfg);
    let obs = [1.0];
    let mut curve = Vec::with_capacity(updates);
    for _ in 0..updates {
        let probs = actor.distribution(&obs)?;
        let value = critic.value(&obs)?;
        let mut buffer = EpisodeBuffer::new(1, 1);
        for _ in 0..batch {
            let (a, lp) = sample_action(&probs, &mut rng)?;
            buffer.push(&obs, &[a], lp, value, a as f64, true)?;
        }
        ppo_update(&mut actor, &mut critic, &buffer, &cfg, &mut opt, &mut rng)?;
        curve.push(actor.distribution(&obs)?[1]);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::grad_check;
    use crate::rng::stream;

    fn buffer(rewards: &[f64], values: &[f64], bootstrap: f64) -> EpisodeBuffer {
        let mut b = EpisodeBuffer::new(1, 1);
        let n = rewards.len();
        for t in 0..n {
            b.push(&[0.0], &[0], 0.0, values[t], rewards[t], t + 1 == n)
                .unwrap();
        }
        b.bootstrap = bootstrap;
        b
    }

    #[test]
    fn gae_hand_recursion() {
        let (a, tgt) = compute_gae(&buffer(&[1.0, 1.0], &[0.5, 0.5], 3.0), 0.99, 0.95);
        // δ1 = 1 − 0.5; δ0 = 1 + 0.99·0.5 − 0.5; A0 = δ0 + 0.99·0.95·δ1
        assert!((a[1] - 0.5).abs() < 1e-12);
        assert!((a[0] - 1.46525).abs() < 1e-12);
        assert!((tgt[0] - 1.96525).abs() < 1e-12);
    }

    #[test]
    fn gae_single_terminal_and_lambda_zero() {
        let (a, _) = compute_gae(&buffer(&[2.0], &[0.7], 5.0), 0.99, 0.95);
        assert!((a[0] - 1.3).abs() < 1e-12);
        let mut b = buffer(&[1.0, 0.5, 2.0], &[0.1, 0.2, 0.3], 0.0);
        b.dones[2] = false;
        b.bootstrap = 0.4;
        let (a, _) = compute_gae(&b, 0.9, 0.0);
        let deltas = [
            1.0 + 0.9 * 0.2 - 0.1,
            0.5 + 0.9 * 0.3 - 0.2,
            2.0 + 0.9 * 0.4 - 0.3,
        ];
        for (x, y) in a.iter().zip(deltas) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = stream(1, "sample", &[]);
        for _ in 0..100 {
            assert_eq!(sample_action(&[1.0, 0.0], &mut rng).unwrap(), (0, 0.0));
            assert_eq!(sample_action(&[0.0, 1.0], &mut rng).unwrap().0, 1);
        }
        assert!(sample_action(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_action(&[], &mut rng).is_err());
    }

    #[test]
    fn decoding_and_entropy() {
        assert_eq!(hard_decode(&[0.3, 0.7]), 1);
        assert_eq!(hard_decode(&[0.5, 0.5]), 0);
        assert_eq!(hard_decode(&[0.2, 0.4, 0.4]), 1);
        assert!((entropy(&[0.5, 0.5]) - libm::log(2.0)).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!(entropy(&[0.6, 0.4]) < entropy(&[0.5, 0.5]));
    }

    #[test]
    fn networks_pass_gradient_checks() {
        let mut rng = stream(4, "pg", &[]);
        let pi = PolicyNet::new(&mut rng, 5, 8, 3).unwrap();
        let obs = Matrix::from_vec(4, 5, (0..20).map(|k| libm::sin(k as f64)).collect()).unwrap();
        // spread the logits so the check is not dominated by the small init
        let mut params = pi.params.clone();
        params
            .get_mut("pi.l2.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 100.0);
        let batch = SurrogateBatch {
            obs: obs.clone(),
            actions: vec![0, 2, 1, 1],
            old_log_probs: vec![-1.2, -0.9, -1.0, -1.1],
            advantages: vec![0.5, -1.0, 0.3, 1.2],
        };
        let report = grad_check(
            |tape, p| surrogate_loss(&pi, tape, p, &batch, 0.2, 0.04),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let v = ValueNet::new(&mut rng, 5, 8).unwrap();
        let report = grad_check(
            |tape, p| {
                let x = tape.constant(obs.clone());
                let y = v.forward(tape, p, x)?;
                let sq = tape.square(y);
                Ok(tape.mean(sq))
            },
            &v.params,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let mut rng = stream(5, "ppo", &[]);
        let mut pi = PolicyNet::new(&mut rng, 1, 4, 2).unwrap();
        let mut v = ValueNet::new(&mut rng, 1, 4).unwrap();
        let cfg = PpoConfig::default();
        let mut opt = PpoOptimizers::new(&cfg);
        let b = EpisodeBuffer::new(1, 1);
        assert!(ppo_update(&mut pi, &mut v, &b, &cfg, &mut opt, &mut rng).is_err());
    }
}
