//! Training pipeline: baseline pre-training, stage one per variable, stage
//! two over all variables, the HMM comparison, and evaluation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use statehawk_core::dataset::Dataset;
use statehawk_core::emission::{
    history_matrix, train_baseline, BaselineModel, FitConfig, Standardizer,
};
use statehawk_core::hmm::{fit_em, forecast_series, viterbi, EmConfig, HmmParams};
use statehawk_core::nd::{AdamConfig, AdamState};
use statehawk_core::rng::stream;
use statehawk_core::stage1::{decode, train_epoch, SeriesContext, Stage1Config, VariableAgent};
use statehawk_core::stage2::{
    decode_stage2, train_stage2_epoch, Stage1Frozen, Stage2Agent, Stage2Config,
};

use crate::checkpoint;
use crate::eval::{evaluate, MetricsReport, VarEvaluation};
use crate::logs::NdjsonLog;
use crate::{Error, Result};

/// Switches for the ablation variants; `--stage1-only` covers the
/// stage-one-only variant and the baseline report covers the plain
/// forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationFlag {
    NoSwitchPenalty,
    NoScreening,
    NoBaseline,
    NoStateSeparation,
    NoPairwise,
    NoEpisodic,
    NoStageOne,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 7] = [
        Self::NoSwitchPenalty,
        Self::NoScreening,
        Self::NoBaseline,
        Self::NoStateSeparation,
        Self::NoPairwise,
        Self::NoEpisodic,
        Self::NoStageOne,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::NoSwitchPenalty => "no_switch_penalty",
            Self::NoScreening => "no_screening",
            Self::NoBaseline => "no_baseline",
            Self::NoStateSeparation => "no_state_separation",
            Self::NoPairwise => "no_pairwise",
            Self::NoEpisodic => "no_episodic",
            Self::NoStageOne => "no_stage_one",
        }
    }

    /// Variant name used in reports.
    pub fn variant(self) -> &'static str {
        match self {
            Self::NoSwitchPenalty => "DRL-NASP",
            Self::NoScreening => "DRL-NSSS",
            Self::NoBaseline => "DRL-NBL",
            Self::NoStateSeparation => "DRL-NSSE",
            Self::NoPairwise => "DRL-NPDE",
            Self::NoEpisodic => "DRL-NER",
            Self::NoStageOne => "DRL-NSO",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|f| f.key() == s || f.variant().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|f| f.key()).collect();
                Error::Config(format!(
                    "unknown ablation `{s}` (known: {})",
                    known.join(", ")
                ))
            })
    }
}

pub fn parse_ablations(list: &str) -> Result<Vec<AblationFlag>> {
    let mut out: Vec<AblationFlag> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub fit: FitConfig,
    pub lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            fit: FitConfig {
                steps: 2000,
                batch: 256,
            },
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_states: usize,
    pub train_fraction: f64,
    pub baseline: BaselineConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub hmm: EmConfig,
    pub stage1_only: bool,
    pub ablations: Vec<AblationFlag>,
    pub threads: usize,
    /// Epochs between checkpoints (0 writes only at stage ends).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_states: 2,
            train_fraction: 0.8,
            baseline: BaselineConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            hmm: EmConfig::default(),
            stage1_only: false,
            ablations: Vec::new(),
            threads: 1,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn has(&self, flag: AblationFlag) -> bool {
        self.ablations.contains(&flag)
    }

    /// Stage configs with the ablation switches applied.
    pub fn effective(&self) -> (Stage1Config, Stage2Config) {
        let mut s1 = self.stage1;
        let mut s2 = self.stage2;
        s1.n_states = self.n_states;
        s2.n_states = self.n_states;
        for (reward, screen) in [(&mut s1.reward, &mut s1.screen), (&mut s2.reward, &mut s2.screen)]
        {
            let a = &mut reward.ablation;
            a.no_switch_penalty |= self.has(AblationFlag::NoSwitchPenalty);
            a.no_baseline |= self.has(AblationFlag::NoBaseline);
            a.no_state_separation |= self.has(AblationFlag::NoStateSeparation);
            a.no_pairwise |= self.has(AblationFlag::NoPairwise);
            a.no_episodic |= self.has(AblationFlag::NoEpisodic);
            screen.enabled &= !self.has(AblationFlag::NoScreening);
        }
        (s1, s2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.baseline.hidden == 0 || self.baseline.fit.batch == 0 || !(self.baseline.lr > 0.0)
        {
            return Err(Error::Config("baseline widths and lr must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.stage1_only && self.has(AblationFlag::NoStageOne) {
            return Err(Error::Config(
                "stage1_only and no_stage_one exclude each other".into(),
            ));
        }
        let (s1, s2) = self.effective();
        s1.validate()?;
        s2.validate()?;
        Ok(())
    }

    /// Report name of the configured variant.
    pub fn variant(&self) -> String {
        if self.stage1_only {
            return "DRL-S1".into();
        }
        let mut flags = self.ablations.clone();
        flags.sort();
        flags.dedup();
        match flags.as_slice() {
            [] => "DRL-STAF".into(),
            [one] => one.variant().into(),
            [AblationFlag::NoSwitchPenalty, AblationFlag::NoScreening] => "DRL-NASP&SSS".into(),
            many => format!(
                "DRL-STAF[{}]",
                many.iter().map(|f| f.key()).collect::<Vec<_>>().join("+")
            ),
        }
    }
}

/// Dataset with its split and per-variable standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: usize,
    pub scalers: Vec<Standardizer>,
    pub z: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn new(dataset: Dataset, train_fraction: f64) -> Result<Self> {
        let split = dataset.split_index(train_fraction)?;
        let mut scalers = Vec::new();
        let mut z = Vec::new();
        for i in 0..dataset.n_vars() {
            let x = dataset.series(i);
            let s = Standardizer::fit(&x[..split]);
            z.push(s.apply_all(&x));
            scalers.push(s);
        }
        Ok(Self {
            dataset,
            split,
            scalers,
            z,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.dataset.n_vars()
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }
}

/// Baseline predictions of every `z[t]`, `t ≥ t0` (earlier entries 0).
pub fn baseline_predictions(model: &BaselineModel, z: &[f64], t0: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; t0];
    out.extend(model.predict_batch(&history_matrix(z, t0, t0 - 1..z.len() - 1)?)?);
    Ok(out)
}

/// Decoded states and standardized forecasts of one model for all variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub name: String,
    pub states: Option<Vec<Vec<usize>>>,
    /// Original units; `NaN` where no forecast exists.
    pub forecasts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub config: TrainConfig,
    pub baselines: Vec<BaselineModel>,
    pub stage1: Vec<VariableAgent>,
    pub stage2: Option<Stage2Agent>,
    pub hmm: Vec<HmmParams>,
    /// Stage-one decode taken before stage two touched the emission networks.
    pub stage1_output: ModelOutput,
    pub final_output: ModelOutput,
    pub baseline_output: ModelOutput,
    pub hmm_output: ModelOutput,
}

impl Trained {
    pub fn outputs(&self) -> Vec<&ModelOutput> {
        let mut v = vec![&self.final_output];
        if self.final_output.name != self.stage1_output.name {
            v.push(&self.stage1_output);
        }
        v.push(&self.baseline_output);
        v.push(&self.hmm_output);
        v
    }
}

#[derive(Serialize)]
struct Stage1Record<'a> {
    event: &'a str,
    stage: u8,
    var: usize,
    epoch: usize,
    mean_reward: f64,
    episodic_reward: f64,
    screened: usize,
    den_loss: f64,
    entropy: f64,
    policy_loss: f64,
    value_loss: f64,
    approx_kl: f64,
}

#[derive(Serialize)]
struct Stage2Record<'a> {
    event: &'a str,
    stage: u8,
    epoch: usize,
    mean_reward: f64,
    relative_gain: &'a [f64],
    unfroze: &'a [bool],
    den_loss: &'a [f64],
    entropy: f64,
    policy_loss: f64,
    value_loss: f64,
}

/// Runs the pipeline, optionally persisting checkpoints and NDJSON logs
/// under `out` and resuming from checkpoints found there.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub out: Option<PathBuf>,
    pub log: Option<&'a NdjsonLog>,
    /// Fail instead of training when a checkpoint is missing or incomplete.
    pub resume_only: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            out: None,
            log: None,
            resume_only: false,
        }
    }

    /// Loads every model from the checkpoints under `out` without training.
    pub fn resume_only(mut self) -> Self {
        self.resume_only = true;
        self
    }

    fn missing(&self, what: &str) -> Error {
        Error::Config(format!(
            "{what}: no complete checkpoint under {}",
            self.out
                .as_deref()
                .unwrap_or(Path::new("<none>"))
                .display()
        ))
    }

    pub fn with_output(mut self, out: &Path, log: Option<&'a NdjsonLog>) -> Self {
        self.out = Some(out.to_path_buf());
        self.log = log;
        self
    }

    fn record<T: Serialize>(&self, rec: &T) -> Result<()> {
        match self.log {
            Some(l) => l.write(rec),
            None => Ok(()),
        }
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join("checkpoints").join(name))
    }

    pub fn run(&self, data: &Prepared) -> Result<Trained> {
        let cfg = &self.config;
        cfg.validate()?;
        if data.dataset.n_states() != cfg.n_states && data.dataset.has_states() {
            return Err(Error::Config(format!(
                "dataset has {} states, config {}",
                data.dataset.n_states(),
                cfg.n_states
            )));
        }
        let (s1, s2) = cfg.effective();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;

        let baselines = self
            .train_baselines(data, &pool)
            .map_err(|e| e.in_stage("baseline"))?;
        let ctxs = baselines
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let preds = baseline_predictions(b, &data.z[i], s1.t0)?;
                Ok(SeriesContext::new(
                    data.z[i].clone(),
                    s1.t0,
                    data.split,
                    &preds,
                    s1.e_clip,
                )?)
            })
            .collect::<Result<Vec<_>>>()?;

        let agents = self
            .train_stage1(&ctxs, &s1, &pool)
            .map_err(|e| e.in_stage("stage one"))?;
        let stage1_decodes = ctxs
            .iter()
            .zip(&agents)
            .map(|(c, a)| decode(c, &a.den, &a.policy, &s1))
            .collect::<statehawk_core::Result<Vec<_>>>()?;
        let s1_name = if cfg.has(AblationFlag::NoStageOne) {
            "stage-one(untrained)"
        } else if cfg.stage1_only || cfg.ablations.is_empty() {
            "DRL-S1"
        } else {
            "stage-one"
        };
        let stage1_output = output_from(
            if cfg.stage1_only { cfg.variant() } else { s1_name.into() },
            data,
            stage1_decodes
                .iter()
                .map(|d| (d.states.clone(), d.forecasts.clone())),
        );

        let (stage2, agents, final_output) = if cfg.stage1_only {
            (None, agents, stage1_output.clone())
        } else {
            let mut frozen = Stage1Frozen::new(&ctxs, agents, s1)?;
            let agent = self
                .train_stage2(&ctxs, &mut frozen, &s2)
                .map_err(|e| e.in_stage("stage two"))?;
            let decoded = decode_stage2(&ctxs, &frozen, &agent.policy, &s2)?;
            let out = output_from(
                cfg.variant(),
                data,
                decoded.into_iter().map(|d| (d.states, d.forecasts)),
            );
            (Some(agent), frozen.agents, out)
        };

        let baseline_output = ModelOutput {
            name: "DL-F".into(),
            states: None,
            forecasts: ctxs
                .iter()
                .zip(&baselines)
                .enumerate()
                .map(|(i, (c, b))| {
                    let mut p = baseline_predictions(b, &c.z, s1.t0)?;
                    p[..s1.t0].iter_mut().for_each(|v| *v = f64::NAN);
                    Ok(p.into_iter().map(|v| data.scalers[i].invert(v)).collect())
                })
                .collect::<Result<_>>()?,
        };

        let (hmm, hmm_output) = self.fit_hmm(data, &pool).map_err(|e| e.in_stage("hmm"))?;
        if let Some(p) = self.ckpt_path("hmm.ckpt") {
            checkpoint::save_hmm(&p, &hmm)?;
        }
        Ok(Trained {
            config: cfg.clone(),
            baselines,
            stage1: agents,
            stage2,
            hmm,
            stage1_output,
            final_output,
            baseline_output,
            hmm_output,
        })
    }

    fn train_baselines(&self, data: &Prepared, pool: &rayon::ThreadPool) -> Result<Vec<BaselineModel>> {
        let cfg = &self.config;
        let t0 = cfg.stage1.t0;
        if let Some(p) = self.ckpt_path("baseline.ckpt") {
            if p.exists() {
                info!("resuming baselines from {}", p.display());
                return checkpoint::load_baselines(&p, data.n_vars(), t0, cfg.baseline.hidden);
            }
        }
        if self.resume_only {
            return Err(self.missing("baseline"));
        }
        let models = pool.install(|| {
            (0..data.n_vars())
                .into_par_iter()
                .map(|i| {
                    let z = &data.z[i];
                    let mut rng = stream(cfg.seed, "baseline", &[i as u64]);
                    let mut model = BaselineModel::new(&mut rng, t0, cfg.baseline.hidden)?;
                    let inputs = history_matrix(z, t0, t0 - 1..data.split - 1)?;
                    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.baseline.lr));
                    let mse = train_baseline(
                        &mut model,
                        &inputs,
                        &z[t0..data.split],
                        cfg.baseline.fit,
                        &mut adam,
                        &mut rng,
                    )?;
                    info!("baseline var {} train mse {:.5}", i + 1, mse);
                    Ok(model)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        if let Some(p) = self.ckpt_path("baseline.ckpt") {
            checkpoint::save_baselines(&p, &models)?;
        }
        Ok(models)
    }

    fn train_stage1(
        &self,
        ctxs: &[SeriesContext],
        s1: &Stage1Config,
        pool: &rayon::ThreadPool,
    ) -> Result<Vec<VariableAgent>> {
        let cfg = &self.config;
        pool.install(|| {
            ctxs.par_iter()
                .enumerate()
                .map(|(i, ctx)| {
                    let path = self.ckpt_path(&format!("stage1_var{}.ckpt", i + 1));
                    let mut init_rng = stream(cfg.seed, "stage1.init", &[i as u64]);
                    let mut agent = VariableAgent::new(&mut init_rng, s1)?;
                    let mut start = 0;
                    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                        start = checkpoint::load_agent(p, &mut agent)?;
                        info!("resuming stage one var {} at epoch {}", i + 1, start);
                    }
                    if cfg.has(AblationFlag::NoStageOne) {
                        return Ok(agent);
                    }
                    if self.resume_only && start < s1.epochs {
                        return Err(self.missing(&format!("stage one var {}", i + 1)));
                    }
                    for epoch in start..s1.epochs {
                        let mut rng = stream(cfg.seed, "stage1.epoch", &[i as u64, epoch as u64]);
                        let log = train_epoch(ctx, &mut agent, s1, epoch, i, &mut rng)?;
                        self.record(&Stage1Record {
                            event: "epoch",
                            stage: 1,
                            var: i + 1,
                            epoch,
                            mean_reward: log.mean_reward,
                            episodic_reward: log.episodic_reward,
                            screened: log.screened_count,
                            den_loss: log.den_loss,
                            entropy: log.policy_entropy,
                            policy_loss: log.ppo.policy_loss,
                            value_loss: log.ppo.value_loss,
                            approx_kl: log.ppo.approx_kl,
                        })?;
                        let done = epoch + 1;
                        let due = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
                        if let Some(p) = path.as_ref().filter(|_| due || done == s1.epochs) {
                            checkpoint::save_agent(p, &agent, done)?;
                        }
                    }
                    info!("stage one var {} done", i + 1);
                    Ok(agent)
                })
                .collect()
        })
    }

    fn train_stage2(
        &self,
        ctxs: &[SeriesContext],
        frozen: &mut Stage1Frozen,
        s2: &Stage2Config,
    ) -> Result<Stage2Agent> {
        let cfg = &self.config;
        let mut init_rng = stream(cfg.seed, "stage2.init", &[]);
        let mut agent = Stage2Agent::new(&mut init_rng, ctxs.len(), s2)?;
        let path = self.ckpt_path("stage2.ckpt");
        let mut start = 0;
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            start = checkpoint::load_stage2(p, &mut agent, &mut frozen.agents)?;
            for (i, c) in ctxs.iter().enumerate() {
                frozen.refresh(c, i)?;
            }
            info!("resuming stage two at epoch {}", start);
        }
        if self.resume_only && start < s2.epochs {
            return Err(self.missing("stage two"));
        }
        for epoch in start..s2.epochs {
            let mut rng = stream(cfg.seed, "stage2.epoch", &[epoch as u64]);
            let log = train_stage2_epoch(ctxs, frozen, &mut agent, s2, epoch, &mut rng)?;
            self.record(&Stage2Record {
                event: "epoch",
                stage: 2,
                epoch,
                mean_reward: log.mean_reward,
                relative_gain: &log.relative_gain,
                unfroze: &log.unfroze,
                den_loss: &log.den_loss,
                entropy: log.ppo.entropy,
                policy_loss: log.ppo.policy_loss,
                value_loss: log.ppo.value_loss,
            })?;
            let done = epoch + 1;
            let due = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if let Some(p) = path.as_ref().filter(|_| due || done == s2.epochs) {
                checkpoint::save_stage2(p, &agent, &frozen.agents, done)?;
            }
        }
        Ok(agent)
    }

    fn fit_hmm(
        &self,
        data: &Prepared,
        pool: &rayon::ThreadPool,
    ) -> Result<(Vec<HmmParams>, ModelOutput)> {
        let cfg = &self.config;
        let saved = match self.ckpt_path("hmm.ckpt") {
            Some(p) if p.exists() => Some(checkpoint::load_hmm(&p)?),
            _ if self.resume_only => return Err(self.missing("hmm")),
            _ => None,
        };
        if let Some(s) = &saved {
            if s.len() != data.n_vars() || s.iter().any(|p| p.n_states() != cfg.n_states) {
                return Err(Error::Config(format!(
                    "hmm checkpoint holds {} variables, dataset has {}",
                    s.len(),
                    data.n_vars()
                )));
            }
        }
        let fits = pool.install(|| {
            (0..data.n_vars())
                .into_par_iter()
                .map(|i| {
                    let x = data.dataset.series(i);
                    let params = match &saved {
                        Some(s) => s[i].clone(),
                        None => {
                            let mut rng = stream(cfg.seed, "hmm", &[i as u64]);
                            fit_em(&x[..data.split], cfg.n_states, &cfg.hmm, &mut rng)?.params
                        }
                    };
                    let states = viterbi(&params, &x);
                    let forecasts = forecast_series(&params, &x);
                    Ok((params, states, forecasts))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut params = Vec::new();
        let mut states = Vec::new();
        let mut forecasts = Vec::new();
        for (p, s, f) in fits {
            params.push(p);
            states.push(s);
            forecasts.push(f);
        }
        Ok((
            params,
            ModelOutput {
                name: "HMM".into(),
                states: Some(states),
                forecasts,
            },
        ))
    }
}

fn output_from(
    name: String,
    data: &Prepared,
    decoded: impl Iterator<Item = (Vec<usize>, Vec<f64>)>,
) -> ModelOutput {
    let mut states = Vec::new();
    let mut forecasts = Vec::new();
    for (i, (s, f)) in decoded.enumerate() {
        states.push(s);
        forecasts.push(f.into_iter().map(|v| data.scalers[i].invert(v)).collect());
    }
    ModelOutput {
        name,
        states: Some(states),
        forecasts,
    }
}

/// Scores a model on the test split, aligning states on the training split.
pub fn score(output: &ModelOutput, data: &Prepared, t0: usize) -> Result<MetricsReport> {
    let n = data.len();
    let truth: Vec<Option<Vec<usize>>> = (0..data.n_vars())
        .map(|i| data.dataset.state_series(i))
        .collect();
    let values: Vec<Vec<f64>> = (0..data.n_vars()).map(|i| data.dataset.series(i)).collect();
    let vars: Vec<VarEvaluation<'_>> = (0..data.n_vars())
        .map(|i| VarEvaluation {
            name: &data.dataset.names()[i],
            states: output
                .states
                .as_ref()
                .map(|s| s[i].as_slice())
                .unwrap_or(&[]),
            truth_states: if output.states.is_some() {
                truth[i].as_deref()
            } else {
                None
            },
            forecasts: &output.forecasts[i],
            values: &values[i],
        })
        .collect();
    evaluate(
        &output.name,
        &vars,
        data.dataset.n_states(),
        t0..data.split,
        data.split..n,
    )
}

/// Sweepable reward keys.
pub const SWEEP_KEYS: [&str; 6] = ["lambda1", "lambda2", "lambda3", "lambda4", "alpha", "rho_c"];

pub fn set_sweep_value(cfg: &mut TrainConfig, key: &str, value: f64) -> Result<()> {
    for reward in [&mut cfg.stage1.reward, &mut cfg.stage2.reward] {
        match key {
            "lambda1" => reward.lambda1 = value,
            "lambda2" => reward.lambda2 = value,
            "lambda3" => reward.lambda3 = value,
            "lambda4" => reward.lambda4 = value,
            "alpha" => reward.alpha = value,
            "rho_c" => reward.rho_c = value,
            other => {
                return Err(Error::Argument(format!(
                    "cannot sweep `{other}` (known: {})",
                    SWEEP_KEYS.join(", ")
                )))
            }
        }
    }
    Ok(())
}

/// One full training and evaluation per value.
pub fn sensitivity_sweep(
    base: &TrainConfig,
    data: &Prepared,
    key: &str,
    values: &[f64],
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut probe = base.clone();
    set_sweep_value(&mut probe, key, 0.0)?;
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            set_sweep_value(&mut cfg, key, v)?;
            let trained = Trainer::new(cfg).run(data)?;
            Ok((v, score(&trained.final_output, data, base.stage1.t0)?))
        })
        .collect()
}

/// Table of a sweep with one row per value.
pub fn sweep_table(key: &str, rows: &[(f64, MetricsReport)]) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8}\n",
        key, "acc%", "prec%", "rec%", "f1%", "MAE", "MSE"
    );
    for (v, r) in rows {
        let a = &r.aggregate;
        out += &format!(
            "{:<10} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>8.4} {:>8.4}\n",
            v,
            100.0 * a.accuracy,
            100.0 * a.precision,
            100.0 * a.recall,
            100.0 * a.f1,
            a.mae,
            a.mse
        );
    }
    out
}
