//! Flat `key = value` config files for the simulator and for runs.
//!
//! Lines starting with `#` are comments. Every key must be known; unknown or
//! repeated keys are errors. States and variables are 1-based in keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use statehawk_core::sim::{DurationDist, SimConfig, TransitionTensor, VariableConfig};

use crate::pipeline::{parse_ablations, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct KvFile {
    path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: "empty key".into(),
                });
            }
            if let Some((_, first)) = entries.insert(k.clone(), (v, n + 1)) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: format!("`{k}` already set on line {first}"),
                });
            }
        }
        Ok(Self {
            path: path.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Error::Parse {
                path: self.path.clone(),
                line,
                msg: format!("`{key}`: cannot parse `{v}`"),
            }),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing key `{key}`", self.path)))
    }

    /// Overwrites `slot` when the key is present.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Parse {
                    path: self.path.clone(),
                    line,
                    msg: format!("`{key}`: cannot parse list `{v}`"),
                }),
        }
    }

    fn bad(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg,
        }
    }

    /// Fails if any key was left unread.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let (first, (_, line)) = self.entries.iter().next().expect("nonempty");
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::Parse {
            path: self.path.clone(),
            line: *line,
            msg: format!("unknown key `{first}` (unused: {})", keys.join(", ")),
        })
    }
}

/// `geometric(p)`, `poisson(lambda)` (one plus Poisson) or `fixed(d)`.
pub fn parse_duration(s: &str) -> Option<DurationDist> {
    let (kind, rest) = s.trim().split_once('(')?;
    let arg = rest.strip_suffix(')')?.trim();
    match kind.trim() {
        "geometric" => arg.parse().ok().map(DurationDist::Geometric),
        "poisson" => arg.parse().ok().map(DurationDist::OnePlusPoisson),
        "fixed" => arg.parse().ok().map(DurationDist::Fixed),
        _ => None,
    }
}

pub fn format_duration(d: &DurationDist) -> String {
    match d {
        DurationDist::Geometric(p) => format!("geometric({p})"),
        DurationDist::OnePlusPoisson(l) => format!("poisson({l})"),
        DurationDist::Fixed(n) => format!("fixed({n})"),
    }
}

fn preset(name: &str, seed: u64) -> Result<SimConfig> {
    Ok(match name {
        "sim3" => SimConfig::three_variable(seed),
        "fast1" => SimConfig::fast_switching(1, seed)?,
        "fast2" => SimConfig::fast_switching(2, seed)?,
        "sim10" => SimConfig::ten_variable(seed),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: sim3, fast1, fast2, sim10)"
            )))
        }
    })
}

/// Reads simulator keys under `prefix` (empty for a standalone file).
pub fn parse_sim(kv: &mut KvFile, prefix: &str, seed: Option<u64>) -> Result<SimConfig> {
    let key = |k: &str| format!("{prefix}{k}");
    let file_seed: Option<u64> = kv.take(&key("seed"))?;
    let seed = seed.or(file_seed).unwrap_or(0);
    let base = match kv.take::<String>(&key("preset"))? {
        Some(name) => Some(preset(&name, seed)?),
        None => None,
    };
    let n_vars: usize = match (&base, kv.take(&key("n_vars"))?) {
        (Some(b), Some(n)) if n != b.n_vars() => {
            return Err(Error::Config(format!(
                "{} sets n_vars = {n} but the preset has {}",
                key("n_vars"),
                b.n_vars()
            )))
        }
        (Some(b), _) => b.n_vars(),
        (None, Some(n)) => n,
        (None, None) => kv.require(&key("n_vars"))?,
    };
    let n_states: usize = match &base {
        Some(b) => b.n_states,
        None => kv.require(&key("n_states"))?,
    };
    if base.is_some() && kv.contains(&key("n_states")) {
        let m: usize = kv.require(&key("n_states"))?;
        if m != n_states {
            return Err(Error::Config("presets are two-state".into()));
        }
    }
    let mut cfg = match base {
        Some(b) => b,
        None => SimConfig {
            n_states,
            length: kv.require(&key("length"))?,
            eta: kv.require(&key("eta"))?,
            adjacency: Vec::new(),
            vars: Vec::new(),
            seed,
        },
    };
    kv.set(&key("length"), &mut cfg.length)?;
    kv.set(&key("eta"), &mut cfg.eta)?;
    let adj_key = key("adjacency");
    match kv.take_raw(&adj_key) {
        Some((v, line)) => {
            let bits: Vec<char> = v.chars().filter(|c| !c.is_whitespace()).collect();
            if bits.len() != n_vars * n_vars || bits.iter().any(|c| *c != '0' && *c != '1') {
                return Err(kv.bad(
                    line,
                    format!("`{adj_key}` needs {} characters of 0/1", n_vars * n_vars),
                ));
            }
            cfg.adjacency = bits.iter().map(|c| *c == '1').collect();
        }
        None if cfg.adjacency.is_empty() => {
            return Err(Error::Config(format!("missing key `{adj_key}`")))
        }
        None => {}
    }
    let have_vars = !cfg.vars.is_empty();
    for i in 0..n_vars {
        let vk = |k: &str| key(&format!("var{}.{k}", i + 1));
        let transition = match (kv.take::<u8>(&vk("pattern"))?, kv.take_list::<f64>(&vk("psi"))?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!(
                    "{} and {} exclude each other",
                    vk("pattern"),
                    vk("psi")
                )))
            }
            (Some(p), None) => Some(TransitionTensor::pattern(p)?),
            (None, Some(psi)) => Some(TransitionTensor::new(n_states, psi)?),
            (None, None) if have_vars => None,
            (None, None) => {
                return Err(Error::Config(format!(
                    "missing key `{}` (or `{}`)",
                    vk("pattern"),
                    vk("psi")
                )))
            }
        };
        let mut durations = Vec::with_capacity(n_states);
        let mut ar = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let dk = vk(&format!("duration.{}", s + 1));
            let d = match kv.take_raw(&dk) {
                Some((v, line)) => Some(parse_duration(&v).ok_or_else(|| {
                    kv.bad(line, format!("`{dk}`: expected geometric(p), poisson(l) or fixed(d)"))
                })?),
                None if have_vars => None,
                None => return Err(Error::Config(format!("missing key `{dk}`"))),
            };
            durations.push(d);
            let ak = vk(&format!("ar_coeffs.{}", s + 1));
            let a = match kv.take_list::<f64>(&ak)? {
                Some(a) => Some(a),
                None if have_vars => None,
                None => return Err(Error::Config(format!("missing key `{ak}`"))),
            };
            ar.push(a);
        }
        let sigma: Option<f64> = match kv.take(&vk("sigma"))? {
            Some(s) => Some(s),
            None if have_vars => None,
            None => Some(kv.require(&vk("sigma"))?),
        };
        if have_vars {
            let var = &mut cfg.vars[i];
            if let Some(t) = transition {
                var.transition = t;
            }
            for (s, (d, a)) in durations.into_iter().zip(ar).enumerate() {
                if let Some(d) = d {
                    var.durations[s] = d;
                }
                if let Some(a) = a {
                    var.ar[s] = a;
                }
            }
            if let Some(s) = sigma {
                var.sigma = s;
            }
        } else {
            cfg.vars.push(VariableConfig {
                transition: transition.expect("required above"),
                durations: durations.into_iter().map(|d| d.expect("required")).collect(),
                ar: ar.into_iter().map(|a| a.expect("required")).collect(),
                sigma: sigma.expect("required"),
            });
        }
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_sim_config(path: &Path, seed: Option<u64>) -> Result<SimConfig> {
    let mut kv = KvFile::load(path)?;
    let cfg = parse_sim(&mut kv, "", seed)?;
    kv.finish()?;
    Ok(cfg)
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Simulated(SimConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    pub out: PathBuf,
    /// Seeds for multi-seed commands; defaults to the single run seed.
    pub seeds: Vec<u64>,
    pub sweep_key: Option<String>,
    pub sweep_values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: PathBuf::from("runs/default"),
            seeds: vec![0],
            sweep_key: None,
            sweep_values: Vec::new(),
        }
    }
}

/// Sets a field shared by both stages.
fn both<T: FromStr + Copy>(kv: &mut KvFile, key: &str, a: &mut T, b: &mut T) -> Result<()> {
    if let Some(v) = kv.take::<T>(key)? {
        *a = v;
        *b = v;
    }
    Ok(())
}

/// Reads the training keys of a run config into `t`.
pub fn parse_train(kv: &mut KvFile, t: &mut TrainConfig) -> Result<()> {
    kv.set("seed", &mut t.seed)?;
    kv.set("n_states", &mut t.n_states)?;
    kv.set("train_fraction", &mut t.train_fraction)?;
    kv.set("threads", &mut t.threads)?;
    kv.set("checkpoint_every", &mut t.checkpoint_every)?;
    kv.set("stage1_only", &mut t.stage1_only)?;
    if let Some(list) = kv.take::<String>("ablate")? {
        t.ablations = parse_ablations(&list)?;
    }
    kv.set("baseline.hidden", &mut t.baseline.hidden)?;
    kv.set("baseline.steps", &mut t.baseline.fit.steps)?;
    kv.set("baseline.batch", &mut t.baseline.fit.batch)?;
    kv.set("baseline.lr", &mut t.baseline.lr)?;

    let (s1, s2) = (&mut t.stage1, &mut t.stage2);
    kv.set("t0", &mut s1.t0)?;
    kv.set("t1", &mut s1.t1)?;
    kv.set("t2", &mut s2.t2)?;
    both(kv, "episode_len", &mut s1.episode_len, &mut s2.episode_len)?;
    kv.set("stage1.epochs", &mut s1.epochs)?;
    kv.set("stage2.epochs", &mut s2.epochs)?;
    both(kv, "hidden", &mut s1.hidden, &mut s2.hidden)?;
    kv.set("e_clip", &mut s1.e_clip)?;
    both(kv, "tau", &mut s1.tau, &mut s2.tau)?;
    both(kv, "den.steps", &mut s1.den_fit.steps, &mut s2.den_fit.steps)?;
    both(kv, "den.batch", &mut s1.den_fit.batch, &mut s2.den_fit.batch)?;
    kv.set("den.lr", &mut s1.den_lr)?;
    kv.set("stage2.features", &mut s2.features)?;
    kv.set("stage2.gat_heads", &mut s2.gat_heads)?;
    kv.set("stage2.proj_init", &mut s2.proj_init)?;
    kv.set("stage2.t_m", &mut s2.t_m)?;
    kv.set("stage2.unfreeze", &mut s2.unfreeze)?;

    kv.set("reward.lambda2", &mut s1.reward.lambda2)?;
    kv.set("stage2.lambda2", &mut s2.reward.lambda2)?;
    let (r1, r2) = (&mut s1.reward, &mut s2.reward);
    both(kv, "reward.lambda1", &mut r1.lambda1, &mut r2.lambda1)?;
    both(kv, "reward.lambda3", &mut r1.lambda3, &mut r2.lambda3)?;
    both(kv, "reward.lambda4", &mut r1.lambda4, &mut r2.lambda4)?;
    both(kv, "reward.alpha", &mut r1.alpha, &mut r2.alpha)?;
    both(kv, "reward.rho_c", &mut r1.rho_c, &mut r2.rho_c)?;
    let (c1, c2) = (&mut s1.screen, &mut s2.screen);
    both(kv, "screen.k_sup", &mut c1.k_sup, &mut c2.k_sup)?;
    both(kv, "screen.phi_h", &mut c1.phi_h, &mut c2.phi_h)?;
    both(kv, "screen.phi_l", &mut c1.phi_l, &mut c2.phi_l)?;
    let (p1, p2) = (&mut s1.ppo, &mut s2.ppo);
    both(kv, "ppo.gamma", &mut p1.gamma, &mut p2.gamma)?;
    both(kv, "ppo.lambda", &mut p1.lambda_gae, &mut p2.lambda_gae)?;
    both(kv, "ppo.clip", &mut p1.clip_eps, &mut p2.clip_eps)?;
    both(kv, "ppo.entropy", &mut p1.entropy_beta, &mut p2.entropy_beta)?;
    both(kv, "ppo.epochs", &mut p1.ppo_epochs, &mut p2.ppo_epochs)?;
    both(kv, "ppo.minibatch", &mut p1.minibatch, &mut p2.minibatch)?;
    both(kv, "ppo.actor_lr", &mut p1.actor_lr, &mut p2.actor_lr)?;
    both(kv, "ppo.critic_lr", &mut p1.critic_lr, &mut p2.critic_lr)?;
    kv.set("hmm.max_iters", &mut t.hmm.max_iters)?;
    kv.set("hmm.tol", &mut t.hmm.tol)?;
    kv.set("hmm.restarts", &mut t.hmm.restarts)?;
    Ok(())
}

impl RunConfig {
    /// Parses a run config; relative paths resolve against `base_dir`.
    pub fn parse(kv: &mut KvFile, base_dir: &Path) -> Result<Self> {
        let mut rc = RunConfig::default();
        parse_train(kv, &mut rc.train)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        rc.seeds = kv.take_list("seeds")?.unwrap_or_else(|| vec![rc.train.seed]);
        if let Some(o) = kv.take::<String>("out")? {
            rc.out = resolve(o);
        }
        rc.sweep_key = kv.take("sweep.key")?;
        rc.sweep_values = kv.take_list("sweep.values")?.unwrap_or_default();
        let dataset = kv.take::<String>("dataset")?;
        let sim_file = kv.take::<String>("sim_config")?;
        let inline = kv.has_prefix("sim.");
        rc.data = match (dataset, sim_file, inline) {
            (Some(d), None, false) => Some(DataSource::File(resolve(d))),
            (None, Some(f), false) => Some(DataSource::Simulated(load_sim_config(
                &resolve(f),
                Some(rc.train.seed),
            )?)),
            (None, None, true) => Some(DataSource::Simulated(parse_sim(
                kv,
                "sim.",
                Some(rc.train.seed),
            )?)),
            (None, None, false) => None,
            _ => {
                return Err(Error::Config(
                    "use one of `dataset`, `sim_config` or inline `sim.*` keys".into(),
                ))
            }
        };
        rc.train.validate()?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rc = Self::parse(&mut kv, base)?;
        kv.finish()?;
        Ok(rc)
    }
}

/// Training keys of `t`, in the run-config syntax.
pub fn train_to_text(t: &TrainConfig) -> String {
    let (s1, s2) = (&t.stage1, &t.stage2);
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("seed", t.seed.to_string());
    put("n_states", t.n_states.to_string());
    put("train_fraction", t.train_fraction.to_string());
    put("threads", t.threads.to_string());
    put("checkpoint_every", t.checkpoint_every.to_string());
    put("stage1_only", t.stage1_only.to_string());
    let abl: Vec<&str> = t.ablations.iter().map(|a| a.key()).collect();
    put("ablate", abl.join(","));
    put("baseline.hidden", t.baseline.hidden.to_string());
    put("baseline.steps", t.baseline.fit.steps.to_string());
    put("baseline.batch", t.baseline.fit.batch.to_string());
    put("baseline.lr", t.baseline.lr.to_string());
    put("t0", s1.t0.to_string());
    put("t1", s1.t1.to_string());
    put("t2", s2.t2.to_string());
    put("episode_len", s1.episode_len.to_string());
    put("stage1.epochs", s1.epochs.to_string());
    put("stage2.epochs", s2.epochs.to_string());
    put("hidden", s1.hidden.to_string());
    put("e_clip", s1.e_clip.to_string());
    put("tau", s1.tau.to_string());
    put("den.steps", s1.den_fit.steps.to_string());
    put("den.batch", s1.den_fit.batch.to_string());
    put("den.lr", s1.den_lr.to_string());
    put("stage2.features", s2.features.to_string());
    put("stage2.gat_heads", s2.gat_heads.to_string());
    put("stage2.proj_init", s2.proj_init.to_string());
    put("stage2.t_m", s2.t_m.to_string());
    put("stage2.unfreeze", s2.unfreeze.to_string());
    put("reward.lambda1", s1.reward.lambda1.to_string());
    put("reward.lambda2", s1.reward.lambda2.to_string());
    put("stage2.lambda2", s2.reward.lambda2.to_string());
    put("reward.lambda3", s1.reward.lambda3.to_string());
    put("reward.lambda4", s1.reward.lambda4.to_string());
    put("reward.alpha", s1.reward.alpha.to_string());
    put("reward.rho_c", s1.reward.rho_c.to_string());
    put("screen.k_sup", s1.screen.k_sup.to_string());
    put("screen.phi_h", s1.screen.phi_h.to_string());
    put("screen.phi_l", s1.screen.phi_l.to_string());
    put("ppo.gamma", s1.ppo.gamma.to_string());
    put("ppo.lambda", s1.ppo.lambda_gae.to_string());
    put("ppo.clip", s1.ppo.clip_eps.to_string());
    put("ppo.entropy", s1.ppo.entropy_beta.to_string());
    put("ppo.epochs", s1.ppo.ppo_epochs.to_string());
    put("ppo.minibatch", s1.ppo.minibatch.to_string());
    put("ppo.actor_lr", s1.ppo.actor_lr.to_string());
    put("ppo.critic_lr", s1.ppo.critic_lr.to_string());
    put("hmm.max_iters", t.hmm.max_iters.to_string());
    put("hmm.tol", t.hmm.tol.to_string());
    put("hmm.restarts", t.hmm.restarts.to_string());
    out
}

/// Simulator keys of `cfg`, in the sim-config syntax.
pub fn sim_to_text(cfg: &SimConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n_vars = {}", cfg.n_vars());
    let _ = writeln!(out, "n_states = {}", cfg.n_states);
    let _ = writeln!(out, "length = {}", cfg.length);
    let _ = writeln!(out, "eta = {}", cfg.eta);
    let _ = writeln!(out, "seed = {}", cfg.seed);
    let adj: String = cfg.adjacency.iter().map(|b| if *b { '1' } else { '0' }).collect();
    let _ = writeln!(out, "adjacency = {adj}");
    for (i, v) in cfg.vars.iter().enumerate() {
        let i = i + 1;
        match v.transition.pattern_id() {
            Some(p) => {
                let _ = writeln!(out, "var{i}.pattern = {p}");
            }
            None => {
                let psi: Vec<String> = v.transition.weights().iter().map(|w| w.to_string()).collect();
                let _ = writeln!(out, "var{i}.psi = {}", psi.join(","));
            }
        }
        for (s, d) in v.durations.iter().enumerate() {
            let _ = writeln!(out, "var{i}.duration.{} = {}", s + 1, format_duration(d));
        }
        for (s, a) in v.ar.iter().enumerate() {
            let a: Vec<String> = a.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "var{i}.ar_coeffs.{} = {}", s + 1, a.join(","));
        }
        let _ = writeln!(out, "var{i}.sigma = {}", v.sigma);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_basics() {
        let mut kv = KvFile::parse("# c\na = 1\n b=x y \n", "t").unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 1);
        assert_eq!(kv.take::<String>("b").unwrap().unwrap(), "x y");
        kv.finish().unwrap();
        assert!(KvFile::parse("a = 1\na = 2\n", "t").is_err());
        assert!(KvFile::parse("novalue\n", "t").is_err());
        let kv = KvFile::parse("typo = 1\n", "t").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("typo"), "{err}");
    }

    #[test]
    fn durations_parse() {
        assert_eq!(parse_duration("geometric(0.3)"), Some(DurationDist::Geometric(0.3)));
        assert_eq!(parse_duration("poisson(20)"), Some(DurationDist::OnePlusPoisson(20.0)));
        assert_eq!(parse_duration(" fixed( 200 ) "), Some(DurationDist::Fixed(200)));
        assert_eq!(parse_duration("weibull(2)"), None);
        for d in [DurationDist::Geometric(0.01), DurationDist::Fixed(3)] {
            assert_eq!(parse_duration(&format_duration(&d)), Some(d));
        }
    }

    #[test]
    fn sim_text_round_trip() {
        let cfg = SimConfig::three_variable(11);
        let mut kv = KvFile::parse(&sim_to_text(&cfg), "t").unwrap();
        let back = parse_sim(&mut kv, "", None).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_adjacency_is_named() {
        let text: String = sim_to_text(&SimConfig::three_variable(0))
            .lines()
            .filter(|l| !l.starts_with("adjacency"))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut kv = KvFile::parse(&text, "t").unwrap();
        let err = parse_sim(&mut kv, "", None).unwrap_err().to_string();
        assert!(err.contains("adjacency"), "{err}");
    }

    #[test]
    fn preset_with_overrides() {
        let mut kv = KvFile::parse("preset = sim3\nlength = 300\nvar2.sigma = 0.5\n", "t").unwrap();
        let cfg = parse_sim(&mut kv, "", Some(4)).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg.length, 300);
        assert_eq!(cfg.vars[1].sigma, 0.5);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn train_text_round_trip() {
        let mut t = TrainConfig::default();
        t.stage1.epochs = 7;
        t.stage2.reward.lambda2 = 0.03;
        t.ablations = parse_ablations("no_pairwise,no_screening").unwrap();
        let mut kv = KvFile::parse(&train_to_text(&t), "t").unwrap();
        let mut back = TrainConfig::default();
        parse_train(&mut kv, &mut back).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn run_config_sources() {
        let mut kv = KvFile::parse("dataset = d.csv\nseeds = 0,1,2\n", "t").unwrap();
        let rc = RunConfig::parse(&mut kv, Path::new("/base")).unwrap();
        assert_eq!(rc.data, Some(DataSource::File(PathBuf::from("/base/d.csv"))));
        assert_eq!(rc.seeds, vec![0, 1, 2]);
        let mut kv = KvFile::parse("seed = 3\nsim.preset = fast1\n", "t").unwrap();
        let rc = RunConfig::parse(&mut kv, Path::new(".")).unwrap();
        match rc.data {
            Some(DataSource::Simulated(s)) => assert_eq!(s.seed, 3),
            other => panic!("{other:?}"),
        }
        let mut kv = KvFile::parse("dataset = a\nsim.preset = sim3\n", "t").unwrap();
        assert!(RunConfig::parse(&mut kv, Path::new(".")).is_err());
    }
}
