//! Plain-text checkpoint format.
//!
//! ```text
//! STATEHAWK-CKPT v1
//! meta <key> <value>
//! tensor <name> <d1>x<d2>...
//! <values separated by spaces>
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save/load cycle is
//! exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use statehawk_core::emission::BaselineModel;
use statehawk_core::hmm::HmmParams;
use statehawk_core::nd::{AdamConfig, AdamState, Matrix, ParamStore, Tensor};
use statehawk_core::stage1::VariableAgent;
use statehawk_core::stage2::Stage2Agent;

use crate::{Error, Result};

pub const MAGIC: &str = "STATEHAWK-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint `{key}` = `{raw}` is malformed")))
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        self.tensors.absorb_prefixed(prefix, store);
    }

    pub fn store(&self, prefix: &str) -> ParamStore {
        self.tensors.extract_prefixed(prefix)
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &AdamState) {
        self.put_meta(&format!("{prefix}step"), adam.step);
        self.put_store(&format!("{prefix}m."), &adam.m);
        self.put_store(&format!("{prefix}v."), &adam.v);
    }

    pub fn adam(&self, prefix: &str, config: AdamConfig) -> Result<AdamState> {
        Ok(AdamState {
            config,
            step: self.meta(&format!("{prefix}step"))?,
            m: self.store(&format!("{prefix}m.")),
            v: self.store(&format!("{prefix}v.")),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in self.tensors.iter() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", shape.join("x"));
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out += &values.join(" ");
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(parse_err(path, 1, format!("missing `{MAGIC}` header"))),
        }
        let mut ck = Checkpoint::new();
        while let Some((n, line)) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    ck.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name), Some(shape)) => {
                    let shape: Vec<usize> = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| d.parse().map_err(|_| parse_err(path, n + 1, "bad shape")))
                            .collect::<Result<_>>()?
                    };
                    let (vn, values) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, n + 2, "tensor without values"))?;
                    let data: Vec<f64> = values
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| parse_err(path, vn + 1, "bad value")))
                        .collect::<Result<_>>()?;
                    let t = Tensor::new(shape, data)
                        .map_err(|e| parse_err(path, vn + 1, e.to_string()))?;
                    ck.tensors
                        .insert(name, t)
                        .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
                }
                _ => return Err(parse_err(path, n + 1, format!("unexpected `{line}`"))),
            }
        }
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_text()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn restore(target: &mut ParamStore, source: ParamStore, what: &str) -> Result<()> {
    if !source.same_layout(target) {
        return Err(Error::Config(format!(
            "checkpoint {what} does not match the configured architecture"
        )));
    }
    *target = source;
    Ok(())
}

pub fn save_baselines(path: &Path, models: &[BaselineModel]) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_meta("module", "baseline");
    ck.put_meta("n_vars", models.len());
    for (i, m) in models.iter().enumerate() {
        ck.put_store(&format!("var{}.", i + 1), &m.net.params);
    }
    ck.save(path)
}

pub fn load_baselines(path: &Path, n_vars: usize, t0: usize, hidden: usize) -> Result<Vec<BaselineModel>> {
    let ck = Checkpoint::load(path)?;
    let stored: usize = ck.meta("n_vars")?;
    if stored != n_vars {
        return Err(Error::Config(format!(
            "baseline checkpoint has {stored} variables, dataset {n_vars}"
        )));
    }
    let mut rng = statehawk_core::rng::stream(0, "restore", &[]);
    (0..n_vars)
        .map(|i| {
            let mut m = BaselineModel::new(&mut rng, t0, hidden)?;
            restore(&mut m.net.params, ck.store(&format!("var{}.", i + 1)), "baseline")?;
            Ok(m)
        })
        .collect()
}

fn put_agent(ck: &mut Checkpoint, prefix: &str, agent: &VariableAgent) {
    ck.put_store(&format!("{prefix}den."), &agent.den.params);
    ck.put_store(&format!("{prefix}online."), &agent.online);
    ck.put_adam(&format!("{prefix}den_adam."), &agent.den_adam);
    ck.put_store(&format!("{prefix}policy."), &agent.policy.params);
    ck.put_store(&format!("{prefix}value."), &agent.value.params);
    ck.put_adam(&format!("{prefix}actor_adam."), &agent.opt.actor);
    ck.put_adam(&format!("{prefix}critic_adam."), &agent.opt.critic);
}

fn take_agent(ck: &Checkpoint, prefix: &str, agent: &mut VariableAgent) -> Result<()> {
    restore(&mut agent.den.params, ck.store(&format!("{prefix}den.")), "emission network")?;
    restore(&mut agent.online, ck.store(&format!("{prefix}online.")), "emission network")?;
    restore(&mut agent.policy.params, ck.store(&format!("{prefix}policy.")), "policy")?;
    restore(&mut agent.value.params, ck.store(&format!("{prefix}value.")), "critic")?;
    agent.den_adam = ck.adam(&format!("{prefix}den_adam."), agent.den_adam.config)?;
    agent.opt.actor = ck.adam(&format!("{prefix}actor_adam."), agent.opt.actor.config)?;
    agent.opt.critic = ck.adam(&format!("{prefix}critic_adam."), agent.opt.critic.config)?;
    Ok(())
}

pub fn save_agent(path: &Path, agent: &VariableAgent, epochs_done: usize) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_meta("module", "stage1");
    ck.put_meta("epochs_done", epochs_done);
    put_agent(&mut ck, "", agent);
    ck.save(path)
}

/// Restores `agent` in place and returns the number of completed epochs.
pub fn load_agent(path: &Path, agent: &mut VariableAgent) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    take_agent(&ck, "", agent)?;
    ck.meta("epochs_done")
}

pub fn save_stage2(
    path: &Path,
    agent: &Stage2Agent,
    stage1: &[VariableAgent],
    epochs_done: usize,
) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_meta("module", "stage2");
    ck.put_meta("epochs_done", epochs_done);
    ck.put_meta("n_vars", stage1.len());
    let flags: Vec<String> = agent.unfrozen.iter().map(|f| u8::from(*f).to_string()).collect();
    ck.put_meta("unfrozen", flags.join(","));
    ck.put_store("policy.", &agent.policy.params);
    ck.put_store("value.", &agent.value.params);
    ck.put_adam("actor_adam.", &agent.opt.actor);
    ck.put_adam("critic_adam.", &agent.opt.critic);
    for (i, a) in stage1.iter().enumerate() {
        put_agent(&mut ck, &format!("var{}.", i + 1), a);
    }
    ck.save(path)
}

/// Restores stage two and the stage-one models it refined; returns the
/// number of completed epochs.
pub fn load_stage2(path: &Path, agent: &mut Stage2Agent, stage1: &mut [VariableAgent]) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    let n: usize = ck.meta("n_vars")?;
    if n != stage1.len() {
        return Err(Error::Config(format!(
            "stage-two checkpoint has {n} variables, expected {}",
            stage1.len()
        )));
    }
    restore(&mut agent.policy.params, ck.store("policy."), "stage-two policy")?;
    restore(&mut agent.value.params, ck.store("value."), "stage-two critic")?;
    agent.opt.actor = ck.adam("actor_adam.", agent.opt.actor.config)?;
    agent.opt.critic = ck.adam("critic_adam.", agent.opt.critic.config)?;
    let flags: String = ck.meta("unfrozen")?;
    agent.unfrozen = flags.split(',').map(|f| f == "1").collect();
    if agent.unfrozen.len() != n {
        return Err(Error::Config("stage-two unfreeze flags are malformed".into()));
    }
    for (i, a) in stage1.iter_mut().enumerate() {
        take_agent(&ck, &format!("var{}.", i + 1), a)?;
    }
    ck.meta("epochs_done")
}

pub fn save_hmm(path: &Path, params: &[HmmParams]) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_meta("module", "hmm");
    ck.put_meta("n_vars", params.len());
    for (i, p) in params.iter().enumerate() {
        let m = p.n_states();
        let mut store = ParamStore::new();
        store.insert("initial", Tensor::new(vec![m], p.initial.clone())?)?;
        store.insert("transition", Tensor::new(vec![m, m], p.transition.data().to_vec())?)?;
        store.insert("means", Tensor::new(vec![m], p.means.clone())?)?;
        store.insert("variances", Tensor::new(vec![m], p.variances.clone())?)?;
        ck.put_store(&format!("var{}.", i + 1), &store);
    }
    ck.save(path)
}

pub fn load_hmm(path: &Path) -> Result<Vec<HmmParams>> {
    let ck = Checkpoint::load(path)?;
    let n: usize = ck.meta("n_vars")?;
    (0..n)
        .map(|i| {
            let s = ck.store(&format!("var{}.", i + 1));
            let get = |k: &str| -> Result<Vec<f64>> { Ok(s.require(k)?.data().to_vec()) };
            let means = get("means")?;
            let m = means.len();
            let p = HmmParams {
                initial: get("initial")?,
                transition: Matrix::from_vec(m, m, get("transition")?)?,
                means,
                variances: get("variances")?,
            };
            p.validate()?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statehawk_core::rng::stream;
    use statehawk_core::stage1::Stage1Config;

    #[test]
    fn text_round_trip_is_exact() {
        let mut ck = Checkpoint::new();
        ck.put_meta("epochs_done", 7);
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2, 2], vec![0.1, -1e-300, 3.0, f64::MAX]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![0], vec![]).unwrap()).unwrap();
        ck.put_store("x.", &s);
        let back = Checkpoint::parse(&ck.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta::<usize>("epochs_done").unwrap(), 7);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::parse("hello\n", Path::new("mem")).is_err());
        assert!(Checkpoint::parse(&format!("{MAGIC}\ngarbage line\n"), Path::new("mem")).is_err());
    }

    #[test]
    fn agent_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = Stage1Config {
            hidden: 8,
            ..Stage1Config::default()
        };
        let a = VariableAgent::new(&mut stream(1, "a", &[]), &cfg).unwrap();
        save_agent(&path, &a, 12).unwrap();
        let mut b = VariableAgent::new(&mut stream(2, "a", &[]), &cfg).unwrap();
        assert_eq!(load_agent(&path, &mut b).unwrap(), 12);
        assert_eq!(a, b);
        let wrong = Stage1Config {
            hidden: 9,
            ..cfg
        };
        let mut c = VariableAgent::new(&mut stream(2, "a", &[]), &wrong).unwrap();
        assert!(load_agent(&path, &mut c).is_err());
    }
}
