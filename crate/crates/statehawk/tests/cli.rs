use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn statehawk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statehawk"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_SIM: &str = "\
n_vars = 2
n_states = 2
length = 300
eta = 0.2
adjacency = 0110
var1.pattern = 1
var1.duration.1 = geometric(0.05)
var1.duration.2 = poisson(20)
var1.ar_coeffs.1 = 1
var1.ar_coeffs.2 = -0.9
var1.sigma = 0.1
var2.pattern = 2
var2.duration.1 = geometric(0.05)
var2.duration.2 = poisson(10)
var2.ar_coeffs.1 = 1
var2.ar_coeffs.2 = -0.9
var2.sigma = 0.1
";

const TINY_TRAIN: &str = "\
sim_config = sim.cfg
baseline.hidden = 8
baseline.steps = 10
hidden = 8
episode_len = 60
stage1.epochs = 2
stage2.epochs = 1
stage2.features = 4
stage2.gat_heads = 1
stage2.t_m = 20
den.steps = 2
den.batch = 32
ppo.minibatch = 32
hmm.max_iters = 10
";

#[test]
fn simulate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sim.cfg"), TINY_SIM).unwrap();
    for name in ["a.csv", "b.csv"] {
        let o = statehawk(dir.path(), &["simulate", "--config", "sim.cfg", "--seed", "7", "--out", name]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = statehawk(dir.path(), &["simulate", "--config", "sim.cfg", "--seed", "8", "--out", "c.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.csv")).unwrap());
    let header = String::from_utf8_lossy(&a).lines().next().unwrap().to_string();
    assert!(header.starts_with("t,"), "{header}");
}

#[test]
fn simulate_preset_writes_requested_length() {
    let dir = tempfile::tempdir().unwrap();
    let o = statehawk(dir.path(), &["simulate", "--preset", "fast1", "--out", "f.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(dir.path().join("f.csv")).unwrap().lines().count();
    assert!(rows > 100);
}

#[test]
fn missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let broken: String = TINY_SIM.lines().filter(|l| !l.starts_with("adjacency")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("sim.cfg"), broken).unwrap();
    let o = statehawk(dir.path(), &["simulate", "--config", "sim.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("adjacency"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_ablation_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sim.cfg"), format!("{TINY_SIM}colour = red\n")).unwrap();
    let o = statehawk(dir.path(), &["simulate", "--config", "sim.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    fs::write(dir.path().join("sim.cfg"), TINY_SIM).unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_TRAIN).unwrap();
    let o = statehawk(dir.path(), &["train", "--config", "run.cfg", "--ablate", "no_such_thing"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_thing"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_reuses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sim.cfg"), TINY_SIM).unwrap();
    fs::write(dir.path().join("run.cfg"), TINY_TRAIN).unwrap();
    let o = statehawk(dir.path(), &["train", "--config", "run.cfg", "--seed", "3", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.cfg", "data.csv", "train.ndjson", "metrics.ndjson", "metrics.txt", "plot_DRL-STAF.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.txt")).unwrap();
    for model in ["DRL-STAF", "DL-F", "HMM"] {
        assert!(metrics.contains(model), "{metrics}");
    }

    let o = statehawk(dir.path(), &["eval", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.join("eval").join("metrics.txt")).unwrap(),
        metrics
    );

    let o = statehawk(dir.path(), &["eval", "missing_run"]);
    assert!(!o.status.success());
}
