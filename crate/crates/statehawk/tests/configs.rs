use std::path::PathBuf;

use statehawk::config::{load_sim_config, DataSource, RunConfig};
use statehawk_core::sim::SimConfig;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_sim3_matches_preset() {
    let cfg = load_sim_config(&configs().join("sim3.cfg"), None).unwrap();
    assert_eq!(cfg, SimConfig::three_variable(0));
}

#[test]
fn shipped_run_configs_parse() {
    let rc = RunConfig::load(&configs().join("run_sim3.cfg")).unwrap();
    assert!(matches!(rc.data, Some(DataSource::Simulated(ref s)) if s.n_vars() == 3));
    assert!(!rc.train.stage1_only);

    let rc = RunConfig::load(&configs().join("run_fast1.cfg")).unwrap();
    assert!(rc.train.stage1_only);
    assert!(matches!(rc.data, Some(DataSource::Simulated(ref s)) if s.n_vars() == 3));

    let rc = RunConfig::load(&configs().join("sweep_lambda2.cfg")).unwrap();
    assert_eq!(rc.seeds, vec![0, 1, 2]);
    assert_eq!(rc.sweep_key.as_deref(), Some("reward.lambda2"));
    assert_eq!(rc.sweep_values, vec![0.005, 0.015, 0.05]);
}
