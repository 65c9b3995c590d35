use statehawk::pipeline::{ModelOutput, Prepared, TrainConfig, Trainer};
use statehawk_core::sim::{generate, SimConfig};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.baseline.hidden = 8;
    cfg.baseline.fit.steps = 10;
    cfg.stage1.hidden = 8;
    cfg.stage1.episode_len = 60;
    cfg.stage1.epochs = 2;
    cfg.stage1.den_fit.steps = 2;
    cfg.stage1.ppo.minibatch = 32;
    cfg.stage2.hidden = 8;
    cfg.stage2.episode_len = 60;
    cfg.stage2.epochs = 1;
    cfg.stage2.features = 4;
    cfg.stage2.gat_heads = 1;
    cfg.stage2.den_fit.steps = 2;
    cfg.stage2.ppo.minibatch = 32;
    cfg.hmm.max_iters = 10;
    cfg
}

fn data() -> Prepared {
    let mut sim = SimConfig::three_variable(1);
    sim.length = 400;
    Prepared::new(generate(&sim).unwrap(), 0.8).unwrap()
}

fn same(a: &ModelOutput, b: &ModelOutput) {
    assert_eq!(a.name, b.name);
    assert_eq!(a.states, b.states);
    for (x, y) in a.forecasts.iter().flatten().zip(b.forecasts.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let first = Trainer::new(tiny()).with_output(dir.path(), None).run(&data).unwrap();
    let again = Trainer::new(tiny()).run(&data).unwrap();
    let loaded = Trainer::new(tiny())
        .with_output(dir.path(), None)
        .resume_only()
        .run(&data)
        .unwrap();
    for other in [&again, &loaded] {
        same(&first.final_output, &other.final_output);
        same(&first.stage1_output, &other.stage1_output);
        same(&first.baseline_output, &other.baseline_output);
        same(&first.hmm_output, &other.hmm_output);
    }
    assert_eq!(first.stage1, loaded.stage1);
}

#[test]
fn resume_only_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = Trainer::new(tiny())
        .with_output(dir.path(), None)
        .resume_only()
        .run(&data())
        .unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");
}

#[test]
fn stage_one_only_skips_stage_two() {
    let mut cfg = tiny();
    cfg.stage1_only = true;
    let out = Trainer::new(cfg).run(&data()).unwrap();
    assert!(out.stage2.is_none());
    assert_eq!(out.final_output.states, out.stage1_output.states);
}
