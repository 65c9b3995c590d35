use proptest::prelude::*;
use statehawk_core::nd::{softmax, Matrix};
use statehawk_core::rng::stream;
use statehawk_core::stage2::{
    confidence_adjust, relative_reward, unfreeze_check, Stage2Config, Stage2Policy,
};

fn small(proj_init: f64) -> Stage2Config {
    Stage2Config {
        t2: 1,
        features: 6,
        gat_heads: 2,
        proj_init,
        ..Stage2Config::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_stochastic(seed in 0u64..1000, obs in prop::collection::vec(-1.0f64..1.0, 18)) {
        let cfg = small(0.5);
        let policy = Stage2Policy::new(&mut stream(seed, "s2", &[]), 3, &cfg).unwrap();
        let d = policy.distribution(&obs).unwrap();
        prop_assert_eq!(d.shape(), (3, 2));
        for i in 0..3 {
            prop_assert!(d.row(i).iter().all(|p| *p > 0.0));
            prop_assert!((d.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_keeps_stage_one_preference(seed in 0u64..1000, obs in prop::collection::vec(-1.0f64..1.0, 18)) {
        let policy = Stage2Policy::new(&mut stream(seed, "s2", &[]), 3, &small(0.0)).unwrap();
        let d = policy.distribution(&obs).unwrap();
        for i in 0..3 {
            let p = &obs[i * 6..i * 6 + 2];
            let want = softmax(p);
            prop_assert!((d.get(i, 0) - want[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn variables_are_exchangeable(seed in 0u64..1000, obs in prop::collection::vec(-1.0f64..1.0, 18)) {
        let policy = Stage2Policy::new(&mut stream(seed, "s2", &[]), 3, &small(0.5)).unwrap();
        let order = [2usize, 0, 1];
        let permuted: Vec<f64> = order.iter().flat_map(|&i| obs[i * 6..(i + 1) * 6].to_vec()).collect();
        let a = policy.distribution(&obs).unwrap();
        let b = policy.distribution(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            for s in 0..2 {
                prop_assert!((a.get(i, s) - b.get(k, s)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn confidence_scales_each_row(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..5), scale in 0.0f64..3.0) {
        let n = rows.len();
        let p = Matrix::from_vec(n, 2, rows.concat()).unwrap();
        let mu: Vec<f64> = (0..n).map(|i| scale * (i + 1) as f64).collect();
        let out = confidence_adjust(&p, &mu).unwrap();
        for i in 0..n {
            for s in 0..2 {
                prop_assert!((out.get(i, s) - mu[i] * p.get(i, s)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn confidence_rejects_wrong_length() {
    let p = Matrix::zeros(3, 2);
    assert!(confidence_adjust(&p, &[1.0, 1.0]).is_err());
}

#[test]
fn unfreeze_latches_after_positive_window() {
    let mut flag = false;
    assert!(!unfreeze_check(&[1.0, 1.0], 3, &mut flag));
    assert!(!unfreeze_check(&[5.0, -1.0, -1.0, -1.0], 3, &mut flag));
    assert!(unfreeze_check(&[-1.0, 0.5, 0.5, 0.5], 3, &mut flag));
    assert!(unfreeze_check(&[-9.0, -9.0, -9.0], 3, &mut flag));
    assert!(flag);
}

#[test]
fn relative_reward_is_gain_over_stage_one() {
    assert_eq!(relative_reward(0.75, 0.25), 0.5);
    assert_eq!(relative_reward(0.1, 0.3), 0.1 - 0.3);
}
