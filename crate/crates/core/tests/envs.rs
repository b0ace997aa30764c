use gea_core::codec::ActionKind;
use gea_core::envs::{
    env_spec, expert_trajectory, forward_kinematics, generate_dataset, measure_reference, random_action,
    random_policy_outcomes, Action, Episode, COLORS, ENV_NAMES, REACHER_COLORS, SHAPES, TEST_SEED_BASE,
};
use gea_core::sft::trajectory::{read_trajectories, ActionRecord};
use gea_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn stored_references_match_measurement() {
    for name in ENV_NAMES {
        let spec = env_spec(name).unwrap();
        let measured = measure_reference(&spec, TEST_SEED_BASE..TEST_SEED_BASE + 200).unwrap();
        let stored = spec.reference.unwrap();
        assert!((measured.random - stored.random).abs() < 1e-12, "{name}");
        assert!((measured.expert - stored.expert).abs() < 1e-12, "{name}");
        assert!(stored.expert >= stored.random);
    }
}

#[test]
fn reset_is_deterministic_and_seed_sensitive() {
    for name in ENV_NAMES {
        let spec = env_spec(name).unwrap();
        let (a, b) = (spec.reset(11), spec.reset(11));
        assert_eq!(a.instruction(), b.instruction());
        assert_eq!(
            a.observation().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.observation().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.observation().len(), spec.obs_dim);
        let differing = (0..100u64)
            .filter(|&s| spec.reset(2 * s).privileged()[..6] != spec.reset(2 * s + 1).privileged()[..6])
            .count();
        assert!(differing >= 90, "{name}: {differing}");
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split(' ').collect()
}

#[test]
fn instructions_follow_the_grammar() {
    let grid = env_spec("gridnav8").unwrap();
    let reacher = env_spec("reacher2").unwrap();
    for seed in 0..200 {
        let i = grid.reset(seed).instruction().to_string();
        let w = words(&i);
        let tail = match w.as_slice() {
            ["go", "to", "the", rest @ ..] | ["pick", "up", "the", rest @ ..] => rest.to_vec(),
            _ => panic!("bad instruction {i}"),
        };
        assert_eq!(tail.len(), 2);
        assert!(COLORS.contains(&tail[0]) && SHAPES.contains(&tail[1]));
        let r = reacher.reset(seed).instruction().to_string();
        let w = words(&r);
        assert!(w.len() == 4 && w[0] == "reach" && w[1] == "the" && w[3] == "target");
        assert!(REACHER_COLORS.contains(&w[2]));
    }
}

#[test]
fn gridnav_expert_solves_every_solvable_seed() {
    let spec = env_spec("gridnav8").unwrap();
    let mut solvable = 0;
    for seed in 0..500 {
        if let Some(t) = expert_trajectory(&spec, seed).unwrap() {
            solvable += 1;
            assert!(t.success, "seed {seed}");
            assert!(t.steps.len() <= spec.max_steps);
        }
    }
    assert!(solvable >= 490);
}

#[test]
fn reacher2_expert_success_at_least_95_percent() {
    let spec = env_spec("reacher2").unwrap();
    let ok = (0..500)
        .filter(|&s| expert_trajectory(&spec, s).unwrap().unwrap().success)
        .count();
    assert!(ok >= 475, "{ok}/500");
}

#[test]
fn random_gridnav_rarely_succeeds() {
    let spec = env_spec("gridnav8").unwrap();
    let outcomes = random_policy_outcomes(&spec, 0..100).unwrap();
    let rate = outcomes.iter().filter(|o| o.success).count() as f64 / 100.0;
    assert!(rate <= 0.2, "{rate}");
}

#[test]
fn rewards_are_bounded_and_done_is_absorbing() {
    for name in ENV_NAMES {
        let spec = env_spec(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let mut ep = spec.reset(seed);
            let mut steps = 0;
            while !ep.is_done() {
                let s = ep.step(&random_action(&spec.space, &mut rng)).unwrap();
                assert!(s.reward.is_finite() && s.reward.abs() <= 2.0);
                assert!(!s.success || s.done);
                steps += 1;
            }
            assert!(steps <= spec.max_steps);
            assert!(matches!(
                ep.step(&random_action(&spec.space, &mut rng)),
                Err(Error::EpisodeDone)
            ));
        }
    }
}

/// End-effector by composing homogeneous 2-D transforms link by link.
fn fk_by_transforms(joints: &[f64]) -> [f64; 2] {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for &t in joints {
        let (s, c) = t.sin_cos();
        let link = [[c, -s, c], [s, c, s], [0.0, 0.0, 1.0]];
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = (0..3).map(|k| m[i][k] * link[k][j]).sum();
            }
        }
        m = next;
    }
    [m[0][2], m[1][2]]
}

#[test]
fn forward_kinematics_matches_transform_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in [2usize, 4, 7] {
        for _ in 0..200 {
            let joints: Vec<f64> = (0..k).map(|_| rand::Rng::gen_range(&mut rng, -3.2..3.2)).collect();
            let a = forward_kinematics(&joints);
            let b = fk_by_transforms(&joints);
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
    for seed in 0..50 {
        if let Episode::Reacher(r) = env_spec("reacher7").unwrap().reset(seed) {
            let b = fk_by_transforms(r.joints());
            assert!((r.end_effector()[0] - b[0]).abs() < 1e-9);
            assert!(r.joints().iter().all(|t| *t > -std::f64::consts::PI && *t <= std::f64::consts::PI));
        }
    }
}

#[test]
fn generated_datasets_round_trip_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["gridnav8", "reacher4"] {
        let spec = env_spec(name).unwrap();
        let p1 = dir.path().join(format!("{name}-a.jsonl"));
        let p2 = dir.path().join(format!("{name}-b.jsonl"));
        let data = generate_dataset(&spec, 10, 0, &p1).unwrap();
        generate_dataset(&spec, 10, 0, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_trajectories(&p1).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back, data);
        for t in &back {
            assert!(t.success);
            for s in &t.steps {
                assert_eq!(s.obs.len(), spec.obs_dim);
                match (&s.action, &spec.space.kind) {
                    (ActionRecord::Discrete { text }, ActionKind::Discrete { actions }) => {
                        assert!(actions.contains(text))
                    }
                    (ActionRecord::Continuous { vec }, ActionKind::Continuous { dim, .. }) => {
                        assert_eq!(vec.len(), *dim)
                    }
                    _ => panic!("action kind mismatch"),
                }
            }
        }
    }
}

#[test]
fn malformed_reacher_action_is_rejected() {
    let mut ep = env_spec("reacher2").unwrap().reset(0);
    assert!(matches!(
        ep.step(&Action::Discrete("forward".into())),
        Err(Error::InvalidAction { .. })
    ));
}
