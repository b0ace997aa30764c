use gea_core::agent::Embodiment;
use gea_core::codec::CodecConfig;
use gea_core::envs::{env_spec, expert_dataset};
use gea_core::policy::{load_checkpoint, PolicyConfig, PolicyModel, Vocabulary};
use gea_core::sft::{
    read_trajectories, sample_batch, sft_loss, train_sft, write_trajectories, SftConfig, SftDataset, SftRun,
};
use gea_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    let config = CodecConfig {
        codebook_size: 8,
        ..CodecConfig::desk()
    };
    Vocabulary::for_codec(&config).unwrap()
}

fn tiny_model(seed: u64) -> PolicyModel {
    let config = PolicyConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        max_len: 64,
        value_hidden: 8,
        value_layers: 2,
        privileged_dim: 8,
        context: 3,
        seed,
    };
    PolicyModel::new(config, vocab()).unwrap()
}

fn dataset(env: &str, name: &str, n: usize, seed: u64) -> SftDataset {
    let spec = env_spec(env).unwrap();
    let v = vocab();
    let emb = Embodiment::new(spec.clone(), &v, None).unwrap();
    SftDataset::from_trajectories(name, &expert_dataset(&spec, n, seed).unwrap(), &emb, &v).unwrap()
}

fn quick_config() -> SftConfig {
    SftConfig {
        updates: 40,
        batch_size: 4,
        log_every: 10,
        eval_every: 0,
        ..SftConfig::desk()
    }
}

#[test]
fn unit_context_gives_one_step_per_sequence() {
    let ds = dataset("gridnav8", "a", 5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = sample_batch(&[ds], &[1.0], 1, 64, &mut rng).unwrap();
    assert!(b.layouts.iter().all(|l| l.groups.len() == 1));
}

#[test]
fn spans_never_exceed_the_context() {
    let ds = dataset("gridnav8", "a", 5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = sample_batch(&[ds], &[1.0], 3, 200, &mut rng).unwrap();
    assert!(b.layouts.iter().all(|l| (1..=3).contains(&l.groups.len())));
    assert!(b.layouts.iter().any(|l| l.groups.len() == 3));
    assert!(b.layouts.iter().any(|l| l.groups.len() < 3));
}

#[test]
fn zero_weight_dataset_is_never_sampled() {
    let a = dataset("gridnav8", "a", 3, 0);
    let b = dataset("gridnav8-sparse", "b", 3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_batch(&[a, b], &[1.0, 0.0], 2, 2000, &mut rng).unwrap();
    assert!(batch.sources.iter().all(|&s| s == 0));
}

#[test]
fn mixture_weights_set_sampling_fractions() {
    let a = dataset("gridnav8", "a", 3, 0);
    let b = dataset("gridnav8-sparse", "b", 3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = sample_batch(&[a, b], &[2.0, 1.0], 1, 10_000, &mut rng).unwrap();
    let frac = batch.sources.iter().filter(|&&s| s == 0).count() as f64 / 10_000.0;
    assert!((0.60..=0.73).contains(&frac), "{frac}");
}

#[test]
fn bad_mixture_weights_are_config_errors() {
    let a = dataset("gridnav8", "a", 2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for w in [vec![0.0], vec![-1.0], vec![1.0, 1.0], vec![f64::NAN]] {
        assert!(matches!(sample_batch(&[a.clone()], &w, 2, 1, &mut rng), Err(Error::Config(_))), "{w:?}");
    }
    assert!(matches!(sample_batch(&[a], &[1.0], 0, 1, &mut rng), Err(Error::Config(_))));
}

#[test]
fn training_reduces_the_loss() {
    let ds = vec![dataset("gridnav8", "a", 8, 0)];
    let mut model = tiny_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let probe = sample_batch(&ds, &[1.0], 3, 64, &mut rng).unwrap();
    let before = sft_loss(&model, &probe).unwrap();
    let config = SftConfig { updates: 150, lr: 3e-3, ..quick_config() };
    let log = train_sft(&mut model, &ds, &config, &SftRun::default()).unwrap();
    let after = sft_loss(&model, &probe).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(log.last().unwrap().update, 150);
}

#[test]
fn value_head_is_untouched_by_sft() {
    let ds = vec![dataset("gridnav8", "a", 3, 0)];
    let mut model = tiny_model(7);
    let head = model.value_head.clone();
    train_sft(&mut model, &ds, &quick_config(), &SftRun::default()).unwrap();
    assert_eq!(model.value_head, head);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ds = vec![dataset("gridnav8", "a", 4, 0)];
    let config = quick_config();
    let mut straight = tiny_model(8);
    let full_log = train_sft(&mut straight, &ds, &config, &SftRun::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.geap");
    let mut first = tiny_model(8);
    let run = SftRun { checkpoint: Some(path.clone()), stop_after: Some(20), ..SftRun::default() };
    let mut log = train_sft(&mut first, &ds, &config, &run).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.trainer.as_ref().unwrap().updates, 20);
    let mut resumed = ck.model;
    let run = SftRun { resume: ck.trainer, ..SftRun::default() };
    log.extend(train_sft(&mut resumed, &ds, &config, &run).unwrap());
    assert_eq!(resumed, straight);
    assert_eq!(log, full_log);
}

#[test]
fn trajectories_round_trip_through_jsonl() {
    let spec = env_spec("reacher2").unwrap();
    let data = expert_dataset(&spec, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_trajectories(&path, &data).unwrap();
    assert_eq!(read_trajectories(&path).unwrap(), data);
}

#[test]
fn datasets_reject_foreign_trajectories() {
    let v = vocab();
    let grid = Embodiment::new(env_spec("gridnav8").unwrap(), &v, None).unwrap();
    let reach = expert_dataset(&env_spec("reacher2").unwrap(), 1, 0).unwrap();
    assert!(SftDataset::from_trajectories("x", &reach, &grid, &v).is_err());
}
