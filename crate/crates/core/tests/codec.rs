mod common;

use gea_core::codec::synthetic::synthetic_action_mixture;
use gea_core::codec::{
    heldout_mse, load_codec, pad, save_codec, train_codec, CodecConfig, CodecTrainConfig, PaddedAction,
    RvqCodec, D_MAX,
};
use gea_core::numerics::{Parameterized, Tensor};
use gea_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> CodecConfig {
    CodecConfig {
        code_dim: 16,
        hidden: 32,
        codebook_size: 64,
        ..CodecConfig::desk()
    }
}

/// Exhaustive argmin over every code, written independently of the codec.
fn brute_force_argmin(codebook: &Tensor, target: &[f64]) -> usize {
    let dists: Vec<f64> = (0..codebook.rows())
        .map(|k| {
            codebook
                .row(k)
                .iter()
                .zip(target)
                .map(|(c, t)| (c - t).powi(2))
                .sum::<f64>()
        })
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

#[test]
fn nearest_code_matches_brute_force_on_random_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let codec = RvqCodec::new(small_config(), &mut rng).unwrap();
    for _ in 0..1000 {
        let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let q = codec.quantize(&z).unwrap();
        let mut r = z.clone();
        for m in 0..codec.levels() {
            let cb = &codec.codebooks[m].value;
            let expect = brute_force_argmin(cb, &r);
            assert_eq!(q.indices[m], expect);
            // Optimality and greedy residual consistency.
            let chosen: f64 = cb.row(expect).iter().zip(&r).map(|(c, t)| (c - t).powi(2)).sum();
            for k in 0..cb.rows() {
                let d: f64 = cb.row(k).iter().zip(&r).map(|(c, t)| (c - t).powi(2)).sum();
                assert!(chosen <= d);
            }
            let next: Vec<f64> = r.iter().zip(cb.row(expect)).map(|(a, c)| a - c).collect();
            assert_eq!(q.residuals[m + 1], next);
            r = next;
        }
    }
}

#[test]
fn emitted_tokens_stay_in_reserved_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codec = RvqCodec::new(small_config(), &mut rng).unwrap();
    let range = codec.config.token_range();
    for s in synthetic_action_mixture(500, 1) {
        let t = codec.encode(&s.action).unwrap();
        assert_eq!(t.0.len(), 2);
        assert!(t.0.iter().all(|id| range.contains(id)));
    }
}

#[test]
fn save_load_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codec = RvqCodec::new(small_config(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.rvq");
    save_codec(&codec, &path).unwrap();
    let loaded = load_codec(&path).unwrap();
    let bits = |c: &RvqCodec| {
        let mut v = Vec::new();
        c.visit_params("", &mut |n, p| v.push((n.to_string(), p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())));
        v
    };
    assert_eq!(bits(&codec), bits(&loaded));
    assert_eq!(codec.config, loaded.config);
    assert_eq!(codec.mean, loaded.mean);
    assert_eq!(codec.std, loaded.std);
    // Re-saving reproduces the same bytes.
    let path2 = dir.path().join("again.rvq");
    save_codec(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codec = RvqCodec::new(small_config(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.rvq");
    save_codec(&codec, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.rvq");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_codec(&cut), Err(Error::Corrupt { .. })));

    let mut wrong = bytes.clone();
    wrong[..4].copy_from_slice(b"GEAP");
    let foreign = dir.path().join("foreign.rvq");
    std::fs::write(&foreign, &wrong).unwrap();
    assert!(matches!(load_codec(&foreign), Err(Error::Format { .. })));

    let mut bumped = bytes;
    bumped[4] = 9;
    std::fs::write(&foreign, &bumped).unwrap();
    assert!(matches!(load_codec(&foreign), Err(Error::Format { .. })));
}

#[test]
fn single_repeated_action_is_memorized() {
    let a = pad(&[0.3, -0.7, 0.1, 0.9], D_MAX, "arm").unwrap();
    let data: Vec<PaddedAction> = vec![a.clone(); 64];
    let tc = CodecTrainConfig {
        updates: 300,
        batch_size: 16,
        eval_every: 100,
        ..CodecTrainConfig::desk()
    };
    let (codec, _) = train_codec(&data, &[a.clone()], small_config(), &tc).unwrap();
    let m = heldout_mse(&codec, &[a]).unwrap();
    assert!(m < 1e-4, "memorization mse {m}");
}

#[test]
fn empty_training_set_is_rejected() {
    let tc = CodecTrainConfig::desk();
    assert!(matches!(train_codec(&[], &[], small_config(), &tc), Err(Error::Config(_))));
}

#[test]
fn checkpointed_training_writes_loadable_codec() {
    let data: Vec<PaddedAction> = synthetic_action_mixture(200, 2).into_iter().map(|s| s.action).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.rvq");
    let tc = CodecTrainConfig {
        updates: 20,
        batch_size: 8,
        eval_every: 10,
        checkpoint: Some(path.clone()),
        ..CodecTrainConfig::desk()
    };
    let (codec, hist) = train_codec(&data, &data[..20], small_config(), &tc).unwrap();
    assert_eq!(hist.train_loss.len(), 20);
    assert_eq!(hist.heldout.len(), 2);
    let loaded = load_codec(&path).unwrap();
    assert_eq!(loaded.config, codec.config);
}
