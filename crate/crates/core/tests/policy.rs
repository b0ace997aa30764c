mod common;

use common::check_params;
use gea_core::agent::Embodiment;
use gea_core::codec::{CodecConfig, RvqCodec};
use gea_core::envs::{env_spec, expert_dataset, Action};
use gea_core::numerics::{Objective, Parameterized, Tensor};
use gea_core::policy::{
    action_token_logprobs, checkpoint_from_bytes, checkpoint_to_bytes, constrained_step, decode_action,
    load_checkpoint, save_checkpoint, ActionTrie, LoraSettings, MaskedDistribution, PolicyCheckpoint, PolicyConfig,
    PolicyModel, SequenceLayout, StepGroup, TrainerState, Vocabulary,
};
use gea_core::rl::PopArtStats;
use gea_core::sft::{sample_batch, sft_loss, sft_loss_and_grad, SftBatch, SftDataset};
use gea_core::{numerics::AdamW, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_codec() -> RvqCodec {
    let config = CodecConfig {
        codebook_size: 8,
        code_dim: 4,
        hidden: 8,
        layers: 2,
        ..CodecConfig::desk()
    };
    RvqCodec::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn tiny_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        max_len: 64,
        value_hidden: 8,
        value_layers: 3,
        privileged_dim: 8,
        context: 3,
        seed,
    }
}

fn tiny_model(seed: u64) -> PolicyModel {
    let vocab = Vocabulary::for_codec(&tiny_codec().config).unwrap();
    PolicyModel::new(tiny_config(seed), vocab).unwrap()
}

fn grid() -> (Embodiment, SftDataset) {
    let spec = env_spec("gridnav8").unwrap();
    let vocab = Vocabulary::for_codec(&tiny_codec().config).unwrap();
    let emb = Embodiment::new(spec.clone(), &vocab, None).unwrap();
    let data = expert_dataset(&spec, 6, 0).unwrap();
    let ds = SftDataset::from_trajectories("grid", &data, &emb, &vocab).unwrap();
    (emb, ds)
}

fn reacher() -> (Embodiment, SftDataset) {
    let spec = env_spec("reacher2").unwrap();
    let codec = tiny_codec();
    let vocab = Vocabulary::for_codec(&codec.config).unwrap();
    let emb = Embodiment::new(spec.clone(), &vocab, Some(&codec)).unwrap();
    let data = expert_dataset(&spec, 3, 0).unwrap();
    let ds = SftDataset::from_trajectories("reach", &data, &emb, &vocab).unwrap();
    (emb, ds)
}

fn two_sample_batch() -> SftBatch {
    let (_, g) = grid();
    let (_, r) = reacher();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = sample_batch(&[g], &[1.0], 3, 1, &mut rng).unwrap();
    let b = sample_batch(&[r], &[1.0], 2, 1, &mut rng).unwrap();
    SftBatch {
        layouts: vec![a.layouts[0].clone(), b.layouts[0].clone()],
        sources: vec![0, 1],
    }
}

#[test]
fn masked_sft_loss_gradient_matches_finite_differences() {
    let batch = two_sample_batch();
    let mut model = tiny_model(1);
    let report = check_params(
        &mut model,
        |m| {
            sft_loss_and_grad(m, &batch, 1.0, None).unwrap();
        },
        |m| sft_loss(m, &batch).unwrap(),
        24,
    );
    report.assert_passes("policy trunk + masked SFT loss");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let batch = two_sample_batch();
    let mut model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    model.attach_lora(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.0 }, &mut rng).unwrap();
    // Move the up-projections off zero so every adapter path carries gradient.
    model.visit_params_mut("", &mut |name, p| {
        if name.ends_with("lora_up") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    });
    model.freeze_base();
    let report = check_params(
        &mut model,
        |m| {
            sft_loss_and_grad(m, &batch, 1.0, None).unwrap();
        },
        |m| sft_loss(m, &batch).unwrap(),
        24,
    );
    report.assert_passes("adapters");
}

#[test]
fn value_head_gradient_matches_finite_differences() {
    let mut model = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = model.config.value_input_dim();
    let x = Tensor::randn(&[5, d], 1.0, &mut rng);
    let y = Objective::MeanSquared(Tensor::randn(&[5, 1], 1.0, &mut rng));
    // The last layer starts at zero; give it weights so upstream layers see gradient.
    let last = model.value_head.last_affine_mut().unwrap();
    for v in last.weight.value.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut head = model.value_head.clone();
    let report = check_params(
        &mut head,
        |h| {
            h.forward_backward(&x, &y).unwrap();
        },
        |h| h.clone().forward_backward(&x, &y).unwrap().loss,
        64,
    );
    report.assert_passes("value head");
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let batch = two_sample_batch();
    let mut model = tiny_model(6);
    model.attach_lora(LoraSettings::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.freeze_base();
    model.zero_grad();
    sft_loss_and_grad(&mut model, &batch, 1.0, None).unwrap();
    model.visit_params("", &mut |name, p| {
        if p.frozen {
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{name} accumulated gradient");
        }
    });
}

#[test]
fn zero_weight_contributes_no_gradient() {
    let batch = two_sample_batch();
    let mut model = tiny_model(7);
    model.zero_grad();
    sft_loss_and_grad(&mut model, &batch, 0.0, None).unwrap();
    model.visit_params("", &mut |name, p| {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "{name}");
    });
}

#[test]
fn zeroed_head_gives_uniform_loss() {
    let mut model = tiny_model(8);
    model.head.weight.value.fill(0.0);
    model.head.bias.as_mut().unwrap().value.fill(0.0);
    let layout = SequenceLayout {
        prompt: vec![3, 4],
        instruction: vec![5],
        groups: vec![StepGroup {
            obs: vec![0.5; 10],
            action: vec![7],
        }],
    };
    let batch = SftBatch {
        layouts: vec![layout],
        sources: vec![0],
    };
    let loss = sft_loss(&model, &batch).unwrap();
    assert!((loss - (model.vocab.size() as f64).ln()).abs() < 1e-6, "{loss}");
}

#[test]
fn confident_head_fits_targets() {
    let mut model = tiny_model(9);
    let target = 9u32;
    model.head.weight.value.fill(0.0);
    let b = model.head.bias.as_mut().unwrap();
    b.value.fill(0.0);
    b.value.data_mut()[target as usize] = 40.0;
    let batch = SftBatch {
        layouts: vec![SequenceLayout {
            prompt: vec![3],
            instruction: vec![],
            groups: vec![StepGroup {
                obs: vec![0.1; 10],
                action: vec![target],
            }],
        }],
        sources: vec![0],
    };
    assert!(sft_loss(&model, &batch).unwrap() < 1e-6);
}

fn logits_at_targets(model: &PolicyModel, layout: &SequenceLayout) -> Vec<Vec<f64>> {
    let trunk = model.forward(layout, None).unwrap();
    let pos: Vec<usize> = layout.targets().iter().map(|t| t.0).collect();
    let (l, _) = model.logits_at(&trunk.hidden, &pos).unwrap();
    (0..pos.len()).map(|i| l.row(i).to_vec()).collect()
}

#[test]
fn predictions_depend_only_on_the_prefix() {
    let model = tiny_model(10);
    let (_, ds) = grid();
    let layout = ds.episodes[0].span(0, 2);
    let base = logits_at_targets(&model, &layout);
    // Editing the final action token must not change the logits that predict it.
    let mut edited = layout.clone();
    let last = edited.groups.last_mut().unwrap();
    let n = last.action.len();
    last.action[n - 1] = 2;
    let after = logits_at_targets(&model, &edited);
    for (a, b) in base[n - 1].iter().zip(&after[n - 1]) {
        assert!((a - b).abs() < 1e-12);
    }
    // Editing the instruction does change them.
    let mut other = layout.clone();
    other.instruction[0] = other.instruction[0] + 1;
    let changed = logits_at_targets(&model, &other);
    assert!(base[0].iter().zip(&changed[0]).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn loss_ignores_non_target_positions() {
    let model = tiny_model(11);
    let (_, ds) = grid();
    let layout = ds.episodes[1].span(0, 2);
    let base = sft_loss(&model, &SftBatch { layouts: vec![layout.clone()], sources: vec![0] }).unwrap();
    // Recomputing from the per-target distributions reproduces the loss exactly.
    let logits = logits_at_targets(&model, &layout);
    let mut manual = 0.0;
    for (row, (_, t)) in logits.iter().zip(layout.targets()) {
        manual -= gea_core::numerics::loss::log_softmax(row)[t as usize];
    }
    assert_eq!(base.to_bits(), manual.to_bits());
}

#[test]
fn constrained_sampling_never_emits_illegal_tokens() {
    let (gemb, _) = grid();
    let (remb, _) = reacher();
    let v = tiny_model(0).vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tries = [&gemb.trie, &remb.trie];
    let mut steps = 0;
    while steps < 100_000 {
        let trie = tries[steps % 2];
        let mut cursor = trie.root();
        while !trie.is_complete(&cursor) {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let legal = trie.legal(&cursor);
            let dist = MaskedDistribution::new(&logits, &legal, 1.0).unwrap();
            assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let c = constrained_step(&logits, &legal, 1.0, &mut rng).unwrap();
            assert!(trie.is_legal(&cursor, c.token));
            cursor = trie.advance(&cursor, c.token).unwrap();
            steps += 1;
        }
    }
}

#[test]
fn trie_paths_equal_action_set() {
    let (gemb, _) = grid();
    let vocab = tiny_model(0).vocab;
    let mut paths: Vec<String> = gemb
        .trie
        .paths()
        .iter()
        .map(|p| vocab.detokenize(&p[..p.len() - 1]).unwrap())
        .collect();
    paths.sort();
    let mut expected: Vec<String> = gea_core::envs::GRID_ACTIONS.iter().map(|s| s.to_string()).collect();
    expected.sort();
    assert_eq!(paths, expected);
    let (remb, _) = reacher();
    assert_eq!(remb.trie.paths().len(), 8 * 8);
}

#[test]
fn greedy_decoding_takes_the_best_legal_token() {
    let mut logits = vec![0.0; 20];
    logits[3] = 5.0;
    logits[7] = 2.0;
    logits[9] = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(constrained_step(&logits, &[7, 9], 0.0, &mut rng).unwrap().token, 7);
    assert_eq!(constrained_step(&logits, &[3, 9], 0.0, &mut rng).unwrap().token, 3);
}

#[test]
fn normalized_entropy_bounds() {
    let uniform = MaskedDistribution::new(&[0.0; 6], &[0, 2, 4], 1.0).unwrap();
    assert!((uniform.normalized_entropy() - 1.0).abs() < 1e-12);
    let forced = MaskedDistribution::new(&[1.0, 2.0], &[1], 1.0).unwrap();
    assert_eq!(forced.normalized_entropy(), 0.0);
    let peaked = MaskedDistribution::new(&[100.0, 0.0, 0.0], &[0, 1, 2], 1.0).unwrap();
    assert!(peaked.normalized_entropy() < 1e-6);
}

#[test]
fn continuous_decoding_emits_one_token_per_level() {
    let (remb, ds) = reacher();
    let model = tiny_model(13);
    let mut layout = ds.episodes[0].span(0, 1);
    layout.groups.last_mut().unwrap().action.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = decode_action(&model, &layout, &remb.spec.space, &remb.trie, remb.codec.as_ref(), None, 1.0, &mut rng)
        .unwrap();
    let codec = remb.codec.as_ref().unwrap();
    assert_eq!(d.tokens.len(), codec.levels());
    for (m, &t) in d.tokens.iter().enumerate() {
        assert!(codec.config.level_range(m).contains(&t));
    }
    match d.action {
        Action::Continuous(v) => assert_eq!(v.len(), 2),
        other => panic!("expected continuous action, got {other:?}"),
    }
}

#[test]
fn sampled_logprob_matches_teacher_forcing() {
    let model = tiny_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (emb, ds) in [grid(), reacher()] {
        for ep in ds.episodes.iter().take(3) {
            let mut layout = ep.span(0, 1.min(ep.steps.len() - 1));
            layout.groups.last_mut().unwrap().action.clear();
            let d = decode_action(&model, &layout, &emb.spec.space, &emb.trie, emb.codec.as_ref(), None, 1.0, &mut rng)
                .unwrap();
            layout.groups.last_mut().unwrap().action = d.tokens.clone();
            let tf: f64 = action_token_logprobs(&model, &layout, &emb.trie).unwrap().iter().map(|x| x.0).sum();
            assert!((tf - d.logprob()).abs() < 1e-9, "{tf} vs {}", d.logprob());
        }
    }
}

#[test]
fn zero_initialized_adapters_are_a_no_op() {
    let (_, ds) = grid();
    let layout = ds.episodes[0].span(0, 2);
    let mut model = tiny_model(15);
    let before = model.forward(&layout, None).unwrap().hidden;
    model.attach_lora(LoraSettings::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let after = model.forward(&layout, None).unwrap().hidden;
    assert_eq!(before.data(), after.data());
    assert!(matches!(
        model.attach_lora(LoraSettings::desk(), &mut ChaCha8Rng::seed_from_u64(1)),
        Err(Error::AdaptersAttached)
    ));
}

#[test]
fn merged_adapters_match_unmerged_outputs() {
    let (_, ds) = grid();
    let layout = ds.episodes[2].span(0, 2);
    let mut model = tiny_model(16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.attach_lora(LoraSettings::desk(), &mut rng).unwrap();
    model.visit_params_mut("", &mut |name, p| {
        if name.ends_with("lora_up") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    });
    let unmerged = model.forward(&layout, None).unwrap().hidden;
    model.merge_lora();
    assert!(model.lora.is_none());
    let merged = model.forward(&layout, None).unwrap().hidden;
    for (a, b) in unmerged.data().iter().zip(merged.data()) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
    }
}

#[test]
fn adapter_training_leaves_base_weights_untouched() {
    let (_, ds) = grid();
    let mut model = tiny_model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.attach_lora(LoraSettings::desk(), &mut rng).unwrap();
    model.freeze_base();
    let sum = model.base_checksum();
    let mut opt = AdamW::new(Default::default());
    for _ in 0..5 {
        let b = sample_batch(&[ds.clone()], &[1.0], 3, 4, &mut rng).unwrap();
        model.zero_grad();
        sft_loss_and_grad(&mut model, &b, 1.0, None).unwrap();
        opt.step(&mut model, 1e-2).unwrap();
    }
    assert_eq!(model.base_checksum(), sum);
    let mut adapters_moved = false;
    model.visit_params("", &mut |name, p| {
        if name.ends_with("lora_up") && p.value.data().iter().any(|&v| v != 0.0) {
            adapters_moved = true;
        }
    });
    assert!(adapters_moved);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut model = tiny_model(18);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model.attach_lora(LoraSettings { rank: 2, alpha: 4.0, dropout: 0.1 }, &mut rng).unwrap();
    let mut opt = AdamW::new(Default::default());
    let (_, ds) = grid();
    let b = sample_batch(&[ds], &[1.0], 3, 2, &mut rng).unwrap();
    model.zero_grad();
    sft_loss_and_grad(&mut model, &b, 1.0, None).unwrap();
    opt.step(&mut model, 1e-3).unwrap();
    model.zero_grad();
    let _: u64 = rng.gen();
    let ck = PolicyCheckpoint {
        model,
        popart: Some(PopArtStats { mu: 0.25, nu: 1.5, beta: 3e-4, sigma_min: 1e-4 }),
        trainer: Some(TrainerState { updates: 7, rng: rng.clone(), optimizers: vec![opt] }),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.geap");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(checkpoint_to_bytes(&back), std::fs::read(&path).unwrap());
    let mut r1 = back.trainer.unwrap().rng;
    let mut r2 = rng;
    assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = PolicyCheckpoint { model: tiny_model(19), popart: None, trainer: None };
    let bytes = checkpoint_to_bytes(&ck);
    let p = std::path::Path::new("mem");
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Corrupt { .. })));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"GEAC");
    assert!(matches!(checkpoint_from_bytes(&bad, p), Err(Error::Format { .. })));
    let mut bumped = bytes.clone();
    bumped[4] = 9;
    assert!(matches!(checkpoint_from_bytes(&bumped, p), Err(Error::Format { .. })));
    let missing = std::path::Path::new("/nonexistent/policy.geap");
    match load_checkpoint(missing) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("/nonexistent/policy.geap")),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn continuous_space_without_codec_is_a_config_error() {
    let spec = env_spec("reacher2").unwrap();
    let vocab = tiny_model(0).vocab;
    assert!(matches!(Embodiment::new(spec.clone(), &vocab, None), Err(Error::Config(_))));
    assert!(matches!(ActionTrie::for_space(&spec.space, &vocab, None), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_distribution_is_normalized(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
        temperature in 0.05f64..4.0,
    ) {
        let legal: Vec<u32> = (0..12u32).filter(|&i| mask[i as usize]).collect();
        prop_assume!(!legal.is_empty());
        let d = MaskedDistribution::new(&logits, &legal, temperature).unwrap();
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let h = d.normalized_entropy();
        prop_assert!((0.0..=1.0).contains(&h));
        for i in 0..12u32 {
            if !mask[i as usize] {
                prop_assert_eq!(d.prob(i), 0.0);
            }
        }
    }
}
