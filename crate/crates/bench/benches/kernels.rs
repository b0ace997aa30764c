use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gea_core::agent::Embodiment;
use gea_core::codec::synthetic::synthetic_action_mixture;
use gea_core::codec::{CodecConfig, RvqCodec};
use gea_core::envs::{env_spec, expert_dataset};
use gea_core::numerics::Tensor;
use gea_core::policy::{PolicyConfig, PolicyModel, Vocabulary};
use gea_core::rl::compute_gae;
use gea_core::sft::{sample_batch, sft_loss_and_grad, SftDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[256, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[64, 256], 1.0, &mut rng);
    c.bench_function("matmul 256x64x256", |bench| bench.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn codec_encode(c: &mut Criterion) {
    let codec = RvqCodec::new(CodecConfig::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let actions = synthetic_action_mixture(64, 0);
    c.bench_function("rvq encode 64 actions", |bench| {
        bench.iter(|| {
            for s in &actions {
                black_box(codec.encode(&s.action).unwrap());
            }
        })
    });
}

fn sft_step(c: &mut Criterion) {
    let vocab = Vocabulary::for_codec(&CodecConfig::desk()).unwrap();
    let spec = env_spec("gridnav8").unwrap();
    let emb = Embodiment::new(spec.clone(), &vocab, None).unwrap();
    let data = SftDataset::from_trajectories("g", &expert_dataset(&spec, 32, 0).unwrap(), &emb, &vocab).unwrap();
    let mut model = PolicyModel::new(PolicyConfig::desk(), vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sample_batch(&[data], &[1.0], 16, model.config.context, &mut rng).unwrap();
    c.bench_function("sft loss and gradient, batch 16", |bench| {
        bench.iter(|| black_box(sft_loss_and_grad(&mut model, &batch, 1.0, None).unwrap()))
    });
}

fn gae(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4096;
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.02)).collect();
    c.bench_function("gae 4096 steps", |bench| {
        bench.iter(|| black_box(compute_gae(&r, &v, &d, 0.0, 0.99, 0.95)))
    });
}

criterion_group!(benches, matmul, codec_encode, sft_step, gae);
criterion_main!(benches);
