//! Synthetic multi-embodiment action data: each embodiment's actions lie near a
//! smooth 2-D manifold inside `[-1, 1]^d`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::space::{pad, PaddedAction, D_MAX};

/// Dimensions of the three synthetic embodiments.
pub const SYNTHETIC_DIMS: [usize; 3] = [2, 4, 7];

const NOISE_STD: f64 = 0.01;

struct Manifold {
    weights: Vec<[f64; 2]>,
    phase: Vec<f64>,
}

fn manifold(dim: usize) -> Manifold {
    // Fixed per-embodiment structure, independent of the sampling seed.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + dim as u64);
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    Manifold {
        weights: (0..dim).map(|_| [n.sample(&mut rng), n.sample(&mut rng)]).collect(),
        phase: (0..dim).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
    }
}

/// One labelled synthetic action.
#[derive(Clone, Debug)]
pub struct SyntheticAction {
    pub embodiment: String,
    pub action: PaddedAction,
}

/// `n` actions drawn uniformly across the three embodiments.
pub fn synthetic_action_mixture(n: usize, seed: u64) -> Vec<SyntheticAction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifolds: Vec<Manifold> = SYNTHETIC_DIMS.iter().map(|&d| manifold(d)).collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    (0..n)
        .map(|_| {
            let e = rng.gen_range(0..SYNTHETIC_DIMS.len());
            let m = &manifolds[e];
            let (u1, u2): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let a: Vec<f64> = m
                .weights
                .iter()
                .zip(&m.phase)
                .map(|(w, p)| {
                    let s = w[0] * u1 + w[1] * u2 + 0.5 * (2.0 * u1 + p).sin();
                    (0.9 * s.tanh() + noise.sample(&mut rng)).clamp(-1.0, 1.0)
                })
                .collect();
            let embodiment = format!("synthetic-{}", SYNTHETIC_DIMS[e]);
            SyntheticAction {
                action: pad(&a, D_MAX, &embodiment).expect("dims within D_MAX"),
                embodiment,
            }
        })
        .collect()
}
