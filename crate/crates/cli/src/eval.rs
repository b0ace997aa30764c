//! Greedy evaluation with reference-normalized scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gea_core::agent::{run_episode, Embodiment};
use gea_core::envs::{ReferenceScores, TEST_SEED_BASE};
use gea_core::policy::PolicyModel;
use gea_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Reporting range of normalized scores.
pub const SCORE_CLIP: (f64, f64) = (-0.1, 1.5);

/// Gap between seed blocks of different evaluation seeds.
pub const SEED_BLOCK: u64 = 10_000;

/// `(s − random) / (expert − random)` clipped for reporting; `None` when the
/// references cannot separate.
pub fn normalized_score(s: f64, reference: &ReferenceScores) -> Option<f64> {
    let span = reference.expert - reference.random;
    if !(span.abs() > 0.0) {
        return None;
    }
    Some(((s - reference.random) / span).clamp(SCORE_CLIP.0, SCORE_CLIP.1))
}

/// Episode seeds for evaluation seed `seed` on the train or test split.
pub fn episode_seeds(seed: u64, episodes: usize, test_split: bool) -> Vec<u64> {
    let base = if test_split { TEST_SEED_BASE } else { 0 } + seed * SEED_BLOCK;
    (0..episodes as u64).map(|i| base + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub task: String,
    pub success: bool,
    pub total_return: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub env: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub normalized_score: Option<f64>,
    pub tasks: Vec<TaskRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub envs: Vec<EnvReport>,
    pub mean_success: f64,
    pub mean_normalized_score: Option<f64>,
}

/// Runs `episodes` episodes per embodiment and aggregates them.
pub fn evaluate(
    model: &PolicyModel,
    embodiments: &[Embodiment],
    episodes: usize,
    seed: u64,
    temperature: f64,
    test_split: bool,
) -> Result<(EvalReport, Vec<(String, EpisodeRecord)>)> {
    let mut envs = Vec::new();
    let mut records = Vec::new();
    for emb in embodiments {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eps = Vec::with_capacity(episodes);
        for s in episode_seeds(seed, episodes, test_split) {
            let r = run_episode(model, emb, s, temperature, &mut rng)?;
            eps.push(EpisodeRecord {
                seed: s,
                task: r.trajectory.instruction,
                success: r.outcome.success,
                total_return: r.outcome.total_return,
                steps: r.outcome.steps,
            });
        }
        eps.sort_by_key(|e| e.seed);
        envs.push(summarize(&emb.spec.name, &eps, emb.spec.reference.as_ref()));
        records.extend(eps.into_iter().map(|e| (emb.spec.name.clone(), e)));
    }
    Ok((report(vec![seed], envs), records))
}

/// Aggregates episode records of one environment.
pub fn summarize(env: &str, eps: &[EpisodeRecord], reference: Option<&ReferenceScores>) -> EnvReport {
    let (success_rate, mean_return) = rates(eps.iter());
    let mut by_task: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
    for e in eps {
        by_task.entry(&e.task).or_default().push(e);
    }
    let tasks = by_task
        .into_iter()
        .map(|(task, v)| {
            let (s, r) = rates(v.iter().copied());
            TaskRow {
                task: task.to_string(),
                episodes: v.len(),
                success_rate: s,
                mean_return: r,
            }
        })
        .collect();
    EnvReport {
        env: env.to_string(),
        episodes: eps.len(),
        success_rate,
        mean_return,
        normalized_score: reference.and_then(|r| normalized_score(success_rate, r)),
        tasks,
    }
}

fn rates<'a>(eps: impl Iterator<Item = &'a EpisodeRecord>) -> (f64, f64) {
    let (mut n, mut ok, mut ret) = (0usize, 0usize, 0.0);
    for e in eps {
        n += 1;
        ok += e.success as usize;
        ret += e.total_return;
    }
    let n = n.max(1) as f64;
    (ok as f64 / n, ret / n)
}

/// Builds the aggregate means over environment rows.
pub fn report(seeds: Vec<u64>, envs: Vec<EnvReport>) -> EvalReport {
    let n = envs.len().max(1) as f64;
    let mean_success = envs.iter().map(|e| e.success_rate).sum::<f64>() / n;
    let normalized: Option<Vec<f64>> = envs.iter().map(|e| e.normalized_score).collect();
    let mean_normalized_score = normalized.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    EvalReport {
        seeds,
        envs,
        mean_success,
        mean_normalized_score,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Human-readable table.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>10} {:>10}", "env", "episodes", "success", "return", "normalized");
    for e in &r.envs {
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8.3} {:>10.3} {:>10}",
            e.env,
            e.episodes,
            e.success_rate,
            e.mean_return,
            opt(e.normalized_score)
        );
        for t in &e.tasks {
            let _ = writeln!(
                s,
                "  {:<24} {:>8} {:>8.3} {:>10.3}",
                t.task, t.episodes, t.success_rate, t.mean_return
            );
        }
    }
    let _ = writeln!(
        s,
        "{:<18} {:>8} {:>8.3} {:>10} {:>10}",
        "mean",
        "",
        r.mean_success,
        "",
        opt(r.mean_normalized_score)
    );
    s
}
