//! Data-subset × training-mode comparisons over shared seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gea_core::codec::load_codec;
use gea_core::policy::PolicyModel;
use gea_core::sft::{success_filtered_sft, SftConfig, SftEval, SftRun};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{evaluate, SEED_BLOCK};
use crate::{embodiments, load_datasets, run_rl, run_sft, vocabulary, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Behavior cloning on the subset.
    Sft,
    /// SFT, then fine-tuning on the policy's own successful rollouts.
    FilteredSft,
    /// SFT, then PPO with the subset as the SFT term.
    Rl,
}

impl Mode {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "sft" => Ok(Mode::Sft),
            "filtered-sft" => Ok(Mode::FilteredSft),
            "rl" => Ok(Mode::Rl),
            other => Err(CliError::Config(format!(
                "unknown ablation mode `{other}` (known: sft, filtered-sft, rl)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sft => "sft",
            Mode::FilteredSft => "filtered-sft",
            Mode::Rl => "rl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub name: String,
    /// `ENV:PATH` demonstration sets.
    pub data: Vec<String>,
}

/// Parsed ablation matrix file.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub seeds: Vec<u64>,
    pub eval_envs: Vec<String>,
    pub episodes: usize,
    pub subsets: Vec<Subset>,
    pub modes: Vec<Mode>,
    /// Environments trained online (and sampled by filtered SFT).
    pub online_envs: Vec<String>,
    /// Updates of the filtered-SFT stage.
    pub filtered_updates: u64,
    pub codec: Option<PathBuf>,
}

fn list(v: &str) -> impl Iterator<Item = String> + '_ {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from)
}

impl AblationMatrix {
    /// Parses `key = value` lines: `seeds`, `eval_envs`, `episodes`,
    /// `subset.<name>`, `modes`, `online_envs`, `filtered_updates`, `codec`.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut m = AblationMatrix {
            seeds: vec![0],
            eval_envs: Vec::new(),
            episodes: 50,
            subsets: Vec::new(),
            modes: vec![Mode::Sft],
            online_envs: Vec::new(),
            filtered_updates: 500,
            codec: None,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| v.parse::<u64>().map_err(|_| at(format!("`{k}` expects an integer, got `{v}`")));
            match k {
                "seeds" => m.seeds = list(v).map(|s| int(&s)).collect::<Result<_, _>>()?,
                "eval_envs" => m.eval_envs = list(v).collect(),
                "episodes" => m.episodes = int(v)? as usize,
                "modes" => m.modes = list(v).map(|s| Mode::parse(&s)).collect::<Result<_, _>>()?,
                "online_envs" => m.online_envs = list(v).collect(),
                "filtered_updates" => m.filtered_updates = int(v)?,
                "codec" => m.codec = Some(PathBuf::from(v)),
                _ => match k.strip_prefix("subset.") {
                    Some(name) if !name.is_empty() => m.subsets.push(Subset {
                        name: name.to_string(),
                        data: list(v).collect(),
                    }),
                    _ => return Err(at(format!("unknown key `{k}`"))),
                },
            }
        }
        if m.subsets.is_empty() || m.eval_envs.is_empty() || m.seeds.is_empty() {
            return Err(CliError::Config(format!(
                "{origin}: an ablation needs at least one subset, eval env and seed"
            )));
        }
        if m.modes.iter().any(|&x| x != Mode::Sft) && m.online_envs.is_empty() {
            return Err(CliError::Config(format!("{origin}: filtered-sft and rl modes need `online_envs`")));
        }
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| gea_core::Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Mean ± population std of one environment's success over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub env: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// One matrix cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub results: Vec<EnvSummary>,
    /// Set when the cell failed for every seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Trains and evaluates every (subset, mode) cell for every seed. A failing
/// cell is reported as failed; the rest of the matrix proceeds.
pub fn ablation_run(cfg: &RunConfig, m: &AblationMatrix) -> Result<Vec<AblationRow>, CliError> {
    let codec = m.codec.as_deref().map(load_codec).transpose()?;
    let vocab = vocabulary(cfg, codec.as_ref())?;
    let eval_embs = embodiments(&m.eval_envs, &vocab, codec.as_ref())?;
    let online = embodiments(&m.online_envs, &vocab, codec.as_ref())?;
    let mut rows = Vec::new();
    for subset in &m.subsets {
        // scores[mode][seed] = per-env success, or the failure message.
        let mut scores: Vec<Vec<Result<Vec<f64>, String>>> = vec![Vec::new(); m.modes.len()];
        for &seed in &m.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.propagate_seed();
            let base = load_datasets(&subset.data, &vocab, codec.as_ref()).and_then(|ds| {
                let model = PolicyModel::new(c.policy.clone(), vocab.clone())?;
                let (model, _) = run_sft(&c, model, &ds, SftEval::default(), None, None, None)?;
                Ok((ds, model))
            });
            for (mi, &mode) in m.modes.iter().enumerate() {
                let cell = match &base {
                    Err(e) => Err(e.to_string()),
                    Ok((ds, model)) => run_cell(&c, m, mode, ds, model.clone(), &online)
                        .and_then(|model| {
                            let (r, _) = evaluate(&model, &eval_embs, m.episodes, seed, 0.0, true)?;
                            Ok(r.envs.iter().map(|e| e.success_rate).collect())
                        })
                        .map_err(|e| e.to_string()),
                };
                if let Err(msg) = &cell {
                    log::warn!("ablation cell {}/{} seed {seed} failed: {msg}", subset.name, mode.name());
                }
                scores[mi].push(cell);
            }
        }
        for (mi, &mode) in m.modes.iter().enumerate() {
            let ok: Vec<&Vec<f64>> = scores[mi].iter().filter_map(|r| r.as_ref().ok()).collect();
            let failed = if ok.is_empty() {
                scores[mi].iter().find_map(|r| r.as_ref().err().cloned())
            } else {
                None
            };
            let results = m
                .eval_envs
                .iter()
                .enumerate()
                .map(|(e, env)| {
                    let per_seed: Vec<f64> = ok.iter().map(|v| v[e]).collect();
                    let (mean, std) = mean_std(&per_seed);
                    EnvSummary {
                        env: env.clone(),
                        per_seed,
                        mean,
                        std,
                    }
                })
                .collect();
            rows.push(AblationRow {
                subset: subset.name.clone(),
                mode,
                seeds: m.seeds.clone(),
                results,
                failed,
            });
        }
    }
    Ok(rows)
}

fn run_cell(
    cfg: &RunConfig,
    m: &AblationMatrix,
    mode: Mode,
    datasets: &[gea_core::sft::SftDataset],
    mut model: PolicyModel,
    online: &[gea_core::agent::Embodiment],
) -> Result<PolicyModel, CliError> {
    match mode {
        Mode::Sft => {}
        Mode::Rl => {
            run_rl(cfg, &mut model, online, datasets, None)?;
        }
        Mode::FilteredSft => {
            let p = &cfg.ppo;
            let budget = p.iterations * p.envs_per_task * p.rollout_len;
            let sft = SftConfig {
                updates: m.filtered_updates,
                ..cfg.sft.clone()
            };
            for (i, emb) in online.iter().enumerate() {
                let first = cfg.seed * SEED_BLOCK + (i as u64 + 1) * SEED_BLOCK / 2;
                success_filtered_sft(&mut model, emb, budget, first, &sft, &SftRun::default())?;
            }
        }
    }
    Ok(model)
}

/// Comparison table with `mean ± std` per evaluation environment.
pub fn render(m: &AblationMatrix, rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<16} {:<13}", "subset", "mode");
    for e in &m.eval_envs {
        let _ = write!(s, " {e:>17}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<16} {:<13}", r.subset, r.mode.name());
        match &r.failed {
            Some(msg) => {
                let _ = write!(s, " failed: {msg}");
            }
            None => {
                for e in &r.results {
                    let _ = write!(s, " {:>9.3} ± {:<5.3}", e.mean, e.std);
                }
            }
        }
        s.push('\n');
    }
    s
}
