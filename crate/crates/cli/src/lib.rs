//! Command-line front end: data generation, training, evaluation and reports.

pub mod ablation;
pub mod config;
pub mod eval;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gea_core::agent::Embodiment;
use gea_core::codec::synthetic::synthetic_action_mixture;
use gea_core::codec::{
    heldout_mse, load_codec, pad, save_codec, train_codec, CodecConfig, PaddedAction, RvqCodec,
};
use gea_core::envs::{env_spec, expert_dataset, TEST_SEED_BASE};
use gea_core::policy::{load_checkpoint, save_checkpoint, PolicyCheckpoint, PolicyModel, Vocabulary};
use gea_core::rl::{train_rl, RlOutcome, RlRun};
use gea_core::sft::{
    read_trajectories, train_sft, write_trajectories, ActionRecord, SftDataset, SftEval, SftRecord, SftRun,
};
use gea_core::util::write_jsonl;
use serde::Serialize;

use config::RunConfig;
use eval::{episode_seeds, evaluate, render_table, EvalReport, SEED_BLOCK};

/// Failures reported by the front end.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gea_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn detail(&self) -> String {
        match self {
            CliError::Config(m) | CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One JSON object on one line.
    pub fn machine_line(&self) -> String {
        serde_json::json!({"error": self.kind(), "message": self.detail()}).to_string()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gea", version, about = "Generalist embodied agent pipeline at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Named defaults: desk or paper-echo.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Flat `key = value` config file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; falls back to the config file, then GEA_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write expert demonstrations as JSONL trajectories.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the residual vector-quantized action codec.
    TrainCodec {
        /// Trajectory files whose continuous actions form the training set;
        /// the synthetic action mixture is used when none are given.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Size of the synthetic mixture.
        #[arg(long, default_value_t = 20_000)]
        synthetic: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print the resolved codec shape and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Behavior cloning on a mixture of demonstration sets.
    TrainSft {
        /// `ENV:PATH` pairs; sampling weights come from `sft.weights`.
        #[arg(long, required = true)]
        data: Vec<String>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Environments scored at every evaluation point.
        #[arg(long = "eval-env")]
        eval_env: Vec<String>,
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
        /// Stop and checkpoint after this many updates; resume later with --resume.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// PPO with the weighted SFT term, starting from a checkpoint.
    TrainRl {
        #[arg(long)]
        init: PathBuf,
        /// Environments trained online; repeatable.
        #[arg(long, required = true)]
        env: Vec<String>,
        /// `ENV:PATH` demonstration sets for the SFT term.
        #[arg(long)]
        data: Vec<String>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and emit a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long, required = true)]
        env: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Sampling temperature; greedy by default.
        #[arg(long)]
        temperature: Option<f64>,
        /// Line-delimited report records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print codec shape, token ranges, and optionally reconstruction quality.
    InspectCodec {
        /// Codec file; without it the configured shape is described.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Aggregate evaluation records or run an ablation matrix.
    Report {
        /// Records written by `eval --out`.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Ablation matrix file.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}

/// Preset, then config file, then `--set` overrides, then the seed.
fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::preset(&c.preset)?;
    let mut file_seed = None;
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| gea_core::Error::io(path, e))?;
        if config::file_keys(&text).contains_key("seed") {
            file_seed = Some(cfg.seed);
        }
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
        if k.trim() == "seed" {
            file_seed = Some(cfg.seed);
        }
    }
    cfg.seed = config::resolve_seed(c.seed, file_seed, cfg.deterministic)?;
    cfg.propagate_seed();
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { env, episodes, split, out } => gen_data(&cfg, &env, episodes, split, &out),
        Command::TrainCodec { data, synthetic, out, log, dry_run } => {
            if dry_run {
                print!("{}", describe_codec(&cfg.codec));
                return Ok(());
            }
            let out = out.ok_or_else(|| CliError::Usage("train-codec needs --out unless --dry-run".into()))?;
            cmd_train_codec(&cfg, &data, synthetic, &out, log.as_deref())
        }
        Command::TrainSft { data, codec, out, log, resume, eval_env, eval_episodes, stop_after } => {
            let codec = codec.as_deref().map(load_codec).transpose()?;
            let vocab = vocabulary(&cfg, codec.as_ref())?;
            let datasets = load_datasets(&data, &vocab, codec.as_ref())?;
            let evals = embodiments(&eval_env, &vocab, codec.as_ref())?;
            let (model, resume) = match resume {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    let state = ck.trainer.ok_or_else(|| {
                        CliError::Config(format!("{} holds no trainer state to resume from", p.display()))
                    })?;
                    (ck.model, Some(state))
                }
                None => (PolicyModel::new(cfg.policy.clone(), vocab)?, None),
            };
            let eval = SftEval {
                embodiments: evals,
                seeds: episode_seeds(cfg.seed, eval_episodes, true),
                heldout: None,
            };
            let (_, log_records) = run_sft(&cfg, model, &datasets, eval, Some(&out), resume, stop_after)?;
            if let Some(p) = log {
                write_jsonl(&p, &log_records)?;
            }
            if let Some(last) = log_records.last() {
                println!("sft: {} updates, loss {:.4}, checkpoint {}", last.update, last.loss, out.display());
            }
            Ok(())
        }
        Command::TrainRl { init, env, data, codec, out, log } => {
            let codec = codec.as_deref().map(load_codec).transpose()?;
            let ck = load_checkpoint(&init)?;
            let mut model = ck.model;
            let tasks = embodiments(&env, &model.vocab, codec.as_ref())?;
            let datasets = load_datasets(&data, &model.vocab, codec.as_ref())?;
            let outcome = run_rl(&cfg, &mut model, &tasks, &datasets, Some(&out))?;
            if let Some(p) = log {
                write_jsonl(&p, &outcome.log)?;
            }
            println!("rl: {} environment steps, checkpoint {}", outcome.env_steps, out.display());
            Ok(())
        }
        Command::Eval { checkpoint, codec, env, episodes, split, temperature, out } => {
            let codec = codec.as_deref().map(load_codec).transpose()?;
            let model = load_checkpoint(&checkpoint)?.model;
            let embs = embodiments(&env, &model.vocab, codec.as_ref())?;
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let temperature = temperature.unwrap_or(cfg.eval.temperature);
            let (report, _) = evaluate(&model, &embs, episodes, cfg.seed, temperature, split == Split::Test)?;
            print!("{}", render_table(&report));
            if let Some(p) = out {
                write_report(&p, &report)?;
            }
            Ok(())
        }
        Command::InspectCodec { codec, data } => {
            let Some(path) = codec else {
                print!("{}", describe_codec(&cfg.codec));
                return Ok(());
            };
            let codec = load_codec(&path)?;
            print!("{}", describe_codec(&codec.config));
            if !data.is_empty() {
                let actions = continuous_actions(&data, codec.config.max_action_dim)?;
                print!("{}", codebook_usage(&codec, &actions)?);
                println!("reconstruction_mse = {:.6}", heldout_mse(&codec, &actions)?);
            }
            Ok(())
        }
        Command::Report { input, ablation, out } => {
            let text = match (ablation, input.is_empty()) {
                (Some(matrix), true) => {
                    let m = ablation::AblationMatrix::from_file(&matrix)?;
                    let rows = ablation::ablation_run(&cfg, &m)?;
                    if let Some(p) = &out {
                        write_jsonl(p, &rows)?;
                    }
                    ablation::render(&m, &rows)
                }
                (None, false) => {
                    let reports = input.iter().map(|p| read_report(p)).collect::<CliResult<Vec<_>>>()?;
                    let merged = merge_reports(&reports);
                    if let Some(p) = &out {
                        write_report(p, &merged)?;
                    }
                    render_table(&merged)
                }
                _ => return Err(CliError::Usage("report takes either --input files or one --ablation matrix".into())),
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, env: &str, episodes: usize, split: Split, out: &Path) -> CliResult<()> {
    let spec = env_spec(env)?;
    let base = if split == Split::Test { TEST_SEED_BASE } else { 0 };
    let data = expert_dataset(&spec, episodes, base + cfg.seed * SEED_BLOCK)?;
    write_trajectories(out, &data)?;
    let steps: usize = data.iter().map(|t| t.steps.len()).sum();
    println!("gen-data: {} episodes, {steps} steps of {env} to {}", data.len(), out.display());
    Ok(())
}

/// Shape summary of a codec configuration.
pub fn describe_codec(c: &CodecConfig) -> String {
    let r = c.token_range();
    format!(
        "M={} K={} d_code={} d_max={} hidden={} layers={} tokens=[{}, {}) shared_range={}\n",
        c.levels, c.codebook_size, c.code_dim, c.max_action_dim, c.hidden, c.layers, r.start, r.end, c.shared_token_range
    )
}

fn continuous_actions(files: &[PathBuf], d_max: usize) -> CliResult<Vec<PaddedAction>> {
    let mut out = Vec::new();
    for f in files {
        for t in read_trajectories(f)? {
            for s in &t.steps {
                if let ActionRecord::Continuous { vec } = &s.action {
                    out.push(pad(vec, d_max, &format!("{}-{}", t.domain, vec.len()))?);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no continuous actions in the given trajectory files".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct CodecLogRecord {
    update: u64,
    train_loss: f64,
    recon_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_mse: Option<f64>,
}

fn cmd_train_codec(cfg: &RunConfig, data: &[PathBuf], synthetic: usize, out: &Path, log: Option<&Path>) -> CliResult<()> {
    let actions = if data.is_empty() {
        synthetic_action_mixture(synthetic, cfg.seed).into_iter().map(|s| s.action).collect()
    } else {
        continuous_actions(data, cfg.codec.max_action_dim)?
    };
    let split = actions.len() - (actions.len() / 10).max(1).min(actions.len() - 1);
    let (train, heldout) = actions.split_at(split);
    let (codec, history) = train_codec(train, heldout, cfg.codec.clone(), &cfg.codec_train)?;
    save_codec(&codec, out)?;
    if let Some(p) = log {
        let records: Vec<CodecLogRecord> = (0..history.train_loss.len())
            .map(|i| {
                let update = i as u64 + 1;
                CodecLogRecord {
                    update,
                    train_loss: history.train_loss[i],
                    recon_loss: history.recon_loss[i],
                    heldout_mse: history.heldout.iter().find(|h| h.0 == update).map(|h| h.1),
                }
            })
            .collect();
        write_jsonl(p, &records)?;
    }
    let mse = heldout_mse(&codec, heldout)?;
    println!("train-codec: held-out mse {mse:.6}, codec {}", out.display());
    Ok(())
}

fn codebook_usage(codec: &RvqCodec, actions: &[PaddedAction]) -> CliResult<String> {
    let mut used = vec![std::collections::BTreeSet::new(); codec.levels()];
    for a in actions {
        let q = codec.quantize(&codec.latent(a)?)?;
        for (m, &i) in q.indices.iter().enumerate() {
            used[m].insert(i);
        }
    }
    Ok(used
        .iter()
        .enumerate()
        .map(|(m, u)| format!("level {m}: {} of {} codes used\n", u.len(), codec.config.codebook_size))
        .collect())
}

/// Vocabulary for the codec in use, or the configured codec shape.
pub fn vocabulary(cfg: &RunConfig, codec: Option<&RvqCodec>) -> CliResult<Vocabulary> {
    Ok(Vocabulary::for_codec(codec.map_or(&cfg.codec, |c| &c.config))?)
}

pub fn embodiments(names: &[String], vocab: &Vocabulary, codec: Option<&RvqCodec>) -> CliResult<Vec<Embodiment>> {
    names
        .iter()
        .map(|n| {
            let spec = env_spec(n)?;
            let codec = if spec.space.is_continuous() {
                Some(codec.ok_or_else(|| {
                    CliError::Config(format!("environment `{n}` has continuous actions; pass --codec"))
                })?)
            } else {
                None
            };
            Ok(Embodiment::new(spec, vocab, codec)?)
        })
        .collect()
}

/// Splits an `ENV:PATH` data argument.
pub fn parse_data_spec(s: &str) -> CliResult<(String, PathBuf)> {
    let (env, path) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("data sets are given as ENV:PATH, got `{s}`")))?;
    Ok((env.to_string(), PathBuf::from(path)))
}

pub fn load_datasets(specs: &[String], vocab: &Vocabulary, codec: Option<&RvqCodec>) -> CliResult<Vec<SftDataset>> {
    specs
        .iter()
        .map(|s| {
            let (env, path) = parse_data_spec(s)?;
            let emb = embodiments(std::slice::from_ref(&env), vocab, codec)?.remove(0);
            let data = read_trajectories(&path)?;
            Ok(SftDataset::from_trajectories(&path.display().to_string(), &data, &emb, vocab)?)
        })
        .collect()
}

/// Sampling weights for `n` datasets; the single preset weight means uniform.
pub fn mixture_weights(cfg: &RunConfig, n: usize) -> CliResult<Vec<f64>> {
    let w = &cfg.sft.weights;
    if w.len() == n {
        Ok(w.clone())
    } else if w.len() == 1 {
        Ok(vec![w[0]; n])
    } else {
        Err(CliError::Config(format!("sft.weights has {} entries for {n} data sets", w.len())))
    }
}

/// SFT from `model`, checkpointing to `out`.
pub fn run_sft(
    cfg: &RunConfig,
    mut model: PolicyModel,
    datasets: &[SftDataset],
    eval: SftEval,
    out: Option<&Path>,
    resume: Option<gea_core::policy::TrainerState>,
    stop_after: Option<u64>,
) -> CliResult<(PolicyModel, Vec<SftRecord>)> {
    let sft = gea_core::sft::SftConfig {
        weights: mixture_weights(cfg, datasets.len())?,
        ..cfg.sft.clone()
    };
    let run = SftRun {
        eval,
        checkpoint: out.map(Path::to_path_buf),
        resume,
        stop_after,
    };
    let log = train_sft(&mut model, datasets, &sft, &run)?;
    Ok((model, log))
}

/// PPO+SFT on `tasks`, checkpointing to `out`.
pub fn run_rl(
    cfg: &RunConfig,
    model: &mut PolicyModel,
    tasks: &[Embodiment],
    datasets: &[SftDataset],
    out: Option<&Path>,
) -> CliResult<RlOutcome> {
    let sft = gea_core::sft::SftConfig {
        weights: mixture_weights(cfg, datasets.len().max(1))?,
        ..cfg.sft.clone()
    };
    let run = RlRun {
        first_seed: cfg.seed * SEED_BLOCK,
        checkpoint: out.map(Path::to_path_buf),
    };
    Ok(train_rl(model, tasks, datasets, &cfg.ppo, &sft, &run)?)
}

/// Saves a bare model checkpoint.
pub fn save_model(model: &PolicyModel, path: &Path) -> CliResult<()> {
    Ok(save_checkpoint(
        &PolicyCheckpoint {
            model: model.clone(),
            popart: None,
            trainer: None,
        },
        path,
    )?)
}

/// Per-environment rows, then the aggregate, one JSON record per line.
pub fn write_report(path: &Path, r: &EvalReport) -> CliResult<()> {
    #[derive(Serialize)]
    struct Aggregate<'a> {
        aggregate: bool,
        seeds: &'a [u64],
        mean_success: f64,
        mean_normalized_score: Option<f64>,
    }
    let mut lines: Vec<serde_json::Value> = r
        .envs
        .iter()
        .map(|e| serde_json::to_value(e).expect("report serializes"))
        .collect();
    lines.push(
        serde_json::to_value(Aggregate {
            aggregate: true,
            seeds: &r.seeds,
            mean_success: r.mean_success,
            mean_normalized_score: r.mean_normalized_score,
        })
        .expect("report serializes"),
    );
    Ok(write_jsonl(path, &lines)?)
}

pub fn read_report(path: &Path) -> CliResult<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| gea_core::Error::io(path, e))?;
    let mut envs = Vec::new();
    let mut seeds = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |e: serde_json::Error| gea_core::Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(bad)?;
        if v.get("aggregate").is_some() {
            seeds = serde_json::from_value(v["seeds"].clone()).map_err(bad)?;
        } else {
            envs.push(serde_json::from_value(v).map_err(bad)?);
        }
    }
    Ok(eval::report(seeds, envs))
}

/// Pools several reports (for example one per seed) environment by environment.
pub fn merge_reports(reports: &[EvalReport]) -> EvalReport {
    let mut by_env: std::collections::BTreeMap<String, Vec<&eval::EnvReport>> = Default::default();
    for r in reports {
        for e in &r.envs {
            by_env.entry(e.env.clone()).or_default().push(e);
        }
    }
    let envs = by_env
        .into_iter()
        .map(|(env, rows)| {
            let n: usize = rows.iter().map(|r| r.episodes).sum();
            let w = |f: &dyn Fn(&eval::EnvReport) -> f64| {
                rows.iter().map(|r| f(r) * r.episodes as f64).sum::<f64>() / n.max(1) as f64
            };
            let success_rate = w(&|r| r.success_rate);
            let reference = env_spec(&env).ok().and_then(|s| s.reference);
            let mut tasks: std::collections::BTreeMap<String, eval::TaskRow> = Default::default();
            for t in rows.iter().flat_map(|r| &r.tasks) {
                let e = tasks.entry(t.task.clone()).or_insert(eval::TaskRow {
                    task: t.task.clone(),
                    episodes: 0,
                    success_rate: 0.0,
                    mean_return: 0.0,
                });
                let k = e.episodes as f64;
                let m = t.episodes as f64;
                e.success_rate = (e.success_rate * k + t.success_rate * m) / (k + m);
                e.mean_return = (e.mean_return * k + t.mean_return * m) / (k + m);
                e.episodes += t.episodes;
            }
            eval::EnvReport {
                env,
                episodes: n,
                success_rate,
                mean_return: w(&|r| r.mean_return),
                normalized_score: reference.and_then(|r| eval::normalized_score(success_rate, &r)),
                tasks: tasks.into_values().collect(),
            }
        })
        .collect();
    let mut seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    eval::report(seeds, envs)
}
