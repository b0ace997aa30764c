#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that the full pipeline runs in seconds.
pub const TINY_CONFIG: &str = "\
# tiny pipeline for tests
codec.codebook_size = 16
codec.code_dim = 8
codec.hidden = 16
codec_train.updates = 30
codec_train.batch_size = 16
codec_train.eval_every = 10
policy.dim = 8
policy.layers = 1
policy.heads = 2
policy.mlp_ratio = 2
policy.value_hidden = 8
policy.value_layers = 2
sft.updates = 20
sft.batch_size = 4
sft.log_every = 5
sft.eval_every = 10
ppo.iterations = 2
ppo.rollout_len = 4
ppo.envs_per_task = 1
ppo.minibatches = 2
ppo.sft_batch_size = 2
eval.episodes = 3
";

pub fn gea(args: &[&str]) -> Output {
    gea_env(args, &[])
}

pub fn gea_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gea"));
    c.args(args).env_remove("GEA_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("gea runs")
}

#[track_caller]
pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "gea failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Files written by one run of the tiny pipeline.
pub struct PipelineRun {
    pub dir: PathBuf,
    /// `(subcommand, output files)` in execution order.
    pub outputs: Vec<(&'static str, Vec<PathBuf>)>,
}

/// Runs every train and eval subcommand once into `dir`.
pub fn tiny_pipeline(dir: &Path) -> PipelineRun {
    let p = |name: &str| dir.join(name);
    let s = |path: &PathBuf| path.to_str().unwrap().to_string();
    std::fs::write(p("tiny.conf"), TINY_CONFIG).unwrap();
    let conf = s(&p("tiny.conf"));
    let base = ["--config", conf.as_str(), "--seed", "3"];
    let run = |extra: Vec<String>| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(extra.iter().map(String::as_str));
        ok(&gea(&args));
    };
    let v = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut outputs = Vec::new();

    run(v(&["gen-data", "--env", "gridnav8", "--episodes", "6", "--out", &s(&p("grid.jsonl"))]));
    run(v(&["gen-data", "--env", "reacher2", "--episodes", "3", "--out", &s(&p("reach.jsonl"))]));
    outputs.push(("gen-data", vec![p("grid.jsonl"), p("reach.jsonl")]));

    run(v(&[
        "train-codec",
        "--data",
        &s(&p("reach.jsonl")),
        "--out",
        &s(&p("codec.rvqc")),
        "--log",
        &s(&p("codec.log.jsonl")),
    ]));
    outputs.push(("train-codec", vec![p("codec.rvqc"), p("codec.log.jsonl")]));

    let grid_data = format!("gridnav8:{}", s(&p("grid.jsonl")));
    let reach_data = format!("reacher2:{}", s(&p("reach.jsonl")));
    let codec = s(&p("codec.rvqc"));
    run(v(&[
        "train-sft",
        "--data",
        &grid_data,
        "--data",
        &reach_data,
        "--codec",
        &codec,
        "--eval-env",
        "gridnav8",
        "--eval-episodes",
        "2",
        "--out",
        &s(&p("sft.geap")),
        "--log",
        &s(&p("sft.log.jsonl")),
    ]));
    outputs.push(("train-sft", vec![p("sft.geap"), p("sft.log.jsonl")]));

    run(v(&[
        "train-rl",
        "--init",
        &s(&p("sft.geap")),
        "--env",
        "gridnav8-sparse",
        "--data",
        &grid_data,
        "--data",
        &reach_data,
        "--codec",
        &codec,
        "--out",
        &s(&p("rl.geap")),
        "--log",
        &s(&p("rl.log.jsonl")),
    ]));
    outputs.push(("train-rl", vec![p("rl.geap"), p("rl.log.jsonl")]));

    run(v(&[
        "eval",
        "--checkpoint",
        &s(&p("rl.geap")),
        "--codec",
        &codec,
        "--env",
        "gridnav8",
        "--env",
        "reacher2",
        "--out",
        &s(&p("eval.jsonl")),
    ]));
    outputs.push(("eval", vec![p("eval.jsonl")]));

    PipelineRun {
        dir: dir.to_path_buf(),
        outputs,
    }
}
