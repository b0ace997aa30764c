mod common;

use common::{gea, gea_env, ok, tiny_pipeline, TINY_CONFIG};
use gea_cli::ablation::{ablation_run, AblationMatrix, Mode};
use gea_cli::config::RunConfig;
use gea_cli::eval::{normalized_score, EpisodeRecord, SCORE_CLIP};
use gea_core::envs::ReferenceScores;
use proptest::prelude::*;

#[test]
fn paper_echo_codec_dry_run() {
    let out = ok(&gea(&["train-codec", "--preset", "paper-echo", "--dry-run"]));
    assert!(out.contains("M=2 K=512 d_code=1024"), "{out}");
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [vec!["frobnicate"], vec!["eval", "--bogus"], vec![]] {
        let out = gea(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
    let out = gea(&["--preset", "huge", "inspect-codec"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let out = gea(&["eval", "--checkpoint", "/no/such/policy.geap", "--env", "gridnav8"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("/no/such/policy.geap"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "sft.updates = 10\nsft.learning_rate = 3\n").unwrap();
    let out = gea(&["--config", path.to_str().unwrap(), "inspect-codec"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.conf:2") && err.contains("sft.learning_rate"), "{err}");
}

#[test]
fn config_text_round_trips_every_key() {
    for preset in gea_cli::config::PRESETS {
        let cfg = RunConfig::preset(preset).unwrap();
        let mut back = RunConfig::preset(if preset == "desk" { "paper-echo" } else { "desk" }).unwrap();
        back.apply_text(&cfg.to_text(), "generated").unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn config_values_are_type_checked() {
    let mut cfg = RunConfig::preset("desk").unwrap();
    assert!(cfg.set("sft.updates", "-3").is_err());
    assert!(cfg.set("sft.lr", "fast").is_err());
    assert!(cfg.set("deterministic", "yes").is_err());
    assert!(cfg.set("policy", "1").is_err());
    cfg.set("sft.weights", "2, 1").unwrap();
    assert_eq!(cfg.sft.weights, vec![2.0, 1.0]);
    cfg.set("ppo.lora", "none").unwrap();
    assert!(cfg.ppo.lora.is_none());
    cfg.set("ppo.lora", "paper-echo").unwrap();
    assert_eq!(cfg.ppo.lora.unwrap().rank, 128);
}

#[test]
fn every_config_key_is_documented() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    for key in RunConfig::preset("desk").unwrap().entries().keys() {
        assert!(readme.contains(&format!("`{key}`")), "README lacks config key `{key}`");
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, args: &[&str], env: &[(&str, &str)]| {
        let path = dir.path().join(name);
        let mut a = vec!["gen-data", "--env", "gridnav8", "--episodes", "2", "--out", path.to_str().unwrap()];
        a.extend_from_slice(args);
        ok(&gea_env(&a, env));
        std::fs::read(path).unwrap()
    };
    let from_env = gen("a", &[], &[("GEA_SEED", "5")]);
    let from_flag = gen("b", &["--seed", "5"], &[]);
    let flag_wins = gen("c", &["--seed", "5"], &[("GEA_SEED", "9")]);
    let default = gen("d", &[], &[]);
    assert_eq!(from_env, from_flag);
    assert_eq!(flag_wins, from_flag);
    assert_ne!(default, from_flag);
    let out = gea_env(&["inspect-codec"], &[("GEA_SEED", "abc")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn normalized_score_formula() {
    let r = ReferenceScores { random: 0.2, expert: 0.9 };
    assert!(normalized_score(0.2, &r).unwrap().abs() < 1e-12);
    assert!((normalized_score(0.9, &r).unwrap() - 1.0).abs() < 1e-12);
    assert!((normalized_score(0.55, &r).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(normalized_score(-5.0, &r), Some(SCORE_CLIP.0));
    assert_eq!(normalized_score(9.0, &r), Some(SCORE_CLIP.1));
    assert_eq!(normalized_score(0.5, &ReferenceScores { random: 0.4, expert: 0.4 }), None);
}

proptest! {
    #[test]
    fn normalized_score_is_shift_invariant(
        s in -1.0f64..2.0, random in -1.0f64..0.4, expert in 0.6f64..2.0, shift in -100.0f64..100.0,
    ) {
        let a = normalized_score(s, &ReferenceScores { random, expert }).unwrap();
        let b = normalized_score(s + shift, &ReferenceScores { random: random + shift, expert: expert + shift }).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + shift.abs()) * 10.0);
    }
}

#[test]
fn task_breakdown_counts_match() {
    let eps: Vec<EpisodeRecord> = (0..7)
        .map(|i| EpisodeRecord {
            seed: i,
            task: format!("task {}", i % 3),
            success: i % 2 == 0,
            total_return: i as f64,
            steps: 3,
        })
        .collect();
    let r = gea_cli::eval::summarize("gridnav8", &eps, None);
    assert_eq!(r.episodes, 7);
    assert_eq!(r.tasks.iter().map(|t| t.episodes).sum::<usize>(), 7);
    assert!((r.success_rate - 4.0 / 7.0).abs() < 1e-12);
    assert_eq!(r.normalized_score, None);
}

#[test]
fn pipeline_is_byte_reproducible_and_reports_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = tiny_pipeline(a.path());
    let rb = tiny_pipeline(b.path());
    for ((cmd, fa), (_, fb)) in ra.outputs.iter().zip(&rb.outputs) {
        for (x, y) in fa.iter().zip(fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{cmd}: {}", x.display());
        }
    }
    let report = gea_cli::read_report(&a.path().join("eval.jsonl")).unwrap();
    assert!(report.envs.iter().all(|e| e.episodes == 3));
    assert_eq!(report.seeds, vec![3]);

    // Pooling two reports of the same run doubles the episode counts.
    let eval = a.path().join("eval.jsonl");
    let merged = a.path().join("merged.jsonl");
    let e = eval.to_str().unwrap();
    ok(&gea(&["report", "--input", e, "--input", e, "--out", merged.to_str().unwrap()]));
    let m = gea_cli::read_report(&merged).unwrap();
    assert!(m.envs.iter().all(|x| x.episodes == 6));
    assert_eq!(m.envs[0].success_rate, report.envs[0].success_rate);
}

#[test]
fn sft_resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    std::fs::write(d("tiny.conf"), TINY_CONFIG).unwrap();
    ok(&gea(&["gen-data", "--env", "gridnav8", "--episodes", "3", "--out", &d("g.jsonl")]));
    let data = format!("gridnav8:{}", d("g.jsonl"));
    let conf = d("tiny.conf");
    ok(&gea(&["--config", &conf, "train-sft", "--data", &data, "--out", &d("full.geap")]));
    ok(&gea(&["--config", &conf, "train-sft", "--data", &data, "--stop-after", "10", "--out", &d("part.geap")]));
    ok(&gea(&[
        "--config", &conf, "train-sft", "--data", &data, "--resume", &d("part.geap"), "--out", &d("resumed.geap"),
    ]));
    assert_eq!(std::fs::read(d("full.geap")).unwrap(), std::fs::read(d("resumed.geap")).unwrap());
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.apply_text(TINY_CONFIG, "tiny").unwrap();
    cfg.propagate_seed();
    cfg
}

#[test]
fn one_cell_ablation_matches_direct_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    ok(&gea(&["gen-data", "--env", "gridnav8", "--episodes", "4", "--out", &d("g.jsonl")]));
    std::fs::write(d("tiny.conf"), TINY_CONFIG).unwrap();
    let data = format!("gridnav8:{}", d("g.jsonl"));
    let conf = d("tiny.conf");
    ok(&gea(&["--config", &conf, "--seed", "1", "train-sft", "--data", &data, "--out", &d("m.geap")]));
    ok(&gea(&[
        "--config", &conf, "--seed", "1", "eval", "--checkpoint", &d("m.geap"), "--env", "gridnav8", "--episodes", "4",
        "--out", &d("e.jsonl"),
    ]));
    let direct = gea_cli::read_report(std::path::Path::new(&d("e.jsonl"))).unwrap();

    let matrix = AblationMatrix::parse(
        &format!("seeds = 1\neval_envs = gridnav8\nepisodes = 4\nsubset.grid = {data}\n"),
        "matrix",
    )
    .unwrap();
    let rows = ablation_run(&tiny_config(), &matrix).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].results[0].per_seed, vec![direct.envs[0].success_rate]);
}

#[test]
fn ablation_rows_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    ok(&gea(&["gen-data", "--env", "gridnav8", "--episodes", "3", "--out", &d("g.jsonl")]));
    let text = format!(
        "seeds = 0, 1, 2\neval_envs = gridnav8\nepisodes = 2\n\
         subset.good = gridnav8:{}\nsubset.broken = gridnav8:{}\n",
        d("g.jsonl"),
        d("missing.jsonl")
    );
    let matrix = AblationMatrix::parse(&text, "matrix").unwrap();
    let rows = ablation_run(&tiny_config(), &matrix).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].mode, Mode::Sft);
    assert!(rows[0].failed.is_none());
    assert_eq!(rows[0].results[0].per_seed.len(), 3);
    assert!(rows[1].failed.as_ref().unwrap().contains("missing.jsonl"));
    let table = gea_cli::ablation::render(&matrix, &rows);
    assert!(table.contains("±") && table.contains("failed"));
}

#[test]
fn ablation_matrix_rejects_unknown_keys() {
    assert!(AblationMatrix::parse("subset.a = x:y\neval_envs = gridnav8\nfoo = 1\n", "m").is_err());
    assert!(AblationMatrix::parse("subset.a = x:y\neval_envs = gridnav8\nmodes = rl\n", "m").is_err());
}
