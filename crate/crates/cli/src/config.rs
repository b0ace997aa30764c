//! Flat `key = value` run configuration with named presets.

use std::collections::BTreeMap;
use std::path::Path;

use gea_core::codec::{CodecConfig, CodecTrainConfig};
use gea_core::policy::PolicyConfig;
use gea_core::rl::PpoConfig;
use gea_core::sft::SftConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    /// Zero decodes greedily.
    pub temperature: f64,
}

/// Every tunable default of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Reproducible runs; when off and no seed is given, the seed comes from the clock.
    pub deterministic: bool,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSettings,
}

pub const PRESETS: [&str; 2] = ["desk", "paper-echo"];

/// Keys that exist in the structs but are set through flags or the global seed.
const HIDDEN_KEYS: [&str; 5] = ["codec_train.checkpoint", "codec_train.seed", "policy.seed", "sft.seed", "ppo.seed"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let eval = EvalSettings {
            episodes: 100,
            temperature: 0.0,
        };
        match name {
            "desk" => Ok(RunConfig {
                seed: 0,
                deterministic: true,
                codec: CodecConfig::desk(),
                codec_train: CodecTrainConfig::desk(),
                policy: PolicyConfig::desk(),
                sft: SftConfig::desk(),
                ppo: PpoConfig::desk(),
                eval,
            }),
            "paper-echo" => Ok(RunConfig {
                seed: 0,
                deterministic: true,
                codec: CodecConfig::paper_echo(),
                codec_train: CodecTrainConfig::paper_echo(),
                policy: PolicyConfig::desk(),
                sft: SftConfig::paper_echo(),
                ppo: PpoConfig::paper_echo(),
                eval,
            }),
            other => Err(CliError::Usage(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Settable keys with their current values, in sorted order.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.into_iter()
            .filter(|(k, _)| !HIDDEN_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k, render(&v)))
            .collect()
    }

    /// Sets one dotted key; `ppo.lora = none` selects full finetuning.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let bad = |detail: String| CliError::Config(format!("key `{key}`: {detail}"));
        if HIDDEN_KEYS.contains(&key) {
            return Err(bad("not settable here; use the global `seed` or a command flag".into()));
        }
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let raw = raw.trim();
        if key == "ppo.lora" {
            tree["ppo"]["lora"] = match raw {
                "none" => Value::Null,
                "desk" => serde_json::to_value(gea_core::policy::LoraSettings::desk()).expect("serializes"),
                "paper-echo" => serde_json::to_value(gea_core::policy::LoraSettings::paper_echo()).expect("serializes"),
                other => return Err(bad(format!("expected none, desk or paper-echo, got `{other}`"))),
            };
        } else {
            let slot = lookup(&mut tree, key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
            *slot = parse_like(slot, raw).map_err(bad)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Applies a config file's lines over `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let k = k.trim();
            if k == "preset" {
                return Err(CliError::Config(format!(
                    "{origin}:{}: `preset` must come from the --preset flag",
                    i + 1
                )));
            }
            self.set(k, v)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", i + 1, e.detail())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| gea_core::Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Copies the global seed into every module.
    pub fn propagate_seed(&mut self) {
        self.codec_train.seed = self.seed;
        self.policy.seed = self.seed;
        self.sft.seed = self.seed;
        self.ppo.seed = self.seed;
    }

    /// Renders the settable keys in file format.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut()?.get_mut(part)?;
    }
    (!node.is_object()).then_some(node)
}

fn parse_like(current: &Value, raw: &str) -> Result<Value, String> {
    let number = |s: &str| -> Result<Value, String> {
        let x: f64 = s.trim().parse().map_err(|_| format!("expected a number, got `{s}`"))?;
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .ok_or_else(|| format!("non-finite number `{s}`"))
    };
    match current {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got `{raw}`")),
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(|x| Value::Number(x.into()))
            .map_err(|_| format!("expected a non-negative integer, got `{raw}`")),
        Value::Number(_) => number(raw),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(number)
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        Value::Null | Value::Object(_) => Err("cannot be set directly".into()),
    }
}

/// Resolves the global seed: flag, then config file, then `GEA_SEED`.
pub fn resolve_seed(flag: Option<u64>, file_seed: Option<u64>, deterministic: bool) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file_seed) {
        return Ok(s);
    }
    match std::env::var("GEA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("GEA_SEED must be a non-negative integer, got `{v}`"))),
        Err(_) if deterministic => Ok(0),
        Err(_) => Ok(std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)),
    }
}

/// Keys that appear in a config file, used to tell whether it set `seed`.
pub fn file_keys(text: &str) -> Map<String, Value> {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), Value::String(v.trim().to_string())))
        .collect()
}
