//! Little-endian policy checkpoint:
//!
//! ```text
//! "GEAP" u32 version
//! u64 len  config        JSON text of the model configuration
//! u64 len  vocabulary    u32 action_base, u32 action_span, u32 n, n × str
//! u64 len  weights       base parameters: u32 n, n × (str name, u32 rank, u32 dims…, f64 data)
//! u64 len  adapters      u32 present [u32 rank, f64 alpha, f64 dropout, parameters as above]
//! u64 len  value head    parameters as above
//! u64 len  popart        u32 present [f64 mu, f64 nu, f64 beta, f64 sigma_min]
//! u64 len  trainer       u32 present [u64 updates, rng state, u32 n optimizers, optimizer…]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{is_adapter, is_value_param, LoraSettings, PolicyConfig, PolicyModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::layers::Parameterized;
use crate::numerics::optim::Moments;
use crate::numerics::tensor::Tensor;
use crate::numerics::{AdamW, AdamWConfig};
use crate::rl::PopArtStats;
use crate::util::bin::{ByteReader, ByteWriter};

pub const POLICY_MAGIC: &[u8; 4] = b"GEAP";
pub const POLICY_VERSION: u32 = 1;

/// Resumable trainer state stored alongside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub updates: u64,
    pub rng: ChaCha8Rng,
    pub optimizers: Vec<AdamW>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub model: PolicyModel,
    pub popart: Option<PopArtStats>,
    pub trainer: Option<TrainerState>,
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f64_slice(t.data());
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.corrupt(format!("implausible tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    if n * 8 > r.remaining() {
        return Err(r.corrupt(format!("tensor {shape:?} exceeds remaining bytes")));
    }
    Tensor::from_vec(&shape, r.f64_vec(n)?)
}

fn write_params(w: &mut ByteWriter, model: &PolicyModel, select: &dyn Fn(&str) -> bool) {
    let mut entries = Vec::new();
    model.visit_params("", &mut |name, p| {
        if select(name) {
            entries.push((name.to_string(), p.value.clone()));
        }
    });
    w.u32(entries.len() as u32);
    for (name, t) in entries {
        w.str(&name);
        write_tensor(w, &t);
    }
}

fn read_params(r: &mut ByteReader, into: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let n = r.u32()?;
    for _ in 0..n {
        let name = r.str()?;
        let t = read_tensor(r)?;
        if into.insert(name.clone(), t).is_some() {
            return Err(r.corrupt(format!("parameter `{name}` stored twice")));
        }
    }
    Ok(())
}

fn write_rng(w: &mut ByteWriter, rng: &ChaCha8Rng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
}

fn read_rng(r: &mut ByteReader) -> Result<ChaCha8Rng> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}

fn write_adamw(w: &mut ByteWriter, opt: &AdamW) {
    let c = opt.config;
    for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.f64(v);
    }
    w.u64(opt.step);
    w.u32(opt.moments.len() as u32);
    for (name, m) in &opt.moments {
        w.str(name);
        write_tensor(w, &m.first);
        write_tensor(w, &m.second);
    }
}

fn read_adamw(r: &mut ByteReader) -> Result<AdamW> {
    let config = AdamWConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let mut opt = AdamW::new(config);
    opt.step = r.u64()?;
    let n = r.u32()?;
    for _ in 0..n {
        let name = r.str()?;
        let first = read_tensor(r)?;
        let second = read_tensor(r)?;
        opt.moments.insert(name, Moments { first, second });
    }
    Ok(opt)
}

pub fn checkpoint_to_bytes(ck: &PolicyCheckpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut w = ByteWriter::new();
    w.bytes(POLICY_MAGIC);
    w.u32(POLICY_VERSION);
    w.section(|s| s.str(&serde_json::to_string(&m.config).expect("config serializes")));
    w.section(|s| {
        s.u32(m.vocab.action_base());
        s.u32(m.vocab.action_span());
        s.u32(m.vocab.words().len() as u32);
        for word in m.vocab.words() {
            s.str(word);
        }
    });
    w.section(|s| write_params(s, m, &|n| !is_adapter(n) && !is_value_param(n)));
    w.section(|s| match m.lora {
        None => s.u32(0),
        Some(l) => {
            s.u32(1);
            s.u32(l.rank as u32);
            s.f64(l.alpha);
            s.f64(l.dropout);
            write_params(s, m, &is_adapter);
        }
    });
    w.section(|s| write_params(s, m, &is_value_param));
    w.section(|s| match &ck.popart {
        None => s.u32(0),
        Some(p) => {
            s.u32(1);
            for v in [p.mu, p.nu, p.beta, p.sigma_min] {
                s.f64(v);
            }
        }
    });
    w.section(|s| match &ck.trainer {
        None => s.u32(0),
        Some(t) => {
            s.u32(1);
            s.u64(t.updates);
            write_rng(s, &t.rng);
            s.u32(t.optimizers.len() as u32);
            for o in &t.optimizers {
                write_adamw(s, o);
            }
        }
    });
    w.into_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<PolicyCheckpoint> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.take(4)?;
    if magic != POLICY_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic {magic:?}, expected \"GEAP\""),
        });
    }
    let version = r.u32()?;
    if version != POLICY_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut sec = r.section()?;
    let config: PolicyConfig =
        serde_json::from_str(&sec.str()?).map_err(|e| sec.corrupt(format!("config: {e}")))?;
    sec.finish()?;

    let mut sec = r.section()?;
    let (base, span) = (sec.u32()?, sec.u32()?);
    let n = sec.u32()?;
    let words = (0..n).map(|_| sec.str()).collect::<Result<Vec<_>>>()?;
    sec.finish()?;
    let vocab = Vocabulary::new(words, base, span)?;

    let mut params = BTreeMap::new();
    let mut sec = r.section()?;
    read_params(&mut sec, &mut params)?;
    sec.finish()?;
    let mut sec = r.section()?;
    let lora = if sec.u32()? != 0 {
        let settings = LoraSettings {
            rank: sec.u32()? as usize,
            alpha: sec.f64()?,
            dropout: sec.f64()?,
        };
        read_params(&mut sec, &mut params)?;
        Some(settings)
    } else {
        None
    };
    sec.finish()?;
    let mut sec = r.section()?;
    read_params(&mut sec, &mut params)?;
    sec.finish()?;

    let mut sec = r.section()?;
    let popart = if sec.u32()? != 0 {
        Some(PopArtStats {
            mu: sec.f64()?,
            nu: sec.f64()?,
            beta: sec.f64()?,
            sigma_min: sec.f64()?,
        })
    } else {
        None
    };
    sec.finish()?;

    let mut sec = r.section()?;
    let trainer = if sec.u32()? != 0 {
        let updates = sec.u64()?;
        let rng = read_rng(&mut sec)?;
        let n = sec.u32()?;
        let optimizers = (0..n).map(|_| read_adamw(&mut sec)).collect::<Result<Vec<_>>>()?;
        Some(TrainerState {
            updates,
            rng,
            optimizers,
        })
    } else {
        None
    };
    sec.finish()?;
    r.finish()?;

    let mut model = PolicyModel::new(config, vocab)?;
    if let Some(l) = lora {
        model.attach_lora(l, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let mut problem = None;
    model.visit_params_mut("", &mut |name, p| match params.remove(name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t,
        Some(t) => {
            problem.get_or_insert(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.value.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing parameter `{name}`"));
        }
    });
    if let Some(name) = params.keys().next() {
        problem.get_or_insert(format!("unexpected parameter `{name}`"));
    }
    if let Some(detail) = problem {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            detail,
        });
    }
    Ok(PolicyCheckpoint {
        model,
        popart,
        trainer,
    })
}

pub fn save_checkpoint(ck: &PolicyCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}
