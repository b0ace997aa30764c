//! Little-endian codec file:
//!
//! ```text
//! "RVQC" u32 version u32 M u32 K u32 d_code u32 D_max u32 V_base
//! u32 n_widths { u32 width }*           encoder widths, input first
//! u64 len  codebooks                    M·K·d_code f32, row-major
//! u64 len  encoder                      per affine layer: weight f32[out·in], bias f32[out]
//! u64 len  decoder                      same layout, widths reversed
//! u64 len  normalization                mean f32[D_max], std f32[D_max]
//! u64 len  options                      u32 shared_token_range, f64 commitment
//! ```

use std::path::Path;

use super::{CodecConfig, RvqCodec};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::{Activation, Layer, Linear, Sequential};
use crate::util::bin::{ByteReader, ByteWriter};

pub const CODEC_MAGIC: &[u8; 4] = b"RVQC";
pub const CODEC_VERSION: u32 = 1;

fn write_mlp(w: &mut ByteWriter, net: &Sequential) {
    for layer in &net.layers {
        if let Layer::Affine(l) = layer {
            w.f32_slice(l.weight.value.data());
            match &l.bias {
                Some(b) => w.f32_slice(b.value.data()),
                None => w.f32_slice(&vec![0.0; l.out_dim()]),
            }
        }
    }
}

fn read_mlp(r: &mut ByteReader, widths: &[usize]) -> Result<Sequential> {
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let mut l = Linear::zeros(inp, out, true);
        l.weight.value = Tensor::from_vec(&[out, inp], r.f32_vec(out * inp)?)?;
        if let Some(b) = &mut l.bias {
            b.value = Tensor::from_vec(&[out], r.f32_vec(out)?)?;
        }
        layers.push(Layer::Affine(l));
        if i + 2 < widths.len() {
            layers.push(Layer::Activation(Activation::Gelu));
        }
    }
    Ok(Sequential::new(layers))
}

pub fn codec_to_bytes(codec: &RvqCodec) -> Vec<u8> {
    let c = &codec.config;
    let widths = c.encoder_widths();
    let mut w = ByteWriter::new();
    w.bytes(CODEC_MAGIC);
    for v in [
        CODEC_VERSION,
        c.levels as u32,
        c.codebook_size as u32,
        c.code_dim as u32,
        c.max_action_dim as u32,
        c.token_base,
        widths.len() as u32,
    ] {
        w.u32(v);
    }
    for &x in &widths {
        w.u32(x as u32);
    }
    w.section(|s| {
        for cb in &codec.codebooks {
            s.f32_slice(cb.value.data());
        }
    });
    w.section(|s| write_mlp(s, &codec.encoder));
    w.section(|s| write_mlp(s, &codec.decoder));
    w.section(|s| {
        s.f32_slice(&codec.mean);
        s.f32_slice(&codec.std);
    });
    w.section(|s| {
        s.u32(c.shared_token_range as u32);
        s.f64(c.commitment);
    });
    w.into_bytes()
}

pub fn codec_from_bytes(bytes: &[u8], path: &Path) -> Result<RvqCodec> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.take(4)?;
    if magic != CODEC_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic {magic:?}, expected \"RVQC\""),
        });
    }
    let version = r.u32()?;
    if version != CODEC_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported codec version {version}"),
        });
    }
    let levels = r.u32()? as usize;
    let codebook_size = r.u32()? as usize;
    let code_dim = r.u32()? as usize;
    let max_action_dim = r.u32()? as usize;
    let token_base = r.u32()?;
    let n_widths = r.u32()? as usize;
    if n_widths < 2 || n_widths > 64 {
        return Err(r.corrupt(format!("implausible width count {n_widths}")));
    }
    let widths: Vec<usize> = (0..n_widths).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    if widths[0] != max_action_dim || widths[n_widths - 1] != code_dim {
        return Err(r.corrupt("encoder widths disagree with header".into()));
    }

    let mut sec = r.section()?;
    let mut codebooks = Vec::with_capacity(levels);
    for _ in 0..levels {
        codebooks.push(Tensor::from_vec(
            &[codebook_size, code_dim],
            sec.f32_vec(codebook_size * code_dim)?,
        )?);
    }
    sec.finish()?;
    let mut sec = r.section()?;
    let encoder = read_mlp(&mut sec, &widths)?;
    sec.finish()?;
    let mut rev = widths.clone();
    rev.reverse();
    let mut sec = r.section()?;
    let decoder = read_mlp(&mut sec, &rev)?;
    sec.finish()?;
    let mut sec = r.section()?;
    let mean = sec.f32_vec(max_action_dim)?;
    let std = sec.f32_vec(max_action_dim)?;
    sec.finish()?;
    let mut sec = r.section()?;
    let shared = sec.u32()? != 0;
    let commitment = sec.f64()?;
    sec.finish()?;

    let config = CodecConfig {
        levels,
        codebook_size,
        code_dim,
        max_action_dim,
        token_base,
        hidden: if n_widths > 2 { widths[1] } else { code_dim },
        layers: n_widths - 1,
        commitment,
        shared_token_range: shared,
    };
    RvqCodec::from_parts(config, encoder, decoder, codebooks, mean, std)
}

pub fn save_codec(codec: &RvqCodec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, codec_to_bytes(codec)).map_err(|e| Error::io(path, e))
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<RvqCodec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    codec_from_bytes(&bytes, path)
}
