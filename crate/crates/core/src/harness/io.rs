//! Artifact formats: TNSR tensors, weight bundles, and PGM previews.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serialize one tensor: magic, version, u32 LE rank and dims, f32 LE payload.
pub fn encode_tnsr(x: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let dims = x.dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parse one tensor from the front of `bytes`; returns it with the number of
/// bytes consumed. Ranks below 4 are padded with leading ones.
pub fn decode_tnsr(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let take = |at: usize, n: usize| {
        bytes.get(at..at + n).ok_or_else(|| format_err(format!("TNSR truncated at byte {at}")))
    };
    if take(0, 4)? != MAGIC {
        return Err(format_err("missing TNSR magic"));
    }
    let version = take(4, 1)?[0];
    if version != VERSION {
        return Err(format_err(format!("unsupported TNSR version {version}")));
    }
    let u32_at = |at: usize| -> Result<usize> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize) };
    let ndim = u32_at(5)?;
    if ndim == 0 || ndim > 4 {
        return Err(format_err(format!("TNSR rank {ndim} not in 1..=4")));
    }
    let mut dims = [1usize; 4];
    for i in 0..ndim {
        dims[4 - ndim + i] = u32_at(9 + 4 * i)?;
    }
    let start = 9 + 4 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err("TNSR dims overflow"))?;
    let payload = take(start, count.checked_mul(4).ok_or_else(|| format_err("TNSR dims overflow"))?)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((Tensor::new(dims, data)?, start + 4 * count))
}

pub fn write_tnsr(path: &Path, x: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(25 + x.len() * 4);
    encode_tnsr(x, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tnsr(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tnsr(&bytes)?;
    if used != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after TNSR payload", bytes.len() - used)));
    }
    Ok(t)
}

/// Every parameter tensor in layer order, as back-to-back TNSR records.
pub fn dump_weights(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    for d in model.layer_graph() {
        for p in &d.params {
            encode_tnsr(p, &mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Rebuild a model from [`dump_weights`] output. The graph comes from `cfg`;
/// every parameter must match its expected shape.
pub fn load_weights(path: &Path, cfg: ModelConfig) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut layers = Model::build(cfg.clone(), 0)?.layer_graph().to_vec();
    let mut at = 0;
    for d in layers.iter_mut() {
        for p in d.params.iter_mut() {
            let (t, used) = decode_tnsr(&bytes[at..])?;
            if t.dims() != p.dims() {
                return Err(format_err(format!("layer {} parameter {:?}, file has {:?}", d.id, p.dims(), t.dims())));
            }
            *p = t;
            at += used;
        }
    }
    if at != bytes.len() {
        return Err(format_err("weight file has more tensors than the model"));
    }
    Model::from_layers(cfg, layers)
}

/// 8-bit gray levels for `x` normalized over `[lo, hi]`, round half up.
/// A degenerate range maps everything to mid-gray.
pub fn gray_levels(x: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = hi as f64 - lo as f64;
    x.iter()
        .map(|&v| {
            if !(span > 0.0) {
                return 128;
            }
            let s = (v as f64 - lo as f64) / span * 255.0;
            (s + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// One binary P5 page per (sample, channel), concatenated.
pub fn encode_pgm(x: &Tensor, range: (f32, f32)) -> Vec<u8> {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::new();
    let plane = h * w;
    for i in 0..n * c {
        write!(out, "P5\n{w} {h}\n255\n").expect("write to Vec");
        out.extend(gray_levels(&x.data()[i * plane..(i + 1) * plane], range.0, range.1));
    }
    out
}

pub fn write_pgm(path: &Path, x: &Tensor, range: (f32, f32)) -> Result<()> {
    fs::write(path, encode_pgm(x, range))?;
    Ok(())
}
