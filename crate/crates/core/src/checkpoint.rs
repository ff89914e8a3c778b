//! Single-file training checkpoints: config echo plus named f32 arrays.

use std::fs;
use std::path::Path;

use crate::bytes::{seal, unseal, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, QuantState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u16 = 1;

pub fn encode(model: &Model<f32>, cfg: &RunConfig, step: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.blob(cfg.canonical().as_bytes());
    let s = &model.spec;
    for v in [s.frames, s.height, s.width] {
        w.u64(v as u64);
    }
    w.u64(step);
    w.u64(model.params.len() as u64);
    for (p, t) in model.layout.params.iter().zip(&model.params) {
        w.blob(p.name.as_bytes());
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f32(v);
        }
    }
    match &model.quant {
        Some(q) => {
            w.u8(1);
            w.u32(q.bits);
            for s in &q.scales {
                w.f64(s.unwrap_or(f64::NAN));
            }
        }
        None => w.u8(0),
    }
    seal(&mut w);
    w.buf
}

/// Returns the config, the model and the optimizer step it was taken at.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Model<f32>, u64)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::bitstream(0, "not a checkpoint (bad magic)"));
    }
    let body = unseal(bytes)?;
    let mut r = Reader::new(body);
    r.take(4, "magic")?;
    let ver = r.u16("version")?;
    if ver != VERSION {
        return Err(Error::bitstream(4, format!("unsupported checkpoint version {ver}")));
    }
    let cfg = RunConfig::from_toml_str(&r.string("config")?)?;
    let frames = r.u64("frames")? as usize;
    let height = r.u64("height")? as usize;
    let width = r.u64("width")? as usize;
    let step = r.u64("step")?;
    let spec = ModelSpec::new(&cfg, frames, height, width)?;
    let mut model = Model::<f32>::init(spec, 0);
    let at = r.pos();
    let n = r.count(1, "tensor count")?;
    if n != model.params.len() {
        return Err(Error::bitstream(at, format!("{n} tensors, config implies {}", model.params.len())));
    }
    for i in 0..n {
        let at = r.pos();
        let name = r.string("tensor name")?;
        let nd = r.count(8, "rank")?;
        let shape = (0..nd).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let spec = &model.layout.params[i];
        if name != spec.name || shape != spec.shape {
            return Err(Error::bitstream(
                at,
                format!("tensor {name} {shape:?} does not match layout {} {:?}", spec.name, spec.shape),
            ));
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f32("values")).collect::<Result<Vec<_>>>()?;
        model.params[i] = Tensor::from_vec(&shape, data);
    }
    if r.u8("quant flag")? == 1 {
        let bits = r.u32("bits")?;
        let scales = (0..n)
            .map(|_| r.f64("scale").map(|s| (!s.is_nan()).then_some(s)))
            .collect::<Result<Vec<_>>>()?;
        model.quant = Some(QuantState { bits, scales });
    }
    if r.remaining() != 0 {
        return Err(Error::bitstream(r.pos(), "trailing bytes"));
    }
    Ok((cfg, model, step))
}

pub fn save(path: &Path, model: &Model<f32>, cfg: &RunConfig, step: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, cfg, step))
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load(path: &Path) -> Result<(RunConfig, Model<f32>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    decode(&bytes).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })
}
