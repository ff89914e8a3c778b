//! The `.msnv` container: config echo, video dimensions and one
//! range-coded record per decodable tensor, closed by a CRC-32.

use serde::Serialize;

use super::quant::{check_bits, qmax, quantize_value, QuantizedTensor};
use super::range_coder::{decode_values, empirical_entropy, encode_values, FreqTable};
use crate::bytes::{seal, unseal, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSNV";
pub const VERSION: u16 = 1;

/// Clip dimensions `(frames, height, width)`.
pub type Dims = (usize, usize, usize);

/// Quantize every decodable tensor at `bits`, using the frozen scales when the
/// model went through fine-tuning at the same depth.
pub fn quantize_model(model: &Model<f32>, bits: u32) -> Result<Vec<QuantizedTensor>> {
    check_bits(bits)?;
    match &model.quant {
        Some(q) if q.bits == bits => {}
        Some(q) => log::warn!("model was fine-tuned at {} bits, quantizing at {bits}", q.bits),
        None => log::warn!("model was not fine-tuned for quantization"),
    }
    model
        .layout
        .params
        .iter()
        .zip(&model.params)
        .enumerate()
        .filter(|(_, (p, _))| p.decodable)
        .map(|(i, (p, t))| {
            let data: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
            QuantizedTensor::quantize(&p.name, &p.shape, &data, bits, Some(model.scale_for(i, bits)))
        })
        .collect()
}

/// Per-tensor accounting of an encoded stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u32,
    pub count: usize,
    /// Histogram entropy of the integers, bits per symbol.
    pub entropy: f64,
    pub table_bytes: usize,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub tensors: Vec<TensorStats>,
}

impl Encoded {
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.payload_bytes).sum()
    }

    /// Everything that is not range-coded payload: magic, config, records
    /// headers, tables and checksum.
    pub fn header_bytes(&self) -> usize {
        self.bytes.len() - self.payload_bytes()
    }
}

pub fn entropy_encode(cfg: &RunConfig, dims: Dims, tensors: &[QuantizedTensor]) -> Encoded {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.blob(cfg.canonical().as_bytes());
    for d in [dims.0, dims.1, dims.2] {
        w.u64(d as u64);
    }
    w.u64(tensors.len() as u64);
    let mut stats = Vec::with_capacity(tensors.len());
    for t in tensors {
        w.blob(t.name.as_bytes());
        w.u64(t.shape.len() as u64);
        for &d in &t.shape {
            w.u64(d as u64);
        }
        w.u8(t.bits as u8);
        w.f64(t.scale);
        w.i32(t.zero_point);
        let table = FreqTable::from_values(&t.ints);
        let before = w.len();
        table.write(&mut w);
        let table_bytes = w.len() - before;
        let payload = encode_values(&table, &t.ints);
        w.blob(&payload);
        stats.push(TensorStats {
            name: t.name.clone(),
            shape: t.shape.clone(),
            bits: t.bits,
            count: t.ints.len(),
            entropy: empirical_entropy(&t.ints),
            table_bytes,
            payload_bytes: payload.len(),
        });
    }
    seal(&mut w);
    Encoded { bytes: w.buf, tensors: stats }
}

/// Everything a stream carries.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub config: RunConfig,
    pub dims: Dims,
    pub tensors: Vec<QuantizedTensor>,
    pub stats: Vec<TensorStats>,
}

pub fn entropy_decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::bitstream(0, "bad magic, not an .msnv stream"));
    }
    let body = unseal(bytes)?;
    let mut r = Reader::new(body);
    r.take(4, "magic")?;
    let ver = r.u16("version")?;
    if ver != VERSION {
        return Err(Error::bitstream(4, format!("unsupported version {ver}")));
    }
    let config = RunConfig::from_toml_str(&r.string("config echo")?)?;
    let dims = (r.u64("frames")? as usize, r.u64("height")? as usize, r.u64("width")? as usize);
    let n = r.count(1, "tensor count")?;
    let mut tensors = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos();
        let name = r.string("tensor name")?;
        let rank = r.count(8, "rank")?;
        let shape = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(count) = count else {
            return Err(Error::bitstream(at, format!("tensor {name}: shape {shape:?} overflows")));
        };
        let bits = r.u8("bit depth")? as u32;
        check_bits(bits).map_err(|e| Error::bitstream(at, e.to_string()))?;
        let scale = r.f64("scale")?;
        let zero_point = r.i32("zero point")?;
        let tpos = r.pos();
        let table = FreqTable::read(&mut r)?;
        let table_bytes = r.pos() - tpos;
        let ppos = r.pos() + 8;
        let payload = r.blob("payload")?;
        let ints = decode_values(&table, payload, count).map_err(|e| match e {
            Error::Bitstream { offset, reason } => Error::bitstream(ppos + offset, format!("tensor {name}: {reason}")),
            e => e,
        })?;
        let q = qmax(bits);
        if ints.iter().any(|&v| v < -q - 1 || v > q) {
            return Err(Error::bitstream(at, format!("tensor {name}: integer outside the {bits}-bit range")));
        }
        stats.push(TensorStats {
            name: name.clone(),
            shape: shape.clone(),
            bits,
            count,
            entropy: empirical_entropy(&ints),
            table_bytes,
            payload_bytes: payload.len(),
        });
        tensors.push(QuantizedTensor { name, shape, ints, scale, zero_point, bits });
    }
    if r.remaining() != 0 {
        return Err(Error::bitstream(r.pos(), "trailing bytes before checksum"));
    }
    Ok(Decoded { config, dims, tensors, stats })
}

/// Rebuild the decoder from a stream's contents. Tensors that are never coded
/// (training-only heads) are left at zero.
pub fn model_from_tensors(cfg: &RunConfig, dims: Dims, tensors: &[QuantizedTensor]) -> Result<Model<f32>> {
    let spec = ModelSpec::new(cfg, dims.0, dims.1, dims.2)?;
    let mut model = Model::<f32>::init(spec, 0);
    for (p, t) in model.layout.params.iter().zip(model.params.iter_mut()) {
        *t = Tensor::zeros(&p.shape);
    }
    let coded: Vec<usize> = (0..model.layout.params.len()).filter(|&i| model.layout.params[i].decodable).collect();
    if coded.len() != tensors.len() {
        return Err(Error::bitstream(0, format!("{} tensors, config implies {}", tensors.len(), coded.len())));
    }
    for (&i, q) in coded.iter().zip(tensors) {
        let p = &model.layout.params[i];
        if p.name != q.name || p.shape != q.shape {
            return Err(Error::bitstream(
                0,
                format!("tensor {} {:?} does not match layout {} {:?}", q.name, q.shape, p.name, p.shape),
            ));
        }
        let data = q.dequantize().into_iter().map(|v| v as f32).collect();
        model.params[i] = Tensor::from_vec(&q.shape, data);
    }
    Ok(model)
}

pub fn compress(model: &Model<f32>, cfg: &RunConfig, bits: u32) -> Result<Encoded> {
    let tensors = quantize_model(model, bits)?;
    let s = &model.spec;
    Ok(entropy_encode(cfg, (s.frames, s.height, s.width), &tensors))
}

pub fn decompress(bytes: &[u8]) -> Result<(RunConfig, Model<f32>)> {
    let d = entropy_decode(bytes)?;
    let m = model_from_tensors(&d.config, d.dims, &d.tensors)?;
    Ok((d.config, m))
}

/// Bits per pixel of a `bytes`-long stream for a `frames x height x width` clip.
pub fn bpp(bytes: usize, dims: Dims) -> f64 {
    8.0 * bytes as f64 / (dims.0 * dims.1 * dims.2) as f64
}

/// Standard deviation of `values` and the entropy (bits per value) of their
/// histogram on a `bits`-bit symmetric lattice spanning `[-range, range]`
/// (the largest magnitude when `range` is `None`).
pub fn value_entropy(values: &[f64], bits: u32, range: Option<f64>) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let m = range.unwrap_or_else(|| values.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    if m == 0.0 {
        return (sd, 0.0);
    }
    let qm = qmax(bits) as f64;
    let scale = m / qm;
    let ints: Vec<i32> = values.iter().map(|&v| quantize_value(v, scale, qm)).collect();
    (sd, empirical_entropy(&ints))
}

/// Spread and estimated entropy of all decodable parameters pooled together,
/// binned at 8 bits over their common range.
pub fn param_entropy(model: &Model<f32>) -> (f64, f64) {
    let values: Vec<f64> = model
        .layout
        .params
        .iter()
        .zip(&model.params)
        .filter(|(p, _)| p.decodable)
        .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64))
        .collect();
    value_entropy(&values, 8, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpp_definition() {
        assert_eq!(bpp(72, (1, 24, 24)), 1.0);
        assert_eq!(bpp(100, (2, 24, 24)) * 2.0, bpp(100, (1, 24, 24)));
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(value_entropy(&[0.3; 100], 8, None).1, 0.0);
        let bins: Vec<i32> = (-128..128).collect();
        assert!((empirical_entropy(&bins) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn bad_magic_rejected_before_checksum() {
        let e = entropy_decode(b"NOPE0000").unwrap_err();
        assert!(e.to_string().contains("magic"));
    }
}
