//! Per-tensor symmetric integer quantization.

use crate::error::{Error, Result};

/// Largest lattice index for a `bits`-bit symmetric quantizer.
pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// `max|w| / qmax`, or 1 for an all-zero tensor.
pub fn symmetric_scale(values: impl IntoIterator<Item = f64>, bits: u32) -> f64 {
    let m = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m / qmax(bits) as f64
    } else {
        1.0
    }
}

/// Lattice index of `v`.
#[inline]
pub fn quantize_value(v: f64, scale: f64, qmax: f64) -> i32 {
    (v / scale).round().clamp(-qmax, qmax) as i32
}

/// Reconstruction of a lattice index. Every dequantization in the crate goes
/// through here so training-time fake quantization and decoding agree bitwise.
#[inline]
pub fn dequantize_value(q: i32, scale: f64) -> f64 {
    scale * q as f64
}

#[inline]
pub fn fake_quant_value(v: f64, scale: f64, qmax: f64) -> f64 {
    dequantize_value(quantize_value(v, scale, qmax), scale)
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (4..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!("bit depth {bits} outside [4, 16]")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub ints: Vec<i32>,
    pub scale: f64,
    /// Always 0 for the symmetric quantizer; kept in the format.
    pub zero_point: i32,
    pub bits: u32,
}

impl QuantizedTensor {
    pub fn quantize(name: &str, shape: &[usize], data: &[f64], bits: u32, scale: Option<f64>) -> Result<Self> {
        check_bits(bits)?;
        let scale = scale.unwrap_or_else(|| symmetric_scale(data.iter().copied(), bits));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("tensor {name}: invalid scale {scale}")));
        }
        let qm = qmax(bits) as f64;
        Ok(Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            ints: data.iter().map(|&v| quantize_value(v, scale, qm)).collect(),
            scale,
            zero_point: 0,
            bits,
        })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.ints
            .iter()
            .map(|&q| dequantize_value(q - self.zero_point, self.scale))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_hit_lattice_extremes() {
        let q = QuantizedTensor::quantize("w", &[3], &[-1.0, 0.0, 1.0], 8, None).unwrap();
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.ints, vec![-127, 0, 127]);
    }

    #[test]
    fn zero_tensor_gets_unit_scale() {
        let q = QuantizedTensor::quantize("z", &[4], &[0.0; 4], 8, None).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.ints.iter().all(|&v| v == 0));
    }

    #[test]
    fn bits_out_of_range_rejected() {
        assert!(QuantizedTensor::quantize("w", &[1], &[1.0], 3, None).is_err());
        assert!(QuantizedTensor::quantize("w", &[1], &[1.0], 17, None).is_err());
    }

    #[test]
    fn fake_quant_is_a_projection() {
        let scale = 0.013;
        for i in -500..500 {
            let v = i as f64 * 0.0037;
            let once = fake_quant_value(v, scale, 127.0);
            assert_eq!(fake_quant_value(once, scale, 127.0), once);
        }
    }
}
