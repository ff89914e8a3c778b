//! Inpainting (training with a central loss mask) and frame interpolation
//! from a model fitted on odd frames only.

use serde::{Deserialize, Serialize};

use crate::decoder::time_pos;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::metrics::psnr_from_mse;
use crate::model::Model;
use crate::render::render_with;
use crate::tensor::{dims3, Tensor};
use crate::video_io::VideoTensor;

/// `[h, w, 3]` mask with a centered `rows x cols` block of ones.
pub fn central_mask(h: usize, w: usize, size: (usize, usize)) -> Result<Tensor<f32>> {
    let (mr, mc) = size;
    if mr > h || mc > w {
        return Err(Error::config(format!("mask {mr}x{mc} does not fit a {h}x{w} frame")));
    }
    if mr == h && mc == w {
        return Err(Error::config(format!("mask {mr}x{mc} covers the entire frame")));
    }
    let (r0, c0) = ((h - mr) / 2, (w - mc) / 2);
    Ok(Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x) = (i / (w * 3), (i / 3) % w);
        f32::from((r0..r0 + mr).contains(&y) && (c0..c0 + mc).contains(&x))
    }))
}

/// Loss masks for pyramid levels `1..=levels` of an `h x w` clip, or `None`
/// for an empty mask. A coarse pixel is masked when any full-resolution pixel
/// it covers is, so sizes that divide evenly halve exactly.
pub fn level_masks(h: usize, w: usize, levels: usize, size: Option<(usize, usize)>) -> Result<Option<Vec<Tensor<f32>>>> {
    let Some(size) = size.filter(|&(r, c)| r > 0 && c > 0) else {
        return Ok(None);
    };
    let top = central_mask(h, w, size)?;
    let mut out = vec![top];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        out.push(crate::video_io::downsample2(prev, crate::config::Downsample::Max));
    }
    out.reverse();
    Ok(Some(out))
}

/// PSNR over the pixels where `mask` is set, every frame.
pub fn masked_psnr(recon: &VideoTensor, reference: &VideoTensor, mask: &Tensor<f32>) -> Result<f64> {
    if recon.len() != reference.len() {
        return Err(Error::Shape(format!("{} frames vs {}", recon.len(), reference.len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in recon.frames().iter().zip(reference.frames()) {
        if a.shape() != b.shape() || a.shape() != mask.shape() {
            return Err(Error::Shape(format!("{:?} / {:?} / mask {:?}", a.shape(), b.shape(), mask.shape())));
        }
        for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.data()) {
            if m > 0.5 {
                let d = x as f64 - y as f64;
                s += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(s / n as f64))
}

/// Constant mid-gray fill of the masked region, the trivial inpainting baseline.
pub fn gray_fill(video: &VideoTensor, mask: &Tensor<f32>) -> Result<VideoTensor> {
    let frames = video
        .frames()
        .iter()
        .map(|f| {
            let data = f.data().iter().zip(mask.data()).map(|(&v, &m)| if m > 0.5 { 0.5 } else { v }).collect();
            Tensor::from_vec(f.shape(), data)
        })
        .collect();
    VideoTensor::new(frames)
}

/// Source indices `1, 3, 5, ...` of a `source_frames` clip; training index
/// `k` is source frame `2k - 1`.
pub fn odd_frames(source_frames: usize) -> Vec<usize> {
    (1..=source_frames).step_by(2).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedInfo {
    /// 1-based index in the source clip.
    pub source_index: usize,
    /// Set when a neighbor was missing and the nearest trained frame was
    /// decoded instead of a midpoint grid.
    pub fallback: bool,
}

/// Even source frames decoded from the midpoint of the neighboring fused grids
/// of a model trained on the odd frames. Reads no pixels at all.
pub fn interpolate_frames(model: &Model<f32>, even: &[usize]) -> Result<(VideoTensor, Vec<InterpolatedInfo>)> {
    let k_max = model.spec.frames;
    let mut frames = Vec::with_capacity(even.len());
    let mut info = Vec::with_capacity(even.len());
    for &s in even {
        if s == 0 || s % 2 != 0 {
            return Err(Error::config(format!("frame {s} is not an even source index")));
        }
        let k = s / 2;
        let (frame, fallback) = if k >= 1 && k < k_max {
            let tpos = time_pos(k as f64 + 0.5, k_max);
            let f = render_with(model, tpos, |g, net| {
                let a = encode(g, net, k)?;
                let b = encode(g, net, k + 1)?;
                let sum = g.add(a, b);
                Ok(g.mul_scalar(sum, 0.5))
            })?;
            (f, false)
        } else {
            let t = k.clamp(1, k_max);
            log::warn!("frame {s}: no trained neighbor on both sides, using trained frame {}", 2 * t - 1);
            (crate::render::render_frame(model, t)?, true)
        };
        frames.push(frame);
        info.push(InterpolatedInfo { source_index: s, fallback });
    }
    Ok((VideoTensor::new(frames)?, info))
}

/// Column centroid of channel `c`, weighting each pixel by how far it rises
/// above `floor` so a flat background does not pull it toward the center.
pub fn column_centroid(frame: &Tensor<f32>, c: usize, floor: f32) -> f64 {
    let [_, w, ch] = dims3(frame.shape());
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &v) in frame.data().iter().enumerate().filter(|(i, _)| i % ch == c) {
        let x = (i / ch) % w;
        let m = (v - floor).max(0.0) as f64;
        num += x as f64 * m;
        den += m;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_levels_halve() {
        let m = level_masks(48, 96, 3, Some((8, 16))).unwrap().unwrap();
        let count = |t: &Tensor<f32>| t.data().iter().filter(|&&v| v > 0.5).count() / 3;
        assert_eq!(count(&m[2]), 8 * 16);
        assert_eq!(count(&m[1]), 4 * 8);
        assert_eq!(count(&m[0]), 2 * 4);
        assert!(level_masks(48, 96, 3, Some((0, 0))).unwrap().is_none());
        assert!(level_masks(48, 96, 3, Some((48, 96))).is_err());
        assert!(level_masks(48, 96, 3, Some((50, 10))).is_err());
    }

    #[test]
    fn centered_1080p_mask_at_half_resolution() {
        let m = level_masks(1080, 1920, 2, Some((120, 120))).unwrap().unwrap();
        let half = &m[0];
        assert_eq!(half.shape(), &[540, 960, 3]);
        let rows: Vec<usize> = (0..540).filter(|&y| half.data()[(y * 960 + 480) * 3] > 0.5).collect();
        let cols: Vec<usize> = (0..960).filter(|&x| half.data()[(270 * 960 + x) * 3] > 0.5).collect();
        assert_eq!((rows.len(), cols.len()), (60, 60));
        assert_eq!((rows[0], cols[0]), ((540 - 60) / 2, (960 - 60) / 2));
    }
}
