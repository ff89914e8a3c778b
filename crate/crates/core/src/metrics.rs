//! PSNR, MS-SSIM and Bjontegaard delta rate.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{avg_pool2, filter_valid, gaussian_1d};
use crate::objective::{ms_ssim_scales, ms_ssim_weights, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensor::{dims3, Tensor};
use crate::video_io::VideoTensor;

pub const PSNR_CAP: f64 = 100.0;

/// PSNR for a mean squared error on a unit peak.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Sum of squared differences and element count.
pub fn sq_err(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((s, a.len()))
}

/// PSNR from the mean squared error over every pixel of every frame.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} frames vs {}", a.len(), b.len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.frames().iter().zip(b.frames()) {
        let (ds, dn) = sq_err(x, y)?;
        s += ds;
        n += dn;
    }
    Ok(psnr_from_mse(s / n as f64))
}

pub fn psnr_frame(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (s, n) = sq_err(a, b)?;
    Ok(psnr_from_mse(s / n as f64))
}

/// MS-SSIM of one `[h, w, c]` pair, channel-averaged.
pub fn ms_ssim_frame(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let [h, w, c] = dims3(a.shape());
    let m = ms_ssim_scales(h.min(w));
    if m == 0 {
        return Err(Error::Metric(format!("{h}x{w} is smaller than one {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let weights = ms_ssim_weights(m);
    let win = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut x, mut y, mut hh, mut ww) = (a.data().to_vec(), b.data().to_vec(), h, w);
    let mut prod = vec![1.0f64; c];
    for (i, &wt) in weights.iter().enumerate() {
        let f = |v: &[f64]| filter_valid(v, hh, ww, c, &win);
        let mx = f(&x);
        let my = f(&y);
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let fxx = f(&sq(&x, &x));
        let fyy = f(&sq(&y, &y));
        let fxy = f(&sq(&x, &y));
        let mut ssim = vec![0.0; c];
        let mut cs = vec![0.0; c];
        let npx = mx.len() / c;
        for p in 0..mx.len() {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = fxx[p] - ux * ux;
            let syy = fyy[p] - uy * uy;
            let sxy = fxy[p] - ux * uy;
            let csv = (2.0 * sxy + c2) / (sxx + syy + c2);
            let lv = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
            cs[p % c] += csv;
            ssim[p % c] += lv * csv;
        }
        let last = i + 1 == m;
        for ch in 0..c {
            let v = if last { ssim[ch] } else { cs[ch] } / npx as f64;
            prod[ch] *= v.max(0.0).powf(wt);
        }
        if !last {
            x = avg_pool2(&x, hh, ww, c);
            y = avg_pool2(&y, hh, ww, c);
            hh /= 2;
            ww /= 2;
        }
    }
    Ok(prod.iter().sum::<f64>() / c as f64)
}

/// Frame-averaged MS-SSIM.
pub fn ms_ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} frames vs {}", a.len(), b.len())));
    }
    let mut s = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        s += ms_ssim_frame(&x.cast(), &y.cast())?;
    }
    Ok(s / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "psnr" => Ok(Quality::Psnr),
            "ms_ssim" | "msssim" => Ok(Quality::MsSsim),
            _ => Err(Error::config(format!("unknown metric {s:?}; expected psnr or ms_ssim"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate; needs at least 4 points with distinct positive rates.
    pub fn new(label: &str, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Metric(format!("curve {label:?} has {} points; need at least 4", points.len())));
        }
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.psnr.is_finite() || !p.ms_ssim.is_finite()) {
            return Err(Error::Metric(format!("curve {label:?} has non-finite or non-positive entries")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Metric(format!("curve {label:?} repeats a rate")));
        }
        if points.windows(2).any(|w| w[1].psnr < w[0].psnr || w[1].ms_ssim < w[0].ms_ssim) {
            log::warn!("curve {label:?}: quality decreases with rate somewhere");
        }
        Ok(Self { label: label.to_string(), points })
    }

    fn quality(&self, q: Quality) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| match q {
                Quality::Psnr => p.psnr,
                Quality::MsSsim => p.ms_ssim,
            })
            .collect()
    }
}

/// Least-squares cubic `y(u) = c0 + c1 u + c2 u^2 + c3 u^3`.
pub fn fit_cubic(u: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(u.len(), 4, |i, j| u[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

/// `integral_lo^hi` of a cubic with coefficients `c`.
pub fn integrate_cubic(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, q: Quality) -> Result<f64> {
    let qa = anchor.quality(q);
    let qt = test.quality(q);
    let lo = min(&qa).max(min(&qt));
    let hi = max(&qa).min(max(&qt));
    if !(hi > lo) {
        return Err(Error::Metric(format!(
            "curves {:?} and {:?} do not overlap in quality",
            anchor.label, test.label
        )));
    }
    // fit in a centered, scaled variable for conditioning
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fit = |c: &RdCurve, qs: &[f64]| -> Result<[f64; 4]> {
        let u: Vec<f64> = qs.iter().map(|v| (v - mid) / half).collect();
        let y: Vec<f64> = c.points.iter().map(|p| p.bpp.log10()).collect();
        fit_cubic(&u, &y)
    };
    let pa = fit(anchor, &qa)?;
    let pt = fit(test, &qt)?;
    // over u in [-1, 1]; the mean needs no change of variable
    let ia = integrate_cubic(&pa, -1.0, 1.0);
    let it = integrate_cubic(&pt, -1.0, 1.0);
    let delta = (it - ia) / 2.0;
    Ok(100.0 * (10f64.powf(delta) - 1.0))
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Parse `label, bpp, psnr, ms_ssim` lines (`#` comments and a header line
/// allowed). Returns one curve per label, in first-seen order.
pub fn read_rd_csv(text: &str) -> Result<Vec<RdCurve>> {
    let mut order: Vec<String> = Vec::new();
    let mut pts: Vec<Vec<RdPoint>> = Vec::new();
    let mut first = true;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let is_first = std::mem::replace(&mut first, false);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::Metric(format!("line {}: expected 4 fields, got {}", ln + 1, f.len())));
        }
        let nums: std::result::Result<Vec<f64>, _> = f[1..].iter().map(|s| s.parse::<f64>()).collect();
        let Ok(nums) = nums else {
            if is_first {
                continue; // header
            }
            return Err(Error::Metric(format!("line {}: non-numeric field", ln + 1)));
        };
        let idx = match order.iter().position(|l| l == f[0]) {
            Some(i) => i,
            None => {
                order.push(f[0].to_string());
                pts.push(Vec::new());
                order.len() - 1
            }
        };
        pts[idx].push(RdPoint { bpp: nums[0], psnr: nums[1], ms_ssim: nums[2] });
    }
    order.iter().zip(pts).map(|(l, p)| RdCurve::new(l, p)).collect()
}

pub fn write_rd_csv(curves: &[&RdCurve]) -> String {
    let mut s = String::from("label,bpp,psnr,ms_ssim\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{},{}", c.label, p.bpp, p.psnr, p.ms_ssim);
        }
    }
    s
}

/// Read a single-curve CSV file.
pub fn load_rd_curve(path: &Path) -> Result<RdCurve> {
    let text = std::fs::read_to_string(path)?;
    let mut curves = read_rd_csv(&text)?;
    match curves.len() {
        1 => Ok(curves.remove(0)),
        0 => Err(Error::Metric(format!("{} holds no RD points", path.display()))),
        n => Err(Error::Metric(format!("{} holds {n} curves; expected one", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(v: f32) -> VideoTensor {
        VideoTensor::new(vec![Tensor::full(&[24, 24, 3], v); 2]).unwrap()
    }

    #[test]
    fn psnr_uniform_error_and_cap() {
        let a = video(0.5);
        let b = video(0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ms_ssim_identical_is_one() {
        let a = VideoTensor::new(vec![Tensor::from_fn(&[48, 48, 3], |i| ((i * 7919) % 997) as f32 / 997.0)]).unwrap();
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let c = RdCurve::new(
            "x",
            (1..=4).map(|i| RdPoint { bpp: i as f64 * 0.1, psnr: 30.0 + i as f64, ms_ssim: 0.9 }).collect(),
        )
        .unwrap();
        let back = read_rd_csv(&write_rd_csv(&[&c])).unwrap();
        assert_eq!(back, vec![c]);
    }
}
