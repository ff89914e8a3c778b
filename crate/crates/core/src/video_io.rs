//! Frame loading, resolution pyramids and training batches.

use std::cell::RefCell;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{nearest_multiple, Downsample, GRID_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::{dims3, Tensor};

/// A clip of RGB frames in `[0, 1]`, each frame `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: Vec<Tensor<f32>>,
    pub frame_rate: Option<f64>,
}

impl VideoTensor {
    pub fn new(frames: Vec<Tensor<f32>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::config("a video needs at least one frame"));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Shape(format!("frames must be [H, W, 3], got {shape:?}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("frame {} has shape {:?}", i + 1, f.shape())));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape(format!("frame {} has values outside [0, 1]", i + 1)));
            }
        }
        Ok(Self { frames, frame_rate: None })
    }

    /// Reject sizes the encoder grid cannot tile.
    pub fn check_stride(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
            return Err(Error::config(format!(
                "frame size {w}x{h} is not divisible by {GRID_STRIDE}; resize to {}x{}",
                nearest_multiple(w, GRID_STRIDE),
                nearest_multiple(h, GRID_STRIDE)
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1])
    }

    /// Frame `t`, 1-based.
    pub fn frame(&self, t: usize) -> &Tensor<f32> {
        &self.frames[t - 1]
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    /// Frames at the given 1-based indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&t| {
                if t == 0 || t > self.len() {
                    Err(Error::Index { index: t, lo: 1, hi: self.len() })
                } else {
                    Ok(self.frames[t - 1].clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut v = Self::new(frames)?;
        v.frame_rate = self.frame_rate;
        Ok(v)
    }
}

/// Random-access frame provider; lets callers observe which frames are read.
pub trait FrameSource {
    fn frame_count(&self) -> usize;
    /// Frame `t` (1-based) as `[H, W, 3]`.
    fn read_frame(&self, t: usize) -> Result<Tensor<f32>>;
}

impl FrameSource for VideoTensor {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn read_frame(&self, t: usize) -> Result<Tensor<f32>> {
        if t == 0 || t > self.len() {
            return Err(Error::Index { index: t, lo: 1, hi: self.len() });
        }
        Ok(self.frames[t - 1].clone())
    }
}

/// Wraps a source and records every frame index read through it.
pub struct CountingSource<S> {
    inner: S,
    reads: RefCell<Vec<usize>>,
}

impl<S: FrameSource> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        let n = inner.frame_count();
        Self { inner, reads: RefCell::new(vec![0; n + 1]) }
    }

    /// Number of reads of frame `t`.
    pub fn reads(&self, t: usize) -> usize {
        self.reads.borrow()[t]
    }
}

impl<S: FrameSource> FrameSource for CountingSource<S> {
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn read_frame(&self, t: usize) -> Result<Tensor<f32>> {
        if let Some(c) = self.reads.borrow_mut().get_mut(t) {
            *c += 1;
        }
        self.inner.read_frame(t)
    }
}

/// Read only `indices` from a source.
pub fn collect_frames<S: FrameSource + ?Sized>(src: &S, indices: &[usize]) -> Result<VideoTensor> {
    let frames = indices.iter().map(|&t| src.read_frame(t)).collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames)
}

/// A directory of numbered PNG frames, read lazily.
pub struct FrameDir {
    files: Vec<PathBuf>,
    resize_to: Option<(usize, usize)>,
}

impl FrameDir {
    pub fn open(dir: &Path, resize_to: Option<(usize, usize)>) -> Result<Self> {
        let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
            .map_err(|e| Error::Load { frame: dir.display().to_string(), reason: e.to_string() })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .filter_map(|p| {
                let n = p.file_stem()?.to_str()?.parse::<u64>().ok()?;
                Some((n, p))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Load {
                frame: dir.display().to_string(),
                reason: "no numbered PNG frames".into(),
            });
        }
        files.sort();
        Ok(Self { files: files.into_iter().map(|(_, p)| p).collect(), resize_to })
    }
}

impl FrameSource for FrameDir {
    fn frame_count(&self) -> usize {
        self.files.len()
    }

    fn read_frame(&self, t: usize) -> Result<Tensor<f32>> {
        let path = self
            .files
            .get(t.wrapping_sub(1))
            .ok_or(Error::Index { index: t, lo: 1, hi: self.files.len() })?;
        let img = image::open(path)
            .map_err(|e| Error::Load { frame: path.display().to_string(), reason: e.to_string() })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        let frame = Tensor::from_vec(&[h, w, 3], data);
        Ok(match self.resize_to {
            Some((rh, rw)) if (rh, rw) != (h, w) => resize_frame(&frame, rh, rw),
            _ => frame,
        })
    }
}

/// Bilinear resize of an `[h, w, 3]` frame (half-pixel centers).
pub fn resize_frame(frame: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let [h, w, c] = dims3(frame.shape());
    let taps = |n_src: usize, n_out: usize| -> Vec<crate::kernels::Tap2> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_src as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_src - 1) as f64);
                let i0 = (src.floor() as usize).min(n_src - 1);
                let i1 = (i0 + 1).min(n_src - 1);
                let f = src - i0 as f64;
                crate::kernels::Tap2 { i0, i1, w0: 1.0 - f, w1: f }
            })
            .collect()
    };
    let out = crate::kernels::resample(frame.data(), w, c, &taps(h, oh), &taps(w, ow));
    Tensor::from_vec(&[oh, ow, c], out).map(|v| v.clamp(0.0, 1.0))
}

/// Where frames come from.
#[derive(Clone, Debug)]
pub enum VideoSource {
    /// Directory of `%05d.png` frames.
    FrameDir(PathBuf),
    /// YUV4MPEG2 stream, 8-bit.
    Y4m(PathBuf),
    /// Headerless 8-bit planar 4:2:0.
    RawYuv { path: PathBuf, width: usize, height: usize },
}

impl VideoSource {
    /// Infer the source kind from a path (`.y4m` file or a directory).
    pub fn from_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) {
            VideoSource::Y4m(path.to_path_buf())
        } else {
            VideoSource::FrameDir(path.to_path_buf())
        }
    }
}

/// Load a clip; dimensions after the optional resize must be multiples of 24.
pub fn load_frames(source: &VideoSource, resize_to: Option<(usize, usize)>) -> Result<VideoTensor> {
    let video = match source {
        VideoSource::FrameDir(dir) => {
            let d = FrameDir::open(dir, resize_to)?;
            let idx: Vec<usize> = (1..=d.frame_count()).collect();
            collect_frames(&d, &idx)?
        }
        VideoSource::Y4m(path) => {
            let (frames, fps) = read_y4m(path)?;
            let mut v = VideoTensor::new(resize_all(frames, resize_to))?;
            v.frame_rate = fps;
            v
        }
        VideoSource::RawYuv { path, width, height } => {
            let frames = read_raw_yuv420(path, *width, *height)?;
            VideoTensor::new(resize_all(frames, resize_to))?
        }
    };
    video.check_stride()?;
    Ok(video)
}

fn resize_all(frames: Vec<Tensor<f32>>, resize_to: Option<(usize, usize)>) -> Vec<Tensor<f32>> {
    match resize_to {
        Some((h, w)) => frames.iter().map(|f| resize_frame(f, h, w)).collect(),
        None => frames,
    }
}

/// BT.709 limited-range YCbCr to full-range RGB.
pub fn bt709_to_rgb(y: u8, cb: u8, cr: u8) -> [f32; 3] {
    let y = (y as f64 - 16.0) / 219.0;
    let cb = (cb as f64 - 128.0) / 224.0;
    let cr = (cr as f64 - 128.0) / 224.0;
    let r = y + 1.5748 * cr;
    let g = y - 0.187_324 * cb - 0.468_124 * cr;
    let b = y + 1.8556 * cb;
    [r, g, b].map(|v| v.clamp(0.0, 1.0) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Chroma {
    C420,
    C422,
    C444,
    Mono,
}

impl Chroma {
    fn plane(self, w: usize, h: usize) -> (usize, usize) {
        match self {
            Chroma::C420 => (w.div_ceil(2), h.div_ceil(2)),
            Chroma::C422 => (w.div_ceil(2), h),
            Chroma::C444 => (w, h),
            Chroma::Mono => (0, 0),
        }
    }
}

fn planes_to_rgb(
    yp: &[u8],
    up: &[u8],
    vp: &[u8],
    w: usize,
    h: usize,
    chroma: Chroma,
) -> Tensor<f32> {
    let (cw, ch) = chroma.plane(w, h);
    let mut out = Vec::with_capacity(w * h * 3);
    for i in 0..h {
        for j in 0..w {
            let y = yp[i * w + j];
            let (u, v) = if chroma == Chroma::Mono {
                (128, 128)
            } else {
                let ci = (i * ch / h).min(ch - 1);
                let cj = (j * cw / w).min(cw - 1);
                (up[ci * cw + cj], vp[ci * cw + cj])
            };
            out.extend(bt709_to_rgb(y, u, v));
        }
    }
    Tensor::from_vec(&[h, w, 3], out)
}

/// Parse a YUV4MPEG2 file; returns RGB frames and the frame rate if given.
pub fn read_y4m(path: &Path) -> Result<(Vec<Tensor<f32>>, Option<f64>)> {
    let name = path.display().to_string();
    let load_err = |reason: String| Error::Load { frame: name.clone(), reason };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| load_err(e.to_string()))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| load_err("missing Y4M header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| load_err("bad header".into()))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(load_err("not a YUV4MPEG2 stream".into()));
    }
    let (mut w, mut h, mut fps, mut chroma) = (0usize, 0usize, None, Chroma::C420);
    for tok in tokens {
        let (tag, val) = tok.split_at(1);
        match tag {
            "W" => w = val.parse().map_err(|_| load_err(format!("bad width {val}")))?,
            "H" => h = val.parse().map_err(|_| load_err(format!("bad height {val}")))?,
            "F" => {
                if let Some((n, d)) = val.split_once(':') {
                    if let (Ok(n), Ok(d)) = (n.parse::<f64>(), d.parse::<f64>()) {
                        if d > 0.0 {
                            fps = Some(n / d);
                        }
                    }
                }
            }
            "C" => {
                let high_depth = val
                    .find('p')
                    .is_some_and(|i| val[i + 1..].starts_with(|c: char| c.is_ascii_digit()));
                if high_depth {
                    return Err(load_err(format!("only 8-bit Y4M is supported, got C{val}")));
                }
                chroma = match val {
                    v if v.starts_with("420") => Chroma::C420,
                    "422" => Chroma::C422,
                    "444" => Chroma::C444,
                    "mono" => Chroma::Mono,
                    other => return Err(load_err(format!("unsupported colorspace C{other}"))),
                }
            }
            _ => {}
        }
    }
    if w == 0 || h == 0 {
        return Err(load_err("header lacks W/H".into()));
    }
    let (cw, ch) = chroma.plane(w, h);
    let frame_bytes = w * h + 2 * cw * ch;
    let mut pos = nl + 1;
    let mut frames = Vec::new();
    while pos < bytes.len() {
        let idx = frames.len() + 1;
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Load { frame: format!("{name}#{idx}"), reason: "truncated FRAME marker".into() })?;
        if !bytes[pos..].starts_with(b"FRAME") {
            return Err(Error::Load { frame: format!("{name}#{idx}"), reason: "missing FRAME marker".into() });
        }
        pos += line_end + 1;
        if pos + frame_bytes > bytes.len() {
            return Err(Error::Load { frame: format!("{name}#{idx}"), reason: "truncated frame data".into() });
        }
        let yp = &bytes[pos..pos + w * h];
        let up = &bytes[pos + w * h..pos + w * h + cw * ch];
        let vp = &bytes[pos + w * h + cw * ch..pos + frame_bytes];
        frames.push(planes_to_rgb(yp, up, vp, w, h, chroma));
        pos += frame_bytes;
    }
    if frames.is_empty() {
        return Err(load_err("no frames".into()));
    }
    Ok((frames, fps))
}

pub fn read_raw_yuv420(path: &Path, w: usize, h: usize) -> Result<Vec<Tensor<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::Load { frame: path.display().to_string(), reason: e.to_string() })?;
    let (cw, ch) = Chroma::C420.plane(w, h);
    let fb = w * h + 2 * cw * ch;
    if bytes.is_empty() || bytes.len() % fb != 0 {
        return Err(Error::Load {
            frame: format!("{}#{}", path.display(), bytes.len() / fb + 1),
            reason: format!("file size {} is not a multiple of the {w}x{h} frame size {fb}", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(fb)
        .map(|f| planes_to_rgb(&f[..w * h], &f[w * h..w * h + cw * ch], &f[w * h + cw * ch..], w, h, Chroma::C420))
        .collect())
}

/// Write frames as `00001.png`, `00002.png`, ... into `dir`.
pub fn save_frames(video: &VideoTensor, dir: &Path) -> Result<()> {
    let numbers: Vec<usize> = (1..=video.len()).collect();
    save_frames_numbered(video, dir, &numbers)
}

/// Write frame `k` as `{numbers[k]:05}.png`.
pub fn save_frames_numbered(video: &VideoTensor, dir: &Path, numbers: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (f, n) in video.frames().iter().zip(numbers) {
        let [h, w, _] = dims3(f.shape());
        let raw: Vec<u8> = f.data().iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
        let path = dir.join(format!("{n:05}.png"));
        img.save(&path).map_err(|e| Error::Load { frame: path.display().to_string(), reason: e.to_string() })?;
    }
    Ok(())
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The clip as it reads back after an 8-bit PNG round trip.
pub fn quantize_8bit(video: &VideoTensor) -> VideoTensor {
    let frames = video.frames().iter().map(|f| f.map(|v| to_u8(v) as f32 / 255.0)).collect();
    VideoTensor { frames, frame_rate: video.frame_rate }
}

/// One 2x downsampling step of an `[h, w, c]` image.
pub fn downsample2(x: &Tensor<f32>, mode: Downsample) -> Tensor<f32> {
    let [h, w, c] = dims3(x.shape());
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let at = |i: usize, j: usize, k: usize| d[(i * w + j) * c + k];
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..c {
                let v = match mode {
                    Downsample::Max => at(2 * i, 2 * j, k)
                        .max(at(2 * i, 2 * j + 1, k))
                        .max(at(2 * i + 1, 2 * j, k))
                        .max(at(2 * i + 1, 2 * j + 1, k)),
                    Downsample::Avg => {
                        0.25 * (at(2 * i, 2 * j, k)
                            + at(2 * i, 2 * j + 1, k)
                            + at(2 * i + 1, 2 * j, k)
                            + at(2 * i + 1, 2 * j + 1, k))
                    }
                    Downsample::Direct => at(2 * i, 2 * j, k),
                    Downsample::Bicubic => {
                        // Output sample sits between source rows/cols 2i and 2i+1.
                        const W: [f32; 4] = [-0.09375, 0.59375, 0.59375, -0.09375];
                        let mut acc = 0.0;
                        for (a, wa) in W.iter().enumerate() {
                            let ii = (2 * i + a).saturating_sub(1).min(h - 1);
                            for (b, wb) in W.iter().enumerate() {
                                let jj = (2 * j + b).saturating_sub(1).min(w - 1);
                                acc += wa * wb * at(ii, jj, k);
                            }
                        }
                        acc.clamp(0.0, 1.0)
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

/// Cascaded 2x downsamplings of a clip; level `N` is the source.
#[derive(Clone, Debug)]
pub struct ResolutionPyramid {
    /// `levels[r - 1][t - 1]` is frame `t` at level `r`.
    levels: Vec<Vec<Tensor<f32>>>,
}

impl ResolutionPyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_frames(&self) -> usize {
        self.levels[0].len()
    }

    /// Frame `t` (1-based) at level `r` (1-based, `N` = full resolution).
    pub fn get(&self, r: usize, t: usize) -> &Tensor<f32> {
        &self.levels[r - 1][t - 1]
    }

    pub fn level(&self, r: usize) -> &[Tensor<f32>] {
        &self.levels[r - 1]
    }

    /// `(h_r, w_r)` of level `r`.
    pub fn level_dims(&self, r: usize) -> (usize, usize) {
        let s = self.levels[r - 1][0].shape();
        (s[0], s[1])
    }
}

pub fn build_pyramid(video: &VideoTensor, levels: usize) -> Result<ResolutionPyramid> {
    build_pyramid_with(video, levels, Downsample::Max)
}

pub fn build_pyramid_with(video: &VideoTensor, levels: usize, mode: Downsample) -> Result<ResolutionPyramid> {
    if levels == 0 {
        return Err(Error::config("pyramid needs at least one level"));
    }
    let (h, w) = video.dims();
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::config(format!(
            "{w}x{h} is not divisible by 2^{} for a {levels}-level pyramid",
            levels - 1
        )));
    }
    let mut out: Vec<Vec<Tensor<f32>>> = vec![video.frames().to_vec()];
    for _ in 1..levels {
        let next = out.last().unwrap().iter().map(|f| downsample2(f, mode)).collect();
        out.push(next);
    }
    out.reverse();
    Ok(ResolutionPyramid { levels: out })
}

/// Pyramid depth for a frame size: the decoder depth, reduced until the
/// smallest level is at least 8x8 and every level halves exactly.
pub fn auto_levels(h: usize, w: usize, max_levels: usize) -> usize {
    let mut n = max_levels.max(1);
    while n > 1 {
        let div = 1 << (n - 1);
        if h % div == 0 && w % div == 0 && h / div >= 8 && w / div >= 8 {
            break;
        }
        n -= 1;
    }
    n
}

/// Deterministic test clip: color gradients drifting across the frame over a
/// fixed sinusoidal texture.
pub fn synthetic_video(frames: usize, height: usize, width: usize) -> Result<VideoTensor> {
    use std::f32::consts::TAU;
    let clip = (0..frames)
        .map(|t| {
            let t = t as f32;
            Tensor::from_fn(&[height, width, 3], |i| {
                let (y, x, c) = (i / (width * 3), (i / 3) % width, i % 3);
                let u = x as f32 / width as f32;
                let v = y as f32 / height as f32;
                let tex = (TAU * 4.0 * u).sin() * (TAU * 3.0 * v).sin();
                match c {
                    0 => 0.5 + 0.35 * (TAU * (u + 0.05 * t)).sin() + 0.05 * tex,
                    1 => 0.5 + 0.35 * (TAU * (v - 0.04 * t)).cos() - 0.05 * tex,
                    _ => 0.3 + 0.3 * (u + v) / 2.0 + 0.15 * tex,
                }
            })
        })
        .collect();
    VideoTensor::new(clip)
}

/// A rectangular window at full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchWindow {
    /// The same window at pyramid level `r` of `n`.
    pub fn at_level(&self, r: usize, n: usize) -> PatchWindow {
        let f = 1 << (n - r);
        PatchWindow {
            row0: self.row0 / f,
            col0: self.col0 / f,
            rows: self.rows / f,
            cols: self.cols / f,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// 1-based, unique within the batch.
    pub frame_indices: Vec<usize>,
    /// Shared by every frame of the batch.
    pub window: Option<PatchWindow>,
}

impl TrainBatch {
    /// `targets[k][r - 1]` is frame `frame_indices[k]` at level `r`, cropped to
    /// the window when one is set.
    pub fn targets(&self, pyr: &ResolutionPyramid) -> Vec<Vec<Tensor<f32>>> {
        let n = pyr.num_levels();
        self.frame_indices
            .iter()
            .map(|&t| {
                (1..=n)
                    .map(|r| {
                        let f = pyr.get(r, t);
                        match self.window {
                            Some(w) => {
                                let lw = w.at_level(r, n);
                                f.crop(lw.row0, lw.col0, lw.rows, lw.cols)
                            }
                            None => f.clone(),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Seeded epoch-by-epoch batch generator.
pub struct BatchStream {
    frames: usize,
    dims: (usize, usize),
    batch_frames: usize,
    patch: Option<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl BatchStream {
    /// Batches of one epoch: every frame exactly once, in shuffled order.
    pub fn next_epoch(&mut self) -> Vec<TrainBatch> {
        let mut order: Vec<usize> = (1..=self.frames).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.batch_frames) {
            let window = self.patch.map(|(pr, pc)| {
                // Tiles of the patch size; all offsets are multiples of the grid stride.
                let nr = self.dims.0 / pr;
                let nc = self.dims.1 / pc;
                let r = self.rng.gen_range(0..nr);
                let c = self.rng.gen_range(0..nc);
                PatchWindow { row0: r * pr, col0: c * pc, rows: pr, cols: pc }
            });
            out.push(TrainBatch { frame_indices: chunk.to_vec(), window });
        }
        out
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.frames.div_ceil(self.batch_frames)
    }
}

pub fn make_batches(
    pyramid: &ResolutionPyramid,
    batch_frames: usize,
    patch: Option<(usize, usize)>,
    seed: u64,
) -> Result<BatchStream> {
    if batch_frames == 0 {
        return Err(Error::config("batch_frames must be at least 1"));
    }
    let dims = pyramid.level_dims(pyramid.num_levels());
    if let Some((pr, pc)) = patch {
        if pr % GRID_STRIDE != 0 || pc % GRID_STRIDE != 0 || pr == 0 || pc == 0 {
            return Err(Error::config(format!(
                "patch size {pr}x{pc} must be a positive multiple of {GRID_STRIDE}"
            )));
        }
        if pr > dims.0 || pc > dims.1 {
            return Err(Error::config(format!(
                "patch {pr}x{pc} larger than frame {}x{}",
                dims.0, dims.1
            )));
        }
    }
    Ok(BatchStream {
        frames: pyramid.num_frames(),
        dims,
        batch_frames,
        patch,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}
