//! Run configuration: every tunable of every module under a dotted key.
//!
//! Files are TOML (tables or dotted keys). The frozen form is the canonical
//! key-sorted `key = value` listing, which is itself valid TOML and hashes
//! stably.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatial stride between the encoder grid and the output frame.
pub const GRID_STRIDE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    Max,
    Avg,
    Bicubic,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Hybrid,
    Bilinear,
    PixelShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Parallel 3x3 / 5x5 depthwise branches fused with an MLP by channel slicing.
    MultiScale,
    /// A single 3x3 depthwise convolution followed by an MLP.
    ConvMlp,
}

/// Ablation variants; each removes or swaps one component of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::V7,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::V1 => "no temporal window, no GoP grids",
            Variant::V2 => "no multi-resolution supervision",
            Variant::V3 => "no high-frequency boosting",
            Variant::V4 => "bilinear-only upsampling",
            Variant::V5 => "pixel-shuffle-only upsampling",
            Variant::V6 => "3x3 conv + MLP fusion layers",
            Variant::V7 => "no cross-depth fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "FULL",
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
            Variant::V4 => "V4",
            Variant::V5 => "V5",
            Variant::V6 => "V6",
            Variant::V7 => "V7",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "FULL" | "MSNERV" => Variant::Full,
            "V1" => Variant::V1,
            "V2" => Variant::V2,
            "V3" => Variant::V3,
            "V4" => Variant::V4,
            "V5" => Variant::V5,
            "V6" => Variant::V6,
            "V7" => Variant::V7,
            other => return Err(Error::config(format!("unknown variant {other:?}"))),
        })
    }
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::config(format!(
                        "unknown {} {other:?}", stringify!($t)
                    ))),
                }
            }
        }
    };
}

str_enum!(Downsample { Max => "max", Avg => "avg", Bicubic => "bicubic", Direct => "direct" });
str_enum!(Upsample { Hybrid => "hybrid", Bilinear => "bilinear", PixelShuffle => "pixel_shuffle" });
str_enum!(FusionKind { MultiScale => "multi_scale", ConvMlp => "conv_mlp" });

#[derive(Clone, Debug, PartialEq)]
pub struct VideoConfig {
    /// Frame count; 0 until resolved from the input.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Pyramid depth; 0 selects it from the decoder depth and frame size.
    pub levels: usize,
    pub downsample: Downsample,
    /// Patch size `(rows, cols)` at full resolution; `None` trains on frames.
    pub patch_size: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub window: usize,
    /// GoP length is `ceil(T / gop_count)`.
    pub gop_count: usize,
    /// `(temporal scale, spatial scale, channel fraction)` per base sub-grid.
    pub base_grids: Vec<[f64; 3]>,
    /// Temporal window and GoP grids; off reduces the encoder to base sampling.
    pub temporal_fusion: bool,
    pub init_range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub factors: Vec<usize>,
    pub fusion_depth: Vec<usize>,
    pub slice_ratio: f64,
    pub channels_min: usize,
    pub growth: f64,
    pub mlp_ratio: usize,
    pub upsample: Upsample,
    pub fusion: FusionKind,
    pub cross_depth: bool,
    /// Temporal knots of each block's hierarchical grid.
    pub hier_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Multi-resolution supervision through per-level heads.
    pub mrs: bool,
    /// High-frequency boosting of the full-resolution reference.
    pub boost: bool,
    pub hpf_kernel: usize,
    pub hpf_sigma: f64,
    pub hpf_tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: f64,
    pub batch_frames: usize,
    pub seed: u64,
    pub qat_epochs: usize,
    /// Fine-tuning continues at the rate the fitting schedule ends on.
    pub qat_lr: f64,
    pub bits: u32,
    pub clip_norm: f64,
    pub variant: Variant,
    /// Central inpainting mask `(rows, cols)`; `None` trains on every pixel.
    pub mask: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub video: VideoConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            video: VideoConfig {
                frames: 0,
                height: 0,
                width: 0,
                levels: 0,
                downsample: Downsample::Max,
                patch_size: None,
            },
            encoder: EncoderConfig {
                channels: 64,
                window: 5,
                gop_count: 5,
                base_grids: vec![[1.0, 1.0, 0.5], [0.2, 0.5, 0.5]],
                temporal_fusion: true,
                init_range: 1e-2,
            },
            decoder: DecoderConfig {
                factors: vec![3, 2, 2, 2],
                fusion_depth: vec![3, 3, 3, 3],
                slice_ratio: 0.5,
                channels_min: 12,
                growth: 1.0,
                mlp_ratio: 2,
                upsample: Upsample::Hybrid,
                fusion: FusionKind::MultiScale,
                cross_depth: true,
                hier_frames: 3,
            },
            loss: LossConfig {
                alpha: vec![0.9, 0.8, 0.7, 0.6],
                beta: vec![0.1, 0.2, 0.3, 0.3],
                mrs: true,
                boost: true,
                hpf_kernel: 5,
                hpf_sigma: 1.0,
                hpf_tau: 0.0,
            },
            train: TrainConfig {
                epochs: 300,
                lr: 2e-3,
                lr_min: 1e-5,
                warmup: 0.05,
                batch_frames: 1,
                seed: 0,
                qat_epochs: 30,
                qat_lr: 1e-5,
                bits: 8,
                clip_norm: 1.0,
                variant: Variant::Full,
                mask: None,
            },
        }
    }
}

fn want_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::config(format!("{key}: expected a non-negative integer, got {v}"))),
    }
}

fn want_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(format!("{key}: expected a number, got {v}"))),
    }
}

fn want_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::config(format!("{key}: expected true/false, got {v}")))
}

fn want_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::config(format!("{key}: expected a string, got {v}")))
}

fn want_list<'a>(key: &str, v: &'a toml::Value) -> Result<&'a Vec<toml::Value>> {
    v.as_array()
        .ok_or_else(|| Error::config(format!("{key}: expected a list, got {v}")))
}

fn want_usizes(key: &str, v: &toml::Value) -> Result<Vec<usize>> {
    want_list(key, v)?.iter().map(|x| want_usize(key, x)).collect()
}

fn want_f64s(key: &str, v: &toml::Value) -> Result<Vec<f64>> {
    want_list(key, v)?.iter().map(|x| want_f64(key, x)).collect()
}

fn want_pair(key: &str, v: &toml::Value) -> Result<Option<(usize, usize)>> {
    if let Some(s) = v.as_str() {
        return parse_size(s).map_err(|e| Error::config(format!("{key}: {e}")));
    }
    let xs = want_usizes(key, v)?;
    match xs.as_slice() {
        [] => Ok(None),
        [r, c] => Ok(Some((*r, *c))),
        _ => Err(Error::config(format!("{key}: expected [rows, cols]"))),
    }
}

/// Parse `"120x96"` (rows x cols); empty or `"none"` yields `None`.
pub fn parse_size(s: &str) -> std::result::Result<Option<(usize, usize)>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let a = a.trim().parse().map_err(|_| format!("bad size {s:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad size {s:?}"))?;
    Ok(Some((a, b)))
}

fn fmt_f64(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn fmt_list<I: IntoIterator<Item = String>>(items: I) -> String {
    format!("[{}]", items.into_iter().collect::<Vec<_>>().join(", "))
}

fn fmt_pair(p: Option<(usize, usize)>) -> String {
    match p {
        Some((a, b)) => format!("[{a}, {b}]"),
        None => "[]".into(),
    }
}

impl RunConfig {
    /// Set one dotted key from a TOML value.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "video.frames" => self.video.frames = want_usize(key, v)?,
            "video.height" => self.video.height = want_usize(key, v)?,
            "video.width" => self.video.width = want_usize(key, v)?,
            "video.levels" => self.video.levels = want_usize(key, v)?,
            "video.downsample" => self.video.downsample = want_str(key, v)?.parse()?,
            "video.patch_size" => self.video.patch_size = want_pair(key, v)?,

            "encoder.channels" => self.encoder.channels = want_usize(key, v)?,
            "encoder.window" => self.encoder.window = want_usize(key, v)?,
            "encoder.gop_count" => self.encoder.gop_count = want_usize(key, v)?,
            "encoder.base_grids" => {
                self.encoder.base_grids = want_list(key, v)?
                    .iter()
                    .map(|g| {
                        let xs = want_f64s(key, g)?;
                        <[f64; 3]>::try_from(xs.as_slice()).map_err(|_| {
                            Error::config(format!("{key}: each entry is [t_scale, s_scale, ch_frac]"))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "encoder.temporal_fusion" => self.encoder.temporal_fusion = want_bool(key, v)?,
            "encoder.init_range" => self.encoder.init_range = want_f64(key, v)?,

            "decoder.factors" => self.decoder.factors = want_usizes(key, v)?,
            "decoder.fusion_depth" => self.decoder.fusion_depth = want_usizes(key, v)?,
            "decoder.slice_ratio" => self.decoder.slice_ratio = want_f64(key, v)?,
            "decoder.channels_min" => self.decoder.channels_min = want_usize(key, v)?,
            "decoder.growth" => self.decoder.growth = want_f64(key, v)?,
            "decoder.mlp_ratio" => self.decoder.mlp_ratio = want_usize(key, v)?,
            "decoder.upsample" => self.decoder.upsample = want_str(key, v)?.parse()?,
            "decoder.fusion" => self.decoder.fusion = want_str(key, v)?.parse()?,
            "decoder.cross_depth" => self.decoder.cross_depth = want_bool(key, v)?,
            "decoder.hier_frames" => self.decoder.hier_frames = want_usize(key, v)?,

            "loss.alpha" => self.loss.alpha = want_f64s(key, v)?,
            "loss.beta" => self.loss.beta = want_f64s(key, v)?,
            "loss.mrs" => self.loss.mrs = want_bool(key, v)?,
            "loss.boost" => self.loss.boost = want_bool(key, v)?,
            "loss.hpf.kernel" => self.loss.hpf_kernel = want_usize(key, v)?,
            "loss.hpf.sigma" => self.loss.hpf_sigma = want_f64(key, v)?,
            "loss.hpf.tau" => self.loss.hpf_tau = want_f64(key, v)?,

            "train.epochs" => self.train.epochs = want_usize(key, v)?,
            "train.lr" => self.train.lr = want_f64(key, v)?,
            "train.lr_min" => self.train.lr_min = want_f64(key, v)?,
            "train.warmup" => self.train.warmup = want_f64(key, v)?,
            "train.batch_frames" => self.train.batch_frames = want_usize(key, v)?,
            "train.seed" => self.train.seed = want_usize(key, v)? as u64,
            "train.qat_epochs" => self.train.qat_epochs = want_usize(key, v)?,
            "train.qat_lr" => self.train.qat_lr = want_f64(key, v)?,
            "train.bits" => self.train.bits = want_usize(key, v)? as u32,
            "train.clip_norm" => self.train.clip_norm = want_f64(key, v)?,
            "train.variant" => self.train.variant = want_str(key, v)?.parse()?,
            "train.mask" => self.train.mask = want_pair(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` override; the value uses TOML syntax, bare words are
    /// taken as strings.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        self.set(k, &value)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("cannot parse config: {e}")))?;
        let mut cfg = Self::default();
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// All keys with canonical value spellings.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let v = &self.video;
        put("video.frames", v.frames.to_string());
        put("video.height", v.height.to_string());
        put("video.width", v.width.to_string());
        put("video.levels", v.levels.to_string());
        put("video.downsample", format!("{:?}", v.downsample.to_string()));
        put("video.patch_size", fmt_pair(v.patch_size));
        let e = &self.encoder;
        put("encoder.channels", e.channels.to_string());
        put("encoder.window", e.window.to_string());
        put("encoder.gop_count", e.gop_count.to_string());
        put(
            "encoder.base_grids",
            fmt_list(e.base_grids.iter().map(|g| fmt_list(g.iter().map(|&x| fmt_f64(x))))),
        );
        put("encoder.temporal_fusion", e.temporal_fusion.to_string());
        put("encoder.init_range", fmt_f64(e.init_range));
        let d = &self.decoder;
        put("decoder.factors", fmt_list(d.factors.iter().map(|x| x.to_string())));
        put("decoder.fusion_depth", fmt_list(d.fusion_depth.iter().map(|x| x.to_string())));
        put("decoder.slice_ratio", fmt_f64(d.slice_ratio));
        put("decoder.channels_min", d.channels_min.to_string());
        put("decoder.growth", fmt_f64(d.growth));
        put("decoder.mlp_ratio", d.mlp_ratio.to_string());
        put("decoder.upsample", format!("{:?}", d.upsample.to_string()));
        put("decoder.fusion", format!("{:?}", d.fusion.to_string()));
        put("decoder.cross_depth", d.cross_depth.to_string());
        put("decoder.hier_frames", d.hier_frames.to_string());
        let l = &self.loss;
        put("loss.alpha", fmt_list(l.alpha.iter().map(|&x| fmt_f64(x))));
        put("loss.beta", fmt_list(l.beta.iter().map(|&x| fmt_f64(x))));
        put("loss.mrs", l.mrs.to_string());
        put("loss.boost", l.boost.to_string());
        put("loss.hpf.kernel", l.hpf_kernel.to_string());
        put("loss.hpf.sigma", fmt_f64(l.hpf_sigma));
        put("loss.hpf.tau", fmt_f64(l.hpf_tau));
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.lr", fmt_f64(t.lr));
        put("train.lr_min", fmt_f64(t.lr_min));
        put("train.warmup", fmt_f64(t.warmup));
        put("train.batch_frames", t.batch_frames.to_string());
        put("train.seed", t.seed.to_string());
        put("train.qat_epochs", t.qat_epochs.to_string());
        put("train.qat_lr", fmt_f64(t.qat_lr));
        put("train.bits", t.bits.to_string());
        put("train.clip_norm", fmt_f64(t.clip_norm));
        put("train.variant", format!("{:?}", t.variant.to_string()));
        put("train.mask", fmt_pair(t.mask));
        m
    }

    /// Key-sorted `key = value` lines; byte-stable for equal configs.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check every cross-module contract that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.channels == 0 {
            return Err(Error::config("encoder.channels must be positive"));
        }
        if e.window == 0 || e.window % 2 == 0 {
            return Err(Error::config("encoder.window must be odd"));
        }
        if e.gop_count == 0 {
            return Err(Error::config("encoder.gop_count must be positive"));
        }
        if e.base_grids.is_empty() {
            return Err(Error::config("encoder.base_grids must not be empty"));
        }
        for g in &e.base_grids {
            if g.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return Err(Error::config("encoder.base_grids entries must lie in (0, 1]"));
            }
        }
        let d = &self.decoder;
        if d.factors.is_empty() || d.factors.iter().any(|&s| s < 1) {
            return Err(Error::config("decoder.factors must be non-empty positive integers"));
        }
        if d.factors.iter().product::<usize>() != GRID_STRIDE {
            return Err(Error::config(format!(
                "decoder.factors must multiply to the grid stride {GRID_STRIDE}"
            )));
        }
        if d.fusion_depth.len() != d.factors.len() || d.fusion_depth.contains(&0) {
            return Err(Error::config(
                "decoder.fusion_depth needs one positive depth per block",
            ));
        }
        if !(d.slice_ratio > 0.0 && d.slice_ratio < 1.0) {
            return Err(Error::config("decoder.slice_ratio must lie in (0, 1)"));
        }
        if d.channels_min < 2 || d.mlp_ratio == 0 || d.hier_frames < 2 || d.growth <= 0.0 {
            return Err(Error::config(
                "decoder.channels_min >= 2, mlp_ratio >= 1, hier_frames >= 2, growth > 0",
            ));
        }
        crate::objective::SaLossConfig::from_run(self, self.loss.alpha.len())?;
        if self.loss.hpf_kernel % 2 == 0 || self.loss.hpf_sigma <= 0.0 || self.loss.hpf_tau < 0.0 {
            return Err(Error::config("loss.hpf needs an odd kernel, sigma > 0, tau >= 0"));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if t.batch_frames == 0 {
            return Err(Error::config("train.batch_frames must be at least 1"));
        }
        if !(4..=16).contains(&t.bits) {
            return Err(Error::config(format!("train.bits {} outside [4, 16]", t.bits)));
        }
        if !(t.lr > 0.0) || t.lr_min < 0.0 || !(0.0..1.0).contains(&t.warmup) {
            return Err(Error::config("train.lr > 0, lr_min >= 0, warmup in [0, 1)"));
        }
        if let Some((r, c)) = self.video.patch_size {
            if r == 0 || c == 0 || r % GRID_STRIDE != 0 || c % GRID_STRIDE != 0 {
                return Err(Error::config(format!(
                    "video.patch_size {r}x{c} must be positive multiples of {GRID_STRIDE}"
                )));
            }
        }
        if self.video.frames > 0 {
            let (h, w) = (self.video.height, self.video.width);
            if h == 0 || w == 0 || h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
                return Err(Error::config(format!(
                    "frame size {w}x{h} is not divisible by {GRID_STRIDE}; nearest valid is {}x{}",
                    nearest_multiple(w, GRID_STRIDE),
                    nearest_multiple(h, GRID_STRIDE)
                )));
            }
            if let Some((r, c)) = self.video.patch_size {
                if r > h || c > w {
                    return Err(Error::config(format!(
                        "patch {r}x{c} larger than frame {h}x{w}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Nearest positive multiple of `m`.
pub fn nearest_multiple(v: usize, m: usize) -> usize {
    (((v as f64) / m as f64).round() as usize).max(1) * m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let mut c = RunConfig::default();
        c.encoder.channels = 32;
        c.video.patch_size = Some((96, 48));
        c.train.variant = Variant::V6;
        c.train.mask = Some((24, 24));
        let back = RunConfig::from_toml_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn table_and_dotted_forms_agree() {
        let a = RunConfig::from_toml_str("[encoder]\nchannels = 16\n[loss.hpf]\ntau = 0.01\n").unwrap();
        let b = RunConfig::from_toml_str("encoder.channels = 16\nloss.hpf.tau = 0.01\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.encoder.channels, 16);
        assert_eq!(a.loss.hpf_tau, 0.01);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml_str("encoder.chanels = 3").is_err());
        let mut c = RunConfig::default();
        assert!(c.set_override("train.variant=V9").is_err());
        c.set_override("train.variant=V3").unwrap();
        assert_eq!(c.train.variant, Variant::V3);
        c.set_override("decoder.factors=[3, 8]").unwrap();
        assert_eq!(c.decoder.factors, vec![3, 8]);
    }

    #[test]
    fn defaults_match_architecture_constants() {
        let c = RunConfig::default();
        assert_eq!(c.decoder.factors, vec![3, 2, 2, 2]);
        assert_eq!(c.decoder.fusion_depth, vec![3, 3, 3, 3]);
        assert_eq!(c.encoder.window, 5);
        assert_eq!(c.train.lr, 2e-3);
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.train.qat_epochs, 30);
        c.validate().unwrap();
    }

    #[test]
    fn indivisible_frame_size_suggests_nearest() {
        let mut c = RunConfig::default();
        c.video.frames = 3;
        c.video.height = 100;
        c.video.width = 100;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("96x96"), "{err}");
    }
}
