//! Run directories: fit, fine-tune, compress and report in one place.
//!
//! Layout: `config.frozen`, `checkpoints/`, `train_log.jsonl`, `model.msnv`,
//! `report.json`, `plots/`. One process owns a directory at a time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::bitstream::{self, param_entropy};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, psnr};
use crate::model::{Model, ModelSpec};
use crate::plot::{line_chart, Series};
use crate::render::reconstruct;
use crate::tasks::{central_mask, gray_fill, masked_psnr};
use crate::trainer::{qat_finetune, train, Parity, TrainLog, TrainOptions};
use crate::video_io::{build_pyramid_with, quantize_8bit, VideoTensor};

pub const CONFIG_FILE: &str = "config.frozen";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const STREAM_FILE: &str = "model.msnv";
pub const PLOTS_DIR: &str = "plots";
const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} is in use by another process (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Which source frames a run was fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSubset {
    All,
    /// Source frames 1, 3, 5, ...; the even ones are held out.
    Odd,
}

impl FrameSubset {
    pub fn indices(self, source_frames: usize) -> Vec<usize> {
        match self {
            FrameSubset::All => (1..=source_frames).collect(),
            FrameSubset::Odd => crate::tasks::odd_frames(source_frames),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub rows: usize,
    pub cols: usize,
    /// Decoded stream inside the mask.
    pub masked_psnr: f64,
    /// Mid-gray fill inside the mask.
    pub gray_fill_psnr: f64,
}

/// Everything a run measures. Contains no timings, so equal inputs give
/// byte-equal reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub subset: FrameSubset,
    pub source_frames: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub params_total: usize,
    pub params_decodable: usize,
    pub steps: usize,
    /// Last-epoch PSNR of the training forward passes.
    pub train_psnr: f64,
    /// Float model, clamped output.
    pub float_psnr: f64,
    pub float_ms_ssim: f64,
    pub bits: u32,
    /// Decoded stream, after 8-bit rounding of the frames.
    pub psnr: f64,
    pub ms_ssim: f64,
    pub stream_bytes: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub bpp: f64,
    pub param_std: f64,
    pub param_entropy: f64,
    pub checksum: String,
    pub mask: Option<MaskReport>,
    pub parity: Option<Parity>,
}

pub fn read_report(dir: &Path) -> Result<Report> {
    let text = fs::read_to_string(dir.join(REPORT_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", dir.join(REPORT_FILE).display())))
}

/// Fix the video keys of `cfg` to the clip and check every contract.
pub fn resolve_config(cfg: &RunConfig, video: &VideoTensor) -> Result<RunConfig> {
    let mut c = cfg.clone();
    let (h, w) = video.dims();
    c.video.frames = video.len();
    c.video.height = h;
    c.video.width = w;
    c.validate()?;
    ModelSpec::new(&c, video.len(), h, w)?;
    Ok(c)
}

/// Evaluate `recon` (already rounded as it would be stored) against `reference`.
fn quality(recon: &VideoTensor, reference: &VideoTensor) -> Result<(f64, f64)> {
    Ok((psnr(recon, reference)?, ms_ssim(recon, reference)?))
}

fn psnr_plot(log: &TrainLog) -> String {
    let mut fit = Vec::new();
    let mut qat = Vec::new();
    let mut last = 0;
    for e in &log.epochs {
        match e.phase {
            crate::trainer::Phase::Fit => {
                fit.push((e.epoch as f64, e.psnr));
                last = e.epoch;
            }
            crate::trainer::Phase::Qat => qat.push(((last + e.epoch) as f64, e.psnr)),
        }
    }
    let mut series = vec![Series { label: "fit".into(), points: fit }];
    if !qat.is_empty() {
        series.push(Series { label: "QAT".into(), points: qat });
    }
    line_chart("Training PSNR", "epoch", "PSNR (dB)", &series)
}

/// Fit `video` (the frames selected by `subset` from a `source_frames` clip)
/// into `dir` and return the report written there.
pub fn train_run(
    video: &VideoTensor,
    cfg: &RunConfig,
    dir: &Path,
    subset: FrameSubset,
    source_frames: usize,
    parity: Option<Parity>,
) -> Result<Report> {
    let _lock = RunLock::acquire(dir)?;
    let cfg = resolve_config(cfg, video)?;
    fs::write(dir.join(CONFIG_FILE), cfg.canonical())?;
    let (h, w) = video.dims();
    let spec = ModelSpec::new(&cfg, video.len(), h, w)?;
    let pyr = build_pyramid_with(video, spec.levels, cfg.video.downsample)?;
    let mut model = Model::<f32>::init(spec, cfg.train.seed);

    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let log_path = dir.join(LOG_FILE);
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let opts = TrainOptions { checkpoint_dir: Some(ckpt_dir.clone()), log_path: Some(log_path) };
    log::info!("fitting {} params on {} frames of {w}x{h}", model.param_count(false), video.len());
    let mut log = train(&mut model, &pyr, &cfg, &opts)?;
    let train_psnr = log.last_psnr().unwrap_or(f64::NAN);
    let (float_psnr, float_ms_ssim) = quality(&reconstruct(&model)?, video)?;
    log::info!("float model: {float_psnr:.3} dB");

    let bits = cfg.train.bits;
    if cfg.train.qat_epochs > 0 {
        log.epochs.extend(qat_finetune(&mut model, &pyr, &cfg, bits, &opts)?.epochs);
    } else {
        model.freeze_scales(bits);
    }
    checkpoint::save(&ckpt_dir.join(FINAL_CHECKPOINT), &model, &cfg, log.epochs.last().map_or(0, |e| e.step) as u64)?;

    let enc = bitstream::compress(&model, &cfg, bits)?;
    fs::write(dir.join(STREAM_FILE), &enc.bytes)?;
    let (_, decoded) = bitstream::decompress(&enc.bytes)?;
    let recon = quantize_8bit(&reconstruct(&decoded)?);
    let (q_psnr, q_ms_ssim) = quality(&recon, video)?;
    log::info!("{bits}-bit stream: {} bytes, {q_psnr:.3} dB", enc.bytes.len());

    let mask = match cfg.train.mask.filter(|&(r, c)| r > 0 && c > 0) {
        Some((rows, cols)) => {
            let m = central_mask(h, w, (rows, cols))?;
            Some(MaskReport {
                rows,
                cols,
                masked_psnr: masked_psnr(&recon, video, &m)?,
                gray_fill_psnr: masked_psnr(&gray_fill(video, &m)?, video, &m)?,
            })
        }
        None => None,
    };

    let (param_std, param_entropy) = param_entropy(&model);
    let dims = (video.len(), h, w);
    let report = Report {
        variant: cfg.train.variant.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        subset,
        source_frames,
        frames: video.len(),
        height: h,
        width: w,
        params_total: model.param_count(false),
        params_decodable: model.param_count(true),
        steps: log.epochs.iter().filter(|e| e.phase == crate::trainer::Phase::Fit).map(|e| e.step).max().unwrap_or(0),
        train_psnr,
        float_psnr,
        float_ms_ssim,
        bits,
        psnr: q_psnr,
        ms_ssim: q_ms_ssim,
        stream_bytes: enc.bytes.len(),
        header_bytes: enc.header_bytes(),
        payload_bytes: enc.payload_bytes(),
        bpp: bitstream::bpp(enc.bytes.len(), dims),
        param_std,
        param_entropy,
        checksum: model.checksum(),
        mask,
        parity,
    };
    fs::create_dir_all(dir.join(PLOTS_DIR))?;
    fs::write(dir.join(PLOTS_DIR).join("psnr.svg"), psnr_plot(&log))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(dir.join(REPORT_FILE), json + "\n")?;
    Ok(report)
}

/// The fitted model of a finished run.
pub fn load_final(dir: &Path) -> Result<(RunConfig, Model<f32>)> {
    let (cfg, model, _) = checkpoint::load(&dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))?;
    Ok((cfg, model))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Decodable parameters, millions.
    pub size_m: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub params: usize,
    pub parity_rel: f64,
}

impl AblationRow {
    pub fn from_report(r: &Report) -> Self {
        Self {
            variant: r.variant.clone(),
            size_m: r.params_decodable as f64 / 1e6,
            bpp: r.bpp,
            psnr: r.psnr,
            ms_ssim: r.ms_ssim,
            params: r.params_decodable,
            parity_rel: r.parity.map_or(0.0, |p| p.rel()),
        }
    }
}

/// Markdown table with the columns `Variant | Size (M) | bpp | PSNR(dB) | MS-SSIM`.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Variant | Size (M) | bpp | PSNR(dB) | MS-SSIM |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.2} | {:.4} |\n",
            r.variant, r.size_m, r.bpp, r.psnr, r.ms_ssim
        ));
    }
    s
}
