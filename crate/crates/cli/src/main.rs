use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msnerv::codec::bitstream;
use msnerv::metrics::{self, bd_rate, load_rd_curve, Quality};
use msnerv::plot::{line_chart, Series};
use msnerv::run::{self, FrameSubset};
use msnerv::video_io::{collect_frames, load_frames, quantize_8bit, save_frames, save_frames_numbered, FrameDir, FrameSource, VideoSource, VideoTensor};
use msnerv::{config::parse_size, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "msnerv", version, about = "Fit, compress and evaluate neural video representations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model to a clip and write a run directory.
    Train(TrainArgs),
    /// Write the fitted model of a run as an .msnv stream.
    Compress {
        run_dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
    },
    /// Decode every frame of an .msnv stream to numbered PNGs.
    Decompress {
        stream: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare two frame directories.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Bjontegaard delta rate of TEST against ANCHOR (CSV: label, bpp, psnr, ms_ssim).
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
        #[arg(long, default_value = "psnr")]
        metric: String,
        /// Also draw both curves to this SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Per-tensor sizes and entropies of an .msnv stream.
    Inspect { stream: PathBuf },
    /// Decode held-out even frames of a run fitted with `--frames odd`.
    Interpolate {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "even")]
        frames: Held,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit FULL and each listed variant on one clip and tabulate them.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Held {
    Even,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Odd,
}

#[derive(Args)]
struct InputArgs {
    /// Directory of numbered PNGs, a .y4m file or a raw 4:2:0 .yuv file.
    #[arg(long)]
    input: PathBuf,
    /// Frame size of a raw .yuv input, WIDTHxHEIGHT.
    #[arg(long)]
    yuv_size: Option<String>,
    /// Resize frames to HEIGHTxWIDTH (both multiples of 24).
    #[arg(long)]
    resize: Option<String>,
    /// Config file (TOML, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set encoder.channels=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    qat_epochs: Option<usize>,
    /// Defaults to MSNERV_SEED, then the config value.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bits: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    variant: Option<String>,
    /// Central loss mask ROWSxCOLS for inpainting.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long, value_enum, default_value = "all")]
    frames: Subset,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Comma-separated, e.g. V1,V7.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

/// Errors that mean the invocation itself was wrong.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: msnerv::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        msnerv::Error::Config(m) => anyhow::Error::new(Usage(m)),
        e => e.into(),
    })
}

fn load_config(a: &InputArgs) -> Result<RunConfig> {
    let (mut cfg, file_has_seed) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let has = text.parse::<toml::Table>().map(|t| t.get("train").and_then(|x| x.get("seed")).is_some()).unwrap_or(false)
                || text.lines().any(|l| l.trim_start().starts_with("train.seed"));
            (usage(RunConfig::from_toml_str(&text))?, has)
        }
        None => (RunConfig::default(), false),
    };
    for s in &a.sets {
        usage(cfg.set_override(s))?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = a.qat_epochs {
        cfg.train.qat_epochs = e;
    }
    if let Some(b) = a.bits {
        cfg.train.bits = b;
    }
    let env_seed = std::env::var("MSNERV_SEED").ok();
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    } else if let (Some(s), false) = (env_seed, file_has_seed) {
        cfg.train.seed = s.trim().parse().map_err(|_| Usage(format!("MSNERV_SEED={s:?} is not an integer")))?;
    }
    Ok(cfg)
}

fn size_arg(s: &Option<String>, what: &str) -> Result<Option<(usize, usize)>> {
    match s {
        Some(s) => parse_size(s).map_err(|e| Usage(format!("{what}: {e}")).into()),
        None => Ok(None),
    }
}

/// Load the frames of `subset`; frame directories are read lazily, so
/// unselected frames are never opened.
fn load_input(a: &InputArgs, subset: FrameSubset) -> Result<(VideoTensor, usize)> {
    let resize = size_arg(&a.resize, "--resize")?;
    let p = &a.input;
    if p.is_dir() {
        let dir = FrameDir::open(p, resize)?;
        let n = dir.frame_count();
        let v = collect_frames(&dir, &subset.indices(n))?;
        v.check_stride()?;
        return Ok((v, n));
    }
    let src = if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("yuv")) {
        let (w, h) = size_arg(&a.yuv_size, "--yuv-size")?.ok_or_else(|| Usage("raw .yuv input needs --yuv-size WxH".into()))?;
        VideoSource::RawYuv { path: p.clone(), width: w, height: h }
    } else {
        VideoSource::from_path(p)
    };
    let all = load_frames(&src, resize)?;
    let n = all.len();
    Ok((all.select(&subset.indices(n))?, n))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.input)?;
    if let Some(v) = &a.variant {
        cfg.train.variant = usage(v.parse())?;
    }
    if a.mask.is_some() {
        cfg.train.mask = size_arg(&a.mask, "--mask")?;
    }
    let subset = match a.frames {
        Subset::All => FrameSubset::All,
        Subset::Odd => FrameSubset::Odd,
    };
    let (video, n) = load_input(&a.input, subset)?;
    let (h, w) = video.dims();
    let (cfg, parity) = if cfg.train.variant == Variant::Full {
        (cfg, None)
    } else {
        let v = cfg.train.variant;
        let mut base = cfg.clone();
        base.train.variant = Variant::Full;
        let base = usage(run::resolve_config(&base, &video))?;
        let (c, p) = usage(msnerv::trainer::apply_variant(&base, v, (video.len(), h, w)))?;
        (c, Some(p))
    };
    let report = run::train_run(&video, &cfg, &a.out, subset, n, parity)?;
    println!(
        "{}: {} params, {:.3} dB float, {:.3} dB at {} bits, {:.5} bpp -> {}",
        report.variant,
        report.params_decodable,
        report.float_psnr,
        report.psnr,
        report.bits,
        report.bpp,
        a.out.display()
    );
    Ok(())
}

fn decoded_video(bytes: &[u8]) -> Result<VideoTensor> {
    let (_, model) = bitstream::decompress(bytes)?;
    Ok(msnerv::render::reconstruct(&model)?)
}

fn compress_cmd(run_dir: &Path, out: &Path, bits: u32) -> Result<()> {
    let (cfg, model) = run::load_final(run_dir)?;
    let enc = bitstream::compress(&model, &cfg, bits)?;
    fs::write(out, &enc.bytes).with_context(|| format!("writing {}", out.display()))?;
    let s = &model.spec;
    println!(
        "{} bytes ({} header, {} payload), {:.6} bpp",
        enc.bytes.len(),
        enc.header_bytes(),
        enc.payload_bytes(),
        bitstream::bpp(enc.bytes.len(), (s.frames, s.height, s.width))
    );
    Ok(())
}

fn read_dir_video(p: &Path) -> Result<VideoTensor> {
    let d = FrameDir::open(p, None)?;
    let idx: Vec<usize> = (1..=d.frame_count()).collect();
    Ok(collect_frames(&d, &idx)?)
}

fn eval_cmd(recon: &Path, reference: &Path, report: Option<&Path>) -> Result<()> {
    let a = read_dir_video(recon)?;
    let b = read_dir_video(reference)?;
    let p = metrics::psnr(&a, &b)?;
    let m = metrics::ms_ssim(&a, &b)?;
    let json = serde_json::json!({ "frames": a.len(), "psnr": p, "ms_ssim": m });
    println!("PSNR {p:.6} dB, MS-SSIM {m:.6}");
    if let Some(r) = report {
        fs::write(r, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}

fn bdrate_cmd(anchor: &Path, test: &Path, metric: &str, plot: Option<&Path>) -> Result<()> {
    let q: Quality = usage(metric.parse())?;
    let a = load_rd_curve(anchor)?;
    let t = load_rd_curve(test)?;
    let bd = bd_rate(&a, &t, q)?;
    println!("BD-rate of {} vs {} ({metric}): {bd:+.4}%", t.label, a.label);
    if let Some(p) = plot {
        let series: Vec<Series> = [&a, &t]
            .iter()
            .map(|c| Series {
                label: c.label.clone(),
                points: c
                    .points
                    .iter()
                    .map(|p| (p.bpp, if q == Quality::Psnr { p.psnr } else { p.ms_ssim }))
                    .collect(),
            })
            .collect();
        let y = if q == Quality::Psnr { "PSNR (dB)" } else { "MS-SSIM" };
        fs::write(p, line_chart("Rate-distortion", "bpp", y, &series))?;
    }
    Ok(())
}

fn inspect_cmd(stream: &Path) -> Result<()> {
    let bytes = fs::read(stream).with_context(|| format!("reading {}", stream.display()))?;
    let d = bitstream::entropy_decode(&bytes)?;
    let (t, h, w) = d.dims;
    println!("{}: {} bytes, {t} frames of {w}x{h}, {:.6} bpp", stream.display(), bytes.len(), bitstream::bpp(bytes.len(), d.dims));
    println!("{:<28} {:>16} {:>5} {:>8} {:>9} {:>8} {:>8}", "tensor", "shape", "bits", "count", "H (bits)", "table", "payload");
    let (mut n, mut hsum, mut pay) = (0usize, 0.0, 0usize);
    for s in &d.stats {
        println!(
            "{:<28} {:>16} {:>5} {:>8} {:>9.4} {:>8} {:>8}",
            s.name,
            format!("{:?}", s.shape),
            s.bits,
            s.count,
            s.entropy,
            s.table_bytes,
            s.payload_bytes
        );
        n += s.count;
        hsum += s.entropy * s.count as f64;
        pay += s.payload_bytes;
    }
    println!(
        "total: {n} values, mean H {:.4} bits, payload {pay} bytes, header {} bytes",
        hsum / n.max(1) as f64,
        bytes.len() - pay
    );
    Ok(())
}

fn interpolate_cmd(run_dir: &Path, out: &Path) -> Result<()> {
    let report = run::read_report(run_dir)?;
    if report.subset != FrameSubset::Odd {
        bail!(Usage(format!("{} was fitted on all frames; nothing is held out", run_dir.display())));
    }
    let bytes = fs::read(run_dir.join(run::STREAM_FILE))?;
    let (_, model) = bitstream::decompress(&bytes)?;
    let even: Vec<usize> = (2..=report.source_frames).step_by(2).collect();
    let (video, info) = msnerv::tasks::interpolate_frames(&model, &even)?;
    save_frames_numbered(&quantize_8bit(&video), out, &even)?;
    fs::write(out.join("interpolation.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    let flagged = info.iter().filter(|i| i.fallback).count();
    println!("{} frames -> {} ({flagged} nearest-neighbor fallbacks)", even.len(), out.display());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(&a.input)?;
    let variants = a.variants.iter().map(|v| usage(v.parse::<Variant>())).collect::<Result<Vec<_>>>()?;
    let (video, n) = load_input(&a.input, FrameSubset::All)?;
    let mut base = cfg.clone();
    base.train.variant = Variant::Full;
    let base = usage(run::resolve_config(&base, &video))?;
    let dims = (video.len(), video.dims().0, video.dims().1);
    let mut rows = Vec::new();
    let mut list = vec![Variant::Full];
    list.extend(variants.into_iter().filter(|&v| v != Variant::Full));
    for v in list {
        let (c, parity) = usage(msnerv::trainer::apply_variant(&base, v, dims))?;
        log::info!("{v}: {} ({} decodable params)", v.describe(), parity.variant);
        let r = run::train_run(&video, &c, &a.out.join(v.to_string()), FrameSubset::All, n, Some(parity))?;
        rows.push(run::AblationRow::from_report(&r));
    }
    fs::create_dir_all(&a.out)?;
    let table = run::ablation_table(&rows);
    fs::write(a.out.join("ablation.md"), &table)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => train_cmd(&a),
        Cmd::Compress { run_dir, output, bits } => compress_cmd(&run_dir, &output, bits),
        Cmd::Decompress { stream, output } => {
            let bytes = fs::read(&stream).with_context(|| format!("reading {}", stream.display()))?;
            let video = decoded_video(&bytes)?;
            save_frames(&video, &output)?;
            println!("{} frames -> {}", video.len(), output.display());
            Ok(())
        }
        Cmd::Eval { recon, reference, report } => eval_cmd(&recon, &reference, report.as_deref()),
        Cmd::Bdrate { anchor, test, metric, plot } => bdrate_cmd(&anchor, &test, &metric, plot.as_deref()),
        Cmd::Inspect { stream } => inspect_cmd(&stream),
        Cmd::Interpolate { run_dir, frames: Held::Even, output } => interpolate_cmd(&run_dir, &output),
        Cmd::Ablate(a) => ablate_cmd(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}
