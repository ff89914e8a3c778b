//! Fitting: Adam with warmup + cosine decay, quantization-aware fine-tuning
//! and the ablation variants.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::quant::check_bits;
use crate::config::{FusionKind, RunConfig, Upsample, Variant};
use crate::decoder::{decode, decode_window, time_pos};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::psnr_from_mse;
use crate::model::{Model, ModelSpec, Net};
use crate::objective::{total_loss, FrameLoss, SaLossConfig};
use crate::tasks::level_masks;
use crate::tensor::{Real, Tensor};
use crate::video_io::{make_batches, PatchWindow, ResolutionPyramid};

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Largest relative decodable-size gap tolerated between a variant and FULL.
pub const PARITY_TOL: f64 = 0.02;

/// Learning rate at optimizer step `step` of `total`: linear warmup over the
/// first `warmup` fraction, then cosine decay from `lr` to `lr_min`.
pub fn lr_at(step: usize, total: usize, lr: f64, lr_min: f64, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).ceil() as usize;
    if step < warm {
        return lr * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let p = ((step - warm) as f64 / span as f64).min(1.0);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_B1 * m[k] + (1.0 - ADAM_B1) * g[k];
                v[k] = ADAM_B2 * v[k] + (1.0 - ADAM_B2) * g[k] * g[k];
                let upd = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                *x = T::lit(x.f64() - upd);
            }
        }
    }
}

/// Scale every gradient so the global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fit,
    Qat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps completed in this phase.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// PSNR of the training forward passes, unclamped, over this epoch.
    pub psnr: f64,
    /// Mean loss per supervised pyramid level, ascending.
    pub level_losses: Vec<f64>,
    pub wall_s: f64,
    pub params: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last_psnr(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.psnr)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// `last.ckpt` here is rewritten after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Epoch records are appended here as JSON lines.
    pub log_path: Option<PathBuf>,
}

/// Loss of frame `t` against `targets` (one per pyramid level, already cropped
/// to `window`). Returns the loss terms and the full-resolution output.
#[allow(clippy::too_many_arguments)]
pub fn frame_loss<T: Real>(
    g: &mut Graph<T>,
    net: Net,
    t: usize,
    window: Option<PatchWindow>,
    targets: &[Var],
    masks: Option<&[Var]>,
    loss: &SaLossConfig,
) -> Result<(FrameLoss, Var)> {
    let grid = encode(g, net, t)?;
    let tpos = time_pos(t as f64, net.spec.frames);
    let out = match window {
        Some(w) => decode_window(g, net, grid, tpos, true, w, net.spec.context_cells())?.out,
        None => decode(g, net, grid, tpos, true)?,
    };
    let fl = total_loss(g, &out.projections, out.output, targets, masks, loss)?;
    Ok((fl, out.output))
}

fn crop_level(f: &Tensor<f32>, window: Option<PatchWindow>, r: usize, n: usize) -> Tensor<f32> {
    match window {
        Some(w) => {
            let lw = w.at_level(r, n);
            f.crop(lw.row0, lw.col0, lw.rows, lw.cols)
        }
        None => f.clone(),
    }
}

struct PhasePlan {
    phase: Phase,
    epochs: usize,
    lr: f64,
    warmup: f64,
    quant: Option<u32>,
    seed: u64,
}

fn run_phase(
    model: &mut Model<f32>,
    pyr: &ResolutionPyramid,
    cfg: &RunConfig,
    plan: PhasePlan,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    let n = model.spec.levels;
    if pyr.num_levels() != n || pyr.num_frames() != model.spec.frames {
        return Err(Error::config(format!(
            "pyramid has {} levels x {} frames, model expects {n} x {}",
            pyr.num_levels(),
            pyr.num_frames(),
            model.spec.frames
        )));
    }
    if pyr.level_dims(n) != (model.spec.height, model.spec.width) {
        return Err(Error::config("pyramid frame size does not match the model"));
    }
    let loss_cfg = SaLossConfig::from_run(cfg, n)?;
    let masks = level_masks(model.spec.height, model.spec.width, n, cfg.train.mask)?;
    let mut stream = make_batches(pyr, cfg.train.batch_frames, cfg.video.patch_size, plan.seed)?;
    let total_steps = plan.epochs * stream.batches_per_epoch();
    let mut adam = Adam::new(&model.params);
    let mut log = TrainLog::default();
    let mut step = 0;
    let params = model.param_count(false);
    let ckpt = opts.checkpoint_dir.as_ref().map(|d| d.join("last.ckpt"));
    if let Some(d) = &opts.checkpoint_dir {
        std::fs::create_dir_all(d)?;
    }

    for epoch in 1..=plan.epochs {
        let started = Instant::now();
        let good = model.params.clone();
        let (mut sq, mut count, mut loss_sum, mut nb) = (0.0, 0usize, 0.0, 0usize);
        let mut level_sum = vec![0.0; n];
        let mut level_cnt = vec![0usize; n];
        let mut lr = plan.lr;
        for batch in stream.next_epoch() {
            lr = lr_at(step, total_steps, plan.lr, cfg.train.lr_min, plan.warmup);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true, plan.quant);
            let net = Net::new(model, &bound);
            let mut total: Option<Var> = None;
            let mut losses = Vec::new();
            for &t in &batch.frame_indices {
                let targets: Vec<Var> = (1..=n)
                    .map(|r| {
                        let v = crop_level(pyr.get(r, t), batch.window, r, n);
                        g.constant(v)
                    })
                    .collect();
                let masks: Option<Vec<Var>> = masks.as_ref().map(|ms| {
                    ms.iter()
                        .enumerate()
                        .map(|(i, m)| {
                            let v = crop_level(m, batch.window, i + 1, n);
                            g.constant(v)
                        })
                        .collect()
                });
                let (fl, out) = frame_loss(&mut g, net, t, batch.window, &targets, masks.as_deref(), &loss_cfg)?;
                let (s, c) = crate::metrics::sq_err(g.value(out), g.value(targets[n - 1]))?;
                sq += s;
                count += c;
                total = Some(match total {
                    Some(a) => g.add(a, fl.total),
                    None => fl.total,
                });
                losses.push(fl);
            }
            let total = g.mul_scalar(total.expect("non-empty batch"), 1.0 / batch.frame_indices.len() as f64);
            let value = g.item(total).f64();
            if !value.is_finite() {
                let level = losses
                    .iter()
                    .flat_map(|fl| fl.levels.iter())
                    .find(|(_, l)| !g.item(l.total).f64().is_finite())
                    .map(|(r, _)| *r)
                    .unwrap_or(n);
                model.params = good;
                return Err(Error::NonFinite { epoch, step, level });
            }
            for fl in &losses {
                for (r, l) in &fl.levels {
                    level_sum[r - 1] += g.item(l.total).f64();
                    level_cnt[r - 1] += 1;
                }
            }
            let mut grads_t = g.backward(total);
            let mut grads: Vec<Vec<f64>> = bound
                .leaves
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| match grads_t.take(v) {
                    Some(d) => d.into_iter().map(|x| x.f64()).collect(),
                    None => vec![0.0; p.len()],
                })
                .collect();
            let norm = clip_global_norm(&mut grads, cfg.train.clip_norm);
            if !norm.is_finite() {
                model.params = good;
                return Err(Error::NonFinite { epoch, step, level: 0 });
            }
            adam.step(&mut model.params, &grads, lr);
            loss_sum += value;
            nb += 1;
            step += 1;
        }
        let rec = EpochLog {
            phase: plan.phase,
            epoch,
            step,
            lr,
            loss: loss_sum / nb as f64,
            psnr: psnr_from_mse(sq / count as f64),
            level_losses: level_sum
                .iter()
                .zip(&level_cnt)
                .filter(|(_, &c)| c > 0)
                .map(|(s, &c)| s / c as f64)
                .collect(),
            wall_s: started.elapsed().as_secs_f64(),
            params,
            checksum: model.checksum(),
        };
        log::debug!(
            "{:?} epoch {epoch}/{} loss {:.5} psnr {:.2} lr {:.2e}",
            plan.phase,
            plan.epochs,
            rec.loss,
            rec.psnr,
            lr
        );
        if let Some(p) = &ckpt {
            checkpoint::save(p, model, cfg, step as u64)?;
        }
        if let Some(p) = &opts.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
        }
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Fit every parameter for `cfg.train.epochs` epochs.
pub fn train(model: &mut Model<f32>, pyr: &ResolutionPyramid, cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainLog> {
    if cfg.train.epochs == 0 {
        return Err(Error::config("train.epochs must be at least 1"));
    }
    let plan = PhasePlan {
        phase: Phase::Fit,
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        warmup: cfg.train.warmup,
        quant: None,
        seed: cfg.train.seed,
    };
    run_phase(model, pyr, cfg, plan, opts)
}

/// Fine-tune through fake quantization at `bits` for `cfg.train.qat_epochs`
/// epochs, then freeze the per-tensor scales into the model.
pub fn qat_finetune(
    model: &mut Model<f32>,
    pyr: &ResolutionPyramid,
    cfg: &RunConfig,
    bits: u32,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    check_bits(bits)?;
    model.quant = None;
    let plan = PhasePlan {
        phase: Phase::Qat,
        epochs: cfg.train.qat_epochs,
        lr: cfg.train.qat_lr,
        warmup: 0.0,
        quant: Some(bits),
        seed: cfg.train.seed ^ 0x5154,
    };
    let log = run_phase(model, pyr, cfg, plan, opts)?;
    model.freeze_scales(bits);
    Ok(log)
}

/// Structural changes of `v` applied to `base`, without width adjustment.
pub fn variant_transform(base: &RunConfig, v: Variant) -> RunConfig {
    let mut c = base.clone();
    c.train.variant = v;
    match v {
        Variant::Full => {}
        Variant::V1 => c.encoder.temporal_fusion = false,
        Variant::V2 => c.loss.mrs = false,
        Variant::V3 => c.loss.boost = false,
        Variant::V4 => c.decoder.upsample = Upsample::Bilinear,
        Variant::V5 => c.decoder.upsample = Upsample::PixelShuffle,
        Variant::V6 => c.decoder.fusion = FusionKind::ConvMlp,
        Variant::V7 => c.decoder.cross_depth = false,
    }
    c
}

/// Decodable sizes of a variant against the full model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parity {
    pub full: usize,
    pub variant: usize,
}

impl Parity {
    pub fn rel(&self) -> f64 {
        (self.variant as f64 - self.full as f64).abs() / self.full as f64
    }
}

fn decodable(cfg: &RunConfig, dims: (usize, usize, usize)) -> Option<usize> {
    ModelSpec::new(cfg, dims.0, dims.1, dims.2).ok().map(|s| s.param_count(true))
}

fn with_split(cfg: &RunConfig, c0: usize, first: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.encoder.channels = c0;
    let rest: f64 = cfg.encoder.base_grids[1..].iter().map(|g| g[2]).sum();
    let left = (c0 - first) as f64;
    c.encoder.base_grids[0][2] = first as f64;
    for g in c.encoder.base_grids[1..].iter_mut() {
        g[2] = g[2] / rest * left;
    }
    c
}

/// The variant config with the encoder width retuned so the decodable
/// parameter count stays within [`PARITY_TOL`] of `base`. The width `C0` is
/// searched first; when no integer width is close enough, the split of
/// channels between the first base grid and the others is searched as well.
pub fn apply_variant(base: &RunConfig, v: Variant, dims: (usize, usize, usize)) -> Result<(RunConfig, Parity)> {
    let full = decodable(base, dims).ok_or_else(|| Error::config("base config does not build a model"))?;
    let mut c = variant_transform(base, v);
    let gap = |p: usize| (p as f64 - full as f64).abs();
    let c0 = base.encoder.channels;
    let mut best = (f64::INFINITY, c.clone(), 0usize);
    for w in (c0 / 2).max(2)..=c0 * 2 {
        let mut t = c.clone();
        t.encoder.channels = w;
        if let Some(p) = decodable(&t, dims) {
            if gap(p) < best.0 || (gap(p) == best.0 && w == c0) {
                best = (gap(p), t, p);
            }
        }
    }
    c = best.1.clone();
    if best.0 / full as f64 > PARITY_TOL && c.encoder.base_grids.len() > 1 {
        let w0 = c.encoder.channels;
        for w in w0.saturating_sub(2).max(2)..=w0 + 2 {
            for first in 1..w {
                let t = with_split(&c, w, first);
                if let Some(p) = decodable(&t, dims) {
                    if gap(p) < best.0 {
                        best = (gap(p), t, p);
                    }
                }
            }
        }
        c = best.1.clone();
    }
    let parity = Parity { full, variant: best.2 };
    if parity.rel() > PARITY_TOL {
        log::warn!("{v}: closest size {} is {:.2}% from {full}", parity.variant, 100.0 * parity.rel());
    }
    Ok((c, parity))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let total = 100;
        assert!((lr_at(0, total, 1.0, 0.0, 0.05) - 0.2).abs() < 1e-12);
        assert!((lr_at(4, total, 1.0, 0.0, 0.05) - 1.0).abs() < 1e-12);
        assert!((lr_at(5, total, 1.0, 0.1, 0.05) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, total, 1.0, 0.1, 0.05) < 0.11);
        assert!(lr_at(50, total, 1.0, 0.1, 0.05) < lr_at(30, total, 1.0, 0.1, 0.05));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(&[2], vec![1.0f64, -1.0])];
        let mut a = Adam::new(&p);
        a.step(&mut p, &[vec![3.0, -0.5]], 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[0][1] - 0.8).abs() < 1e-12);
    }
}
