//! Progressive upsampling of a fused grid to an RGB frame.

use crate::config::{FusionKind, Upsample, GRID_STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Tap2;
use crate::model::Net;
use crate::tensor::Real;
use crate::video_io::PatchWindow;

const LN_EPS: f64 = 1e-5;

/// Intermediate and final outputs of one decode.
#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// Block outputs `X_1..X_B`.
    pub features: Vec<Var>,
    /// Per-block fusion-layer outputs `X_n^(1..K)`.
    pub taps: Vec<Vec<Var>>,
    /// Level-head predictions for pyramid levels `1..N-1` (training only).
    pub projections: Vec<Var>,
    /// `[H, W, 3]`; clamped to `[0, 1]` outside training.
    pub output: Var,
}

fn identity_taps(n: usize) -> Vec<Tap2> {
    (0..n).map(|i| Tap2 { i0: i, i1: i, w0: 1.0, w1: 0.0 }).collect()
}

/// Normalized temporal position of frame `t` (1-based) in a `frames` clip.
pub fn time_pos(t: f64, frames: usize) -> f64 {
    if frames > 1 {
        ((t - 1.0) / (frames - 1) as f64).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Bilinear branch + pixel-shuffle branch + periodic hierarchical encoding.
pub fn hybrid_upsample<T: Real>(g: &mut Graph<T>, net: Net, n: usize, x: Var, tpos: f64) -> Var {
    let s = net.spec.blocks[n].factor;
    let idx = &net.layout.blocks[n];
    let mut up: Option<Var> = None;
    if net.spec.upsample != Upsample::PixelShuffle {
        up = Some(g.bilinear_up(x, s));
    }
    if let Some(a) = idx.shuffle {
        let p = g.linear(x, net.p(a.w), Some(net.p(a.b)));
        let ps = g.pixel_shuffle(p, s);
        up = Some(match up {
            Some(u) => g.add(u, ps),
            None => ps,
        });
    }
    let up = up.expect("upsampling mode yields at least one branch");
    let gamma = net.p(idx.gamma);
    let tt = crate::kernels::align_corners_tap(net.spec.hier_frames, tpos);
    let tile = g.grid_sample(gamma, tt, identity_taps(s), identity_taps(s));
    g.add_tiled(up, tile, (0, 0))
}

/// Fusion layer `k` of block `n`.
pub fn fusion_layer<T: Real>(g: &mut Graph<T>, net: Net, n: usize, k: usize, x: Var) -> Var {
    let b = &net.spec.blocks[n];
    let l = &net.layout.blocks[n].layers[k];
    let nx = g.layer_norm(x, net.p(l.ln1.w), net.p(l.ln1.b), LN_EPS);
    let mut a = g.depthwise(nx, net.p(l.dw3.w), Some(net.p(l.dw3.b)));
    if let Some(d5) = l.dw5 {
        let a5 = g.depthwise(nx, net.p(d5.w), Some(net.p(d5.b)));
        a = g.add(a, a5);
    }
    let na = g.layer_norm(a, net.p(l.ln2.w), net.p(l.ln2.b), LN_EPS);
    let h = g.linear(na, net.p(l.mlp1.w), Some(net.p(l.mlp1.b)));
    let h = g.gelu(h);
    let m = g.linear(h, net.p(l.mlp2.w), Some(net.p(l.mlp2.b)));
    let branch = match net.spec.fusion {
        FusionKind::MultiScale => {
            let keep = g.slice_channels(a, 0, b.cout - b.slice);
            g.concat(&[keep, m])
        }
        FusionKind::ConvMlp => m,
    };
    g.add(x, branch)
}

/// Block `n`: upsample, project channels, fuse, then add the cross-depth term.
pub fn msf_block<T: Real>(g: &mut Graph<T>, net: Net, n: usize, x: Var, tpos: f64) -> (Var, Vec<Var>) {
    let idx = &net.layout.blocks[n];
    let up = hybrid_upsample(g, net, n, x, tpos);
    let mut h = g.linear(up, net.p(idx.proj.w), Some(net.p(idx.proj.b)));
    let mut taps = Vec::with_capacity(idx.layers.len());
    for k in 0..idx.layers.len() {
        h = fusion_layer(g, net, n, k, h);
        taps.push(h);
    }
    let out = match idx.cross {
        Some(c) => {
            let cat = if taps.len() == 1 { taps[0] } else { g.concat(&taps) };
            let gx = g.linear(cat, net.p(c.w), Some(net.p(c.b)));
            g.add(h, gx)
        }
        None => h,
    };
    (out, taps)
}

/// Decode a fused grid (or a rectangular crop of one).
pub fn decode<T: Real>(g: &mut Graph<T>, net: Net, grid: Var, tpos: f64, train: bool) -> Result<DecoderOut> {
    let s = net.spec;
    let c = *g.shape(grid).last().unwrap();
    if c != s.channels || g.shape(grid).len() != 3 {
        return Err(Error::config(format!(
            "grid {:?} does not match the first block input width {}",
            g.shape(grid),
            s.channels
        )));
    }
    let mut x = grid;
    let mut features = Vec::with_capacity(s.blocks.len());
    let mut taps = Vec::with_capacity(s.blocks.len());
    for n in 0..s.blocks.len() {
        let (y, t) = msf_block(g, net, n, x, tpos);
        features.push(y);
        taps.push(t);
        x = y;
    }
    let head = net.layout.head;
    let mut output = g.conv2d(x, net.p(head.w), Some(net.p(head.b)));
    if !train {
        output = g.clamp(output, 0.0, 1.0);
    }
    let projections = if train {
        net.layout
            .level_heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let f = features[s.block_of_level(i + 1)];
                g.conv2d(f, net.p(h.w), Some(net.p(h.b)))
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(DecoderOut { features, taps, projections, output })
}

/// Result of a windowed decode.
#[derive(Clone, Debug)]
pub struct PatchDecode {
    /// Outputs cropped to the window at every scale.
    pub out: DecoderOut,
    /// False when the context margin was below the receptive-field bound, so
    /// the window may differ from the full-frame decode near its edges.
    pub exact: bool,
    pub context: usize,
}

/// Decode only `window` (full-resolution pixels, multiples of the grid
/// stride) from the full fused grid, using `context` grid cells of
/// neighboring content. Context is clipped at the frame border, where the
/// full decode sees the same zero padding.
pub fn decode_window<T: Real>(
    g: &mut Graph<T>,
    net: Net,
    grid: Var,
    tpos: f64,
    train: bool,
    window: PatchWindow,
    context: usize,
) -> Result<PatchDecode> {
    let s = net.spec;
    let st = GRID_STRIDE;
    if window.row0 % st != 0 || window.col0 % st != 0 || window.rows % st != 0 || window.cols % st != 0 {
        return Err(Error::config(format!("window {window:?} is not aligned to {st}")));
    }
    let (gr0, gc0, grn, gcn) = (window.row0 / st, window.col0 / st, window.rows / st, window.cols / st);
    if grn == 0 || gcn == 0 || gr0 + grn > s.grid_h || gc0 + gcn > s.grid_w {
        return Err(Error::config(format!("window {window:?} outside the frame")));
    }
    let r0 = gr0.saturating_sub(context);
    let c0 = gc0.saturating_sub(context);
    let r1 = (gr0 + grn + context).min(s.grid_h);
    let c1 = (gc0 + gcn + context).min(s.grid_w);
    let sub = g.crop(grid, r0, c0, r1 - r0, c1 - c0);
    let full = decode(g, net, sub, tpos, train)?;

    let mut scale = 1;
    let mut features = Vec::with_capacity(full.features.len());
    let mut taps = Vec::with_capacity(full.taps.len());
    let mut scales = Vec::with_capacity(full.features.len());
    for (n, (&f, t)) in full.features.iter().zip(&full.taps).enumerate() {
        scale *= s.blocks[n].factor;
        scales.push(scale);
        let (dr, dc, hr, wc) = ((gr0 - r0) * scale, (gc0 - c0) * scale, grn * scale, gcn * scale);
        features.push(g.crop(f, dr, dc, hr, wc));
        taps.push(t.iter().map(|&v| g.crop(v, dr, dc, hr, wc)).collect());
    }
    let projections = full
        .projections
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let sc = scales[s.block_of_level(i + 1)];
            g.crop(p, (gr0 - r0) * sc, (gc0 - c0) * sc, grn * sc, gcn * sc)
        })
        .collect();
    let output = g.crop(full.output, (gr0 - r0) * st, (gc0 - c0) * st, window.rows, window.cols);
    let exact = context >= s.context_cells();
    if !exact {
        log::warn!("patch context {context} is below the bound {}; window decode is approximate", s.context_cells());
    }
    Ok(PatchDecode { out: DecoderOut { features, taps, projections, output }, exact, context })
}
