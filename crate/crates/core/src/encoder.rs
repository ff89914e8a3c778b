//! Frame index to fused feature grid.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{align_corners_tap, resize_taps};
use crate::model::Net;
use crate::tensor::Real;

/// Base features at extended index `i` in `1..=T+l-1`: every sub-grid sampled
/// trilinearly (corners aligned) onto the `h x w` grid, concatenated.
pub fn sample_base<T: Real>(g: &mut Graph<T>, net: Net, i: usize) -> Result<Var> {
    let s = net.spec;
    let e = s.extent();
    if i == 0 || i > e {
        return Err(Error::Index { index: i, lo: 1, hi: e });
    }
    let pos = if e > 1 { (i - 1) as f64 / (e - 1) as f64 } else { 0.0 };
    let parts: Vec<Var> = s
        .base
        .iter()
        .zip(&net.layout.encoder.base)
        .map(|(b, &pi)| {
            let tt = align_corners_tap(b.t, pos);
            g.grid_sample(net.p(pi), tt, resize_taps(b.h, s.grid_h), resize_taps(b.w, s.grid_w))
        })
        .collect();
    Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts) })
}

/// `sum_{i=t}^{t+l-1} w_i^t * base(i)`; plain `base(t)` without temporal fusion.
pub fn fuse_temporal<T: Real>(g: &mut Graph<T>, net: Net, t: usize) -> Result<Var> {
    let s = net.spec;
    if t == 0 || t > s.frames {
        return Err(Error::Index { index: t, lo: 1, hi: s.frames });
    }
    let Some(wi) = net.layout.encoder.window else {
        return sample_base(g, net, t);
    };
    let w = net.p(wi);
    let l = s.window;
    let mut acc: Option<Var> = None;
    for k in 0..l {
        let b = sample_base(g, net, t + k)?;
        let term = g.scale_by(b, w, (t - 1) * l + k);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Fused grid of frame `t`: temporal fusion plus the grid of its GoP.
pub fn encode<T: Real>(g: &mut Graph<T>, net: Net, t: usize) -> Result<Var> {
    let x = fuse_temporal(g, net, t)?;
    Ok(match net.layout.encoder.gop {
        Some(gi) => {
            let k = net.spec.gop_index(t);
            let bg = g.index0(net.p(gi), k - 1);
            g.add(x, bg)
        }
        None => x,
    })
}
