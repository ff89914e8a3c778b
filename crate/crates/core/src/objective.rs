//! Scale-adaptive loss with high-frequency boosting of the full-resolution
//! reference.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::gaussian_1d;
use crate::tensor::Real;

/// Standard five-scale MS-SSIM weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const COEF_TOL: f64 = 1e-9;

/// Number of MS-SSIM scales usable for an image whose smaller side is `side`:
/// the largest `m <= 5` whose coarsest scale, after `m - 1` floor-halvings,
/// still holds the whole window.
pub fn ms_ssim_scales(side: usize) -> usize {
    (1..=5).rev().find(|&m| side >> (m - 1) >= SSIM_WINDOW).unwrap_or(0)
}

/// The first `m` standard weights, renormalized to sum to 1.
pub fn ms_ssim_weights(m: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..m];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaLossConfig {
    /// `alpha[r - 1]` for levels `r = 1..=N`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mrs: bool,
    pub boost: bool,
    pub hpf_kernel: usize,
    pub hpf_sigma: f64,
    pub hpf_tau: f64,
}

impl SaLossConfig {
    /// Coefficients for an `n`-level pyramid; the last `n` rows of the table
    /// are used, so the full-resolution row always pairs with level `N`.
    pub fn from_run(run: &RunConfig, n: usize) -> Result<Self> {
        let l = &run.loss;
        if l.alpha.len() != l.beta.len() {
            return Err(Error::config("loss.alpha and loss.beta differ in length"));
        }
        if n == 0 || n > l.alpha.len() {
            return Err(Error::config(format!(
                "{n} pyramid levels but loss tables have {} rows",
                l.alpha.len()
            )));
        }
        let skip = l.alpha.len() - n;
        Self::new(
            l.alpha[skip..].to_vec(),
            l.beta[skip..].to_vec(),
            l.mrs,
            l.boost,
            (l.hpf_kernel, l.hpf_sigma, l.hpf_tau),
        )
    }

    pub fn new(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        mrs: bool,
        boost: bool,
        (hpf_kernel, hpf_sigma, hpf_tau): (usize, f64, f64),
    ) -> Result<Self> {
        let n = alpha.len();
        if n == 0 || beta.len() != n {
            return Err(Error::config("loss.alpha and loss.beta must be non-empty and equal length"));
        }
        for (r, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                return Err(Error::config(format!("loss coefficients of level {} outside [0, 1]", r + 1)));
            }
            if r + 1 < n && (a + b - 1.0).abs() > COEF_TOL {
                return Err(Error::config(format!(
                    "loss.alpha + loss.beta must equal 1 below full resolution (level {}: {})",
                    r + 1,
                    a + b
                )));
            }
            if a + b > 1.0 + COEF_TOL {
                return Err(Error::config(format!("loss.alpha + loss.beta exceeds 1 at level {}", r + 1)));
            }
        }
        Ok(Self { alpha, beta, mrs, boost, hpf_kernel, hpf_sigma, hpf_tau })
    }

    pub fn levels(&self) -> usize {
        self.alpha.len()
    }

    /// Weight of the `(1 - MS-SSIM)` term at level `r`.
    pub fn ssim_weight(&self, r: usize) -> f64 {
        let w = 1.0 - self.alpha[r - 1] - self.beta[r - 1];
        if w.abs() <= COEF_TOL {
            0.0
        } else {
            w
        }
    }
}

/// Per-level loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub total: Var,
    pub mse: Var,
    pub l1: Var,
    /// `1 - MS-SSIM`, present when its weight is nonzero.
    pub ssim_term: Option<Var>,
    pub scales: usize,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub loss: f64,
    pub mse: f64,
    pub l1: f64,
    /// `1 - MS-SSIM`, when evaluated.
    pub ssim_term: Option<f64>,
    /// MS-SSIM scales used (fewer than 5 on small images).
    pub ssim_scales: usize,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelReport>,
    pub total: f64,
}

pub fn mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean(sq)
}

pub fn l1<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean(ad)
}

/// Per-channel SSIM and contrast-structure means of one scale.
fn ssim_terms<T: Real>(g: &mut Graph<T>, x: Var, y: Var, win: &[f64]) -> (Var, Var) {
    let mx = g.filter_valid(x, win.to_vec());
    let my = g.filter_valid(y, win.to_vec());
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let fxx = g.filter_valid(xx, win.to_vec());
    let fyy = g.filter_valid(yy, win.to_vec());
    let fxy = g.filter_valid(xy, win.to_vec());
    let mxx = g.mul(mx, mx);
    let myy = g.mul(my, my);
    let mxy = g.mul(mx, my);
    let sxx = g.sub(fxx, mxx);
    let syy = g.sub(fyy, myy);
    let sxy = g.sub(fxy, mxy);

    let cs_num = g.mul_scalar(sxy, 2.0);
    let cs_num = g.add_scalar(cs_num, C2);
    let cs_den = g.add(sxx, syy);
    let cs_den = g.add_scalar(cs_den, C2);
    let cs_map = g.div(cs_num, cs_den);

    let l_num = g.mul_scalar(mxy, 2.0);
    let l_num = g.add_scalar(l_num, C1);
    let l_den = g.add(mxx, myy);
    let l_den = g.add_scalar(l_den, C1);
    let l_map = g.div(l_num, l_den);
    let ssim_map = g.mul(l_map, cs_map);

    (g.mean_spatial(ssim_map), g.mean_spatial(cs_map))
}

/// Differentiable MS-SSIM of two `[h, w, c]` images in `[0, 1]`, averaged over
/// channels. Returns the value node and the number of scales used.
pub fn ms_ssim<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<(Var, usize)> {
    let s = g.shape(x);
    let side = s[0].min(s[1]);
    let m = ms_ssim_scales(side);
    if m == 0 {
        return Err(Error::Metric(format!("image side {side} too small for MS-SSIM")));
    }
    let weights = ms_ssim_weights(m);
    let win = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (mut x, mut y) = (x, y);
    let mut prod: Option<Var> = None;
    for (i, &w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(g, x, y, &win);
        let base = if i + 1 < m { cs } else { ssim };
        let r = g.relu(base);
        let f = g.pow_scalar(r, w);
        prod = Some(match prod {
            Some(p) => g.mul(p, f),
            None => f,
        });
        if i + 1 < m {
            x = g.avg_pool2(x);
            y = g.avg_pool2(y);
        }
    }
    Ok((g.mean(prod.unwrap()), m))
}

/// `alpha MSE + beta L1 + (1 - alpha - beta)(1 - MS-SSIM)` at level `r`.
pub fn sa_loss<T: Real>(g: &mut Graph<T>, pred: Var, reference: Var, r: usize, cfg: &SaLossConfig) -> Result<LevelLoss> {
    if r == 0 || r > cfg.levels() {
        return Err(Error::Index { index: r, lo: 1, hi: cfg.levels() });
    }
    if g.shape(pred) != g.shape(reference) {
        return Err(Error::Shape(format!(
            "level {r}: prediction {:?} vs reference {:?}",
            g.shape(pred),
            g.shape(reference)
        )));
    }
    let e = mse(g, pred, reference);
    let a = l1(g, pred, reference);
    let ea = g.mul_scalar(e, cfg.alpha[r - 1]);
    let ab = g.mul_scalar(a, cfg.beta[r - 1]);
    let mut total = g.add(ea, ab);
    let ws = cfg.ssim_weight(r);
    let (mut ssim_term, mut scales) = (None, 0);
    if ws != 0.0 {
        let (v, m) = ms_ssim(g, pred, reference)?;
        let neg = g.mul_scalar(v, -1.0);
        let term = g.add_scalar(neg, 1.0);
        let wt = g.mul_scalar(term, ws);
        total = g.add(total, wt);
        ssim_term = Some(term);
        scales = m;
    }
    Ok(LevelLoss { total, mse: e, l1: a, ssim_term, scales })
}

/// `clamp(target + threshold_tau(H(|target - recon|)), 0, 1)` with
/// `H = identity - Gaussian blur`. `recon` is detached: no gradient reaches it.
pub fn hf_boost<T: Real>(g: &mut Graph<T>, target: Var, recon: Var, cfg: &SaLossConfig) -> Var {
    let rc = g.detach(recon);
    let res = g.sub(target, rc);
    let mag = g.abs(res);
    let blur = g.filter_same(mag, gaussian_1d(cfg.hpf_kernel, cfg.hpf_sigma));
    let hp = g.sub(mag, blur);
    let th = g.threshold(hp, cfg.hpf_tau);
    let boosted = g.add(target, th);
    g.clamp(boosted, 0.0, 1.0)
}

/// Replace masked pixels of `target` by the (detached) prediction, so they
/// contribute neither loss nor gradient. `mask` is 1 on excluded pixels.
pub fn mask_target<T: Real>(g: &mut Graph<T>, target: Var, pred: Var, mask: Var) -> Var {
    let keep = g.mul_scalar(mask, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let kept = g.mul(target, keep);
    let p = g.detach(pred);
    let fill = g.mul(p, mask);
    g.add(kept, fill)
}

/// Loss nodes of one frame.
pub struct FrameLoss {
    pub total: Var,
    pub levels: Vec<(usize, LevelLoss)>,
}

/// Sum of the per-level losses of one decoded frame.
///
/// `projections` holds the level `1..N-1` predictions (empty when supervision
/// is off), `targets` the `N` pyramid references and `masks` optional
/// per-level exclusion masks.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    projections: &[Var],
    output: Var,
    targets: &[Var],
    masks: Option<&[Var]>,
    cfg: &SaLossConfig,
) -> Result<FrameLoss> {
    let n = cfg.levels();
    if targets.len() != n {
        return Err(Error::Contract(format!("{} targets for {n} levels", targets.len())));
    }
    if cfg.mrs && projections.len() + 1 != n {
        return Err(Error::Contract(format!(
            "multi-resolution supervision needs {} projections, decoder produced {}",
            n - 1,
            projections.len()
        )));
    }
    let masked = |g: &mut Graph<T>, target: Var, pred: Var, r: usize| match masks {
        Some(m) => mask_target(g, target, pred, m[r - 1]),
        None => target,
    };
    let mut levels = Vec::with_capacity(n);
    if cfg.mrs {
        for (i, &p) in projections.iter().enumerate() {
            let r = i + 1;
            let t = masked(g, targets[i], p, r);
            levels.push((r, sa_loss(g, p, t, r, cfg)?));
        }
    }
    let mut top = masked(g, targets[n - 1], output, n);
    if cfg.boost {
        top = hf_boost(g, top, output, cfg);
        top = masked(g, top, output, n);
    }
    levels.push((n, sa_loss(g, output, top, n, cfg)?));
    let mut total = levels[0].1.total;
    for (_, l) in &levels[1..] {
        total = g.add(total, l.total);
    }
    Ok(FrameLoss { total, levels })
}

impl FrameLoss {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let levels = self
            .levels
            .iter()
            .map(|(r, l)| LevelReport {
                level: *r,
                loss: g.item(l.total).f64(),
                mse: g.item(l.mse).f64(),
                l1: g.item(l.l1).f64(),
                ssim_term: l.ssim_term.map(|v| g.item(v).f64()),
                ssim_scales: l.scales,
            })
            .collect();
        LossReport { levels, total: g.item(self.total).f64() }
    }
}
