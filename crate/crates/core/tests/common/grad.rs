//! Finite-difference checks shared by the gradient tests and the acceptance run.

use super::*;
use msnerv::decoder::msf_block;
use msnerv::encoder::encode;
use msnerv::graph::Graph;
use msnerv::model::{Model, ModelSpec};
use msnerv::objective::{hf_boost, sa_loss, SaLossConfig};
use msnerv::Tensor;

pub const TOL: f64 = 1e-4;
pub const MAX_ELEMS: usize = 1000;

fn encoder_model() -> Model<f64> {
    let mut cfg = tiny_cfg();
    cfg.encoder.channels = 4;
    cfg.encoder.gop_count = 2;
    let spec = ModelSpec::new(&cfg, 6, 72, 96).unwrap();
    let mut m = Model::<f64>::init(spec, 1);
    randomize(&mut m, 0.5, 2);
    m
}

/// Base grids, window weights and GoP grids through a weighted sum of every
/// frame's encoding.
pub fn encoder_errors() -> Vec<(String, f64)> {
    let m = encoder_model();
    let enc = m.layout.encoder.clone();
    let mut which = enc.base.clone();
    which.push(enc.window.unwrap());
    which.push(enc.gop.unwrap());
    for &i in &which {
        assert!(m.params[i].len() <= MAX_ELEMS);
    }
    let mut r = rng(3);
    let (h, w, c) = (m.spec.grid_h, m.spec.grid_w, m.spec.channels);
    let coef: Vec<Tensor<f64>> = (0..m.spec.frames).map(|_| uniform(&[h, w, c], -1.0, 1.0, &mut r)).collect();
    fd_check_model(&m, &which, &[], |g, net, _| {
        let mut acc = None;
        for t in 1..=net.spec.frames {
            let x = encode(g, net, t).unwrap();
            let s = weighted_sum(g, x, &coef[t - 1]);
            acc = Some(match acc {
                Some(a) => g.add(a, s),
                None => s,
            });
        }
        acc.unwrap()
    })
}

/// Every parameter of one decoder block, and its input.
pub fn msf_block_errors() -> Vec<(String, f64)> {
    let cfg = tiny_cfg();
    let spec = ModelSpec::new(&cfg, 4, 48, 48).unwrap();
    let mut m = Model::<f64>::init(spec, 4);
    randomize(&mut m, 0.5, 5);
    let n = 1;
    let b = m.spec.blocks[n];
    let prefix = format!("dec{n}.");
    let which: Vec<usize> = m
        .layout
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with(&prefix))
        .map(|(i, _)| i)
        .collect();
    assert!(which.len() > 20);
    for &i in &which {
        assert!(m.params[i].len() <= MAX_ELEMS, "{}", m.layout.params[i].name);
    }
    let mut r = rng(6);
    let x = uniform(&[3, 3, b.cin], -1.0, 1.0, &mut r);
    let (oh, ow) = (3 * b.factor, 3 * b.factor);
    let coef = uniform(&[oh, ow, b.cout], -1.0, 1.0, &mut r);
    fd_check_model(&m, &which, &[x], |g, net, inp| {
        let (y, _) = msf_block(g, net, n, inp[0], 0.37);
        weighted_sum(g, y, &coef)
    })
}

pub fn loss_cfg() -> SaLossConfig {
    SaLossConfig::new(vec![0.8, 0.7, 0.6], vec![0.2, 0.3, 0.3], true, true, (5, 1.0, 0.0)).unwrap()
}

/// A smooth image plus noise, and a nearby reference.
pub fn image_pair(shape: &[usize], seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let (h, w) = (shape[0], shape[1]);
    let noise = uniform(shape, -0.05, 0.05, &mut r);
    let c = shape[2];
    let base = Tensor::from_fn(shape, |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        0.5 + 0.25 * ((y as f64 / h as f64 * 3.0 + ch as f64).sin() * (x as f64 / w as f64 * 2.0).cos()) + noise.data()[i]
    });
    let off = uniform(shape, -0.08, 0.08, &mut r);
    let other = Tensor::from_fn(shape, |i| base.data()[i] + off.data()[i]);
    (base, other)
}

/// The loss at every level with respect to prediction and reference.
pub fn sa_loss_errors() -> Vec<(String, f64)> {
    let cfg = loss_cfg();
    // 22 px is the smallest side with two MS-SSIM scales; 2 channels keep it under 10^3.
    let shape = [22, 22, 2];
    let (pred, reference) = image_pair(&shape, 7);
    assert!(pred.len() <= MAX_ELEMS);
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.clone());
    let q = g.constant(reference.clone());
    let top = sa_loss(&mut g, p, q, cfg.levels(), &cfg).unwrap();
    assert_eq!(top.scales, 2, "the MS-SSIM path must be exercised across scales");
    let mut out = Vec::new();
    for r in 1..=cfg.levels() {
        let errs = fd_check(&[pred.clone(), reference.clone()], &[0, 1], |g, v| {
            sa_loss(g, v[0], v[1], r, &cfg).unwrap().total
        });
        out.push((format!("level {r} prediction"), errs[0]));
        out.push((format!("level {r} reference"), errs[1]));
    }
    out
}

/// The boosted reference with respect to the target, and the largest
/// gradient that leaks into the detached reconstruction (must be 0).
pub fn hf_boost_errors() -> (Vec<(String, f64)>, f64) {
    let cfg = loss_cfg();
    let (target, recon) = image_pair(&[12, 16, 3], 8);
    let coef = uniform(&[12, 16, 3], -1.0, 1.0, &mut rng(9));
    let errs = fd_check(&[target.clone(), recon.clone()], &[0], |g, v| {
        let b = hf_boost(g, v[0], v[1], &cfg);
        weighted_sum(g, b, &coef)
    });
    let mut g = Graph::<f64>::new();
    let t = g.leaf(target, true);
    let rc = g.leaf(recon, true);
    let b = hf_boost(&mut g, t, rc, &cfg);
    let s = weighted_sum(&mut g, b, &coef);
    let grads = g.backward(s);
    let leak = grads.get_or_zeros(rc, 12 * 16 * 3).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (vec![("boost target".to_string(), errs[0])], leak)
}

/// Smallest `|boost(target, recon) - recon|`: the L1 term has a kink there.
fn kink_margin(target: &Tensor<f64>, recon: &Tensor<f64>, cfg: &SaLossConfig) -> f64 {
    let mut g = Graph::<f64>::new();
    let t = g.constant(target.clone());
    let r = g.constant(recon.clone());
    let b = hf_boost(&mut g, t, r, cfg);
    g.value(b).data().iter().zip(recon.data()).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min)
}

/// The boosted target fed through the loss at every level.
pub fn boosted_loss_errors() -> Vec<(String, f64)> {
    let cfg = loss_cfg();
    // Central differences straddling the L1 kink would be meaningless.
    let (target, recon) = (10..)
        .map(|seed| image_pair(&[22, 22, 2], seed))
        .find(|(t, r)| kink_margin(t, r, &cfg) > 1e-4)
        .unwrap();
    (1..=cfg.levels())
        .map(|r| {
            let errs = fd_check(&[target.clone(), recon.clone()], &[0], |g, v| {
                let b = hf_boost(g, v[0], v[1], &cfg);
                sa_loss(g, v[1], b, r, &cfg).unwrap().total
            });
            (format!("boosted level {r}"), errs[0])
        })
        .collect()
}
