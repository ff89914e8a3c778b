//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod patch;

use msnerv::graph::{Graph, Var};
use msnerv::model::{Bound, Model, Net};
use msnerv::{RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// The small rig most tests share: 8 frames of 48x96, C0 = 32.
pub fn desk_cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.channels = 32;
    c
}

/// A decoder small enough for finite differences.
pub fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.channels = 8;
    c.decoder.channels_min = 4;
    c
}

/// Overwrite every parameter with `U(-amp, amp)`.
pub fn randomize<T: msnerv::Real>(model: &mut Model<T>, amp: f64, seed: u64) {
    let mut r = rng(seed);
    for p in &mut model.params {
        for v in p.data_mut() {
            *v = T::lit(r.gen_range(-amp..amp));
        }
    }
}

pub fn zero_param<T: msnerv::Real>(model: &mut Model<T>, i: usize) {
    for v in model.params[i].data_mut() {
        *v = T::zero();
    }
}

/// `sum(x * c)` for a fixed tensor `c` of the same shape.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, c: &Tensor<f64>) -> Var {
    let cv = g.constant(c.clone());
    let p = g.mul(x, cv);
    g.sum(p)
}

/// Bind `model` with the given leaves standing in for its parameters.
pub fn bound_from(vars: &[Var], n: usize) -> Bound {
    Bound { leaves: vars[..n].to_vec(), vars: vars[..n].to_vec() }
}

/// Central-difference check of `f` with respect to `tensors[i]` for every
/// `i` in `check`. Returns `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// per checked tensor.
pub fn fd_check(tensors: &[Tensor<f64>], check: &[usize], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> Vec<f64> {
    let eval = |ts: &[Tensor<f64>], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(tensors, true);
    let grads = g.backward(out);
    let h = 1e-6;
    let mut work = tensors.to_vec();
    check
        .iter()
        .map(|&i| {
            let analytic = grads.get_or_zeros(vars[i], tensors[i].len());
            let mut num = vec![0.0; tensors[i].len()];
            for (k, nk) in num.iter_mut().enumerate() {
                let v0 = tensors[i].data()[k];
                work[i].data_mut()[k] = v0 + h;
                let (g1, _, o1) = eval(&work, false);
                work[i].data_mut()[k] = v0 - h;
                let (g2, _, o2) = eval(&work, false);
                work[i].data_mut()[k] = v0;
                *nk = (g1.item(o1) - g2.item(o2)) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            let den = na.max(nn);
            assert!(den > 0.0, "tensor {i} has a zero gradient; the check would be vacuous");
            diff / den
        })
        .collect()
}

/// [`fd_check`] over model parameters: `f` gets a net bound to leaves that
/// stand in for `model.params`, followed by leaves for `inputs`.
pub fn fd_check_model(
    model: &Model<f64>,
    params: &[usize],
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, Net, &[Var]) -> Var,
) -> Vec<(String, f64)> {
    let np = model.params.len();
    let mut all = model.params.clone();
    all.extend(inputs.iter().cloned());
    let mut check = params.to_vec();
    check.extend(np..np + inputs.len());
    let errs = fd_check(&all, &check, |g, vars| {
        let bound = bound_from(vars, np);
        let net = Net::new(model, &bound);
        f(g, net, &vars[np..])
    });
    check
        .iter()
        .zip(errs)
        .map(|(&i, e)| {
            let name = if i < np { model.layout.params[i].name.clone() } else { format!("input{}", i - np) };
            (name, e)
        })
        .collect()
}

/// MS-SSIM written with a direct 2D window and explicit loops.
pub fn naive_ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h0, w0, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let g1: Vec<f64> = (-5..=5).map(|k: i32| (-(k * k) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let win: Vec<Vec<f64>> = g1.iter().map(|u| g1.iter().map(|v| u * v / (s * s)).collect()).collect();
    let all = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut m = 0;
    while m < 5 && (h0.min(w0) >> m) >= 11 {
        m += 1;
    }
    let wsum: f64 = all[..m].iter().sum();
    let mut total = 0.0;
    for ch in 0..c {
        let mut x: Vec<Vec<f64>> = (0..h0).map(|i| (0..w0).map(|j| a.data()[(i * w0 + j) * c + ch]).collect()).collect();
        let mut y: Vec<Vec<f64>> = (0..h0).map(|i| (0..w0).map(|j| b.data()[(i * w0 + j) * c + ch]).collect()).collect();
        let mut prod = 1.0;
        for k in 0..m {
            let (h, w) = (x.len(), x[0].len());
            let (mut cs_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0.0);
            for i in 0..=h - 11 {
                for j in 0..=w - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (di, row) in win.iter().enumerate() {
                        for (dj, wv) in row.iter().enumerate() {
                            let (p, q) = (x[i + di][j + dj], y[i + di][j + dj]);
                            mx += wv * p;
                            my += wv * q;
                            xx += wv * p * p;
                            yy += wv * q * q;
                            xy += wv * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let cs = (2.0 * (xy - mx * my) + c2) / ((xx - mx * mx) + (yy - my * my) + c2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    cs_sum += cs;
                    ssim_sum += l * cs;
                    n += 1.0;
                }
            }
            let v = if k + 1 == m { ssim_sum / n } else { cs_sum / n };
            prod *= v.max(0.0).powf(all[k] / wsum);
            let pool = |z: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..h / 2)
                    .map(|i| (0..w / 2).map(|j| (z[2 * i][2 * j] + z[2 * i][2 * j + 1] + z[2 * i + 1][2 * j] + z[2 * i + 1][2 * j + 1]) / 4.0).collect())
                    .collect()
            };
            x = pool(&x);
            y = pool(&y);
        }
        total += prod;
    }
    total / c as f64
}

/// Largest gradient of the masked full loss with respect to the targets, on
/// masked pixels and elsewhere, for a random f64 desk model and a centered
/// `size` mask.
pub fn masked_target_grads(size: (usize, usize), seed: u64) -> (f64, f64) {
    use msnerv::objective::SaLossConfig;
    use msnerv::tasks::level_masks;
    use msnerv::trainer::frame_loss;
    use msnerv::video_io::{build_pyramid, synthetic_video};

    let cfg = desk_cfg();
    let video = synthetic_video(8, 48, 96).unwrap();
    let spec = msnerv::model::ModelSpec::new(&cfg, 8, 48, 96).unwrap();
    let n = spec.levels;
    let pyr = build_pyramid(&video, n).unwrap();
    let mut m = Model::<f64>::init(spec, seed);
    randomize(&mut m, 0.2, seed + 1);
    let masks = level_masks(48, 96, n, Some(size)).unwrap().unwrap();
    let loss = SaLossConfig::from_run(&cfg, n).unwrap();
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for t in [1, 5] {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false, None);
        let net = Net::new(&m, &b);
        let targets: Vec<Var> = (1..=n).map(|r| g.leaf(pyr.get(r, t).cast(), true)).collect();
        let mv: Vec<Var> = masks.iter().map(|k| g.constant(k.cast())).collect();
        let (fl, _) = frame_loss(&mut g, net, t, None, &targets, Some(&mv), &loss).unwrap();
        let grads = g.backward(fl.total);
        for (r, &tv) in targets.iter().enumerate() {
            let d = grads.get_or_zeros(tv, masks[r].len());
            for (v, k) in d.iter().zip(masks[r].data()) {
                if *k > 0.5 {
                    inside = inside.max(v.abs());
                } else {
                    outside = outside.max(v.abs());
                }
            }
        }
    }
    (inside, outside)
}
