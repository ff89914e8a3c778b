//! Upsampling, fusion layers, blocks and the full decoder.

mod common;

use common::*;
use msnerv::config::{FusionKind, Upsample};
use msnerv::decoder::{decode, fusion_layer, hybrid_upsample, msf_block};
use msnerv::graph::{Graph, Var};
use msnerv::model::{Model, ModelSpec, Net};
use msnerv::{RunConfig, Tensor};

/// Model whose block 1 is `4 -> 4` channels, x2, with `depth` fusion layers.
fn small(depth: usize, seed: u64) -> Model<f64> {
    let mut cfg = tiny_cfg();
    cfg.decoder.fusion_depth = vec![depth; 4];
    let mut m = Model::<f64>::init(ModelSpec::new(&cfg, 4, 48, 48).unwrap(), seed);
    randomize(&mut m, 0.5, seed + 100);
    m
}

fn run(m: &Model<f64>, inputs: &[Tensor<f64>], f: impl FnOnce(&mut Graph<f64>, Net, &[Var]) -> Var) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = m.bind(&mut g, false, None);
    let net = Net::new(m, &b);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, net, &vars);
    g.value(out).clone()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

fn p<'a>(m: &'a Model<f64>, name: &str) -> &'a [f64] {
    m.get(name).unwrap_or_else(|| panic!("no {name}")).data()
}

fn zero(m: &mut Model<f64>, name: &str) {
    m.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

// Straight-line f64 reference implementation over channels-last buffers.

#[derive(Clone, Debug)]
struct Img {
    h: usize,
    w: usize,
    c: usize,
    d: Vec<f64>,
}

impl Img {
    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.d[(i * self.w + j) * self.c + k]
    }
    fn from(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Img { h: s[0], w: s[1], c: s[2], d: t.data().to_vec() }
    }
}

fn lin(x: &Img, w: &[f64], b: &[f64], cout: usize) -> Img {
    let mut d = vec![0.0; x.h * x.w * cout];
    for px in 0..x.h * x.w {
        for o in 0..cout {
            let mut acc = b[o];
            for i in 0..x.c {
                acc += x.d[px * x.c + i] * w[i * cout + o];
            }
            d[px * cout + o] = acc;
        }
    }
    Img { h: x.h, w: x.w, c: cout, d }
}

fn norm(x: &Img, g: &[f64], b: &[f64]) -> Img {
    let mut d = x.d.clone();
    for px in 0..x.h * x.w {
        let v = &x.d[px * x.c..(px + 1) * x.c];
        let mean = v.iter().sum::<f64>() / x.c as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.c as f64;
        for k in 0..x.c {
            d[px * x.c + k] = (v[k] - mean) / (var + 1e-5).sqrt() * g[k] + b[k];
        }
    }
    Img { d, ..x.clone() }
}

fn dwconv(x: &Img, k: &[f64], b: &[f64], ks: usize) -> Img {
    let r = ks as isize / 2;
    let mut d = vec![0.0; x.d.len()];
    for i in 0..x.h as isize {
        for j in 0..x.w as isize {
            for ch in 0..x.c {
                let mut acc = b[ch];
                for di in -r..=r {
                    for dj in -r..=r {
                        let (ii, jj) = (i + di, j + dj);
                        if ii < 0 || jj < 0 || ii >= x.h as isize || jj >= x.w as isize {
                            continue;
                        }
                        let kk = (((di + r) * ks as isize + dj + r) as usize) * x.c + ch;
                        acc += k[kk] * x.at(ii as usize, jj as usize, ch);
                    }
                }
                d[(i as usize * x.w + j as usize) * x.c + ch] = acc;
            }
        }
    }
    Img { d, ..x.clone() }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn bilinear(x: &Img, s: usize) -> Img {
    let src = |o: usize, n: usize| {
        let p = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), p - i0 as f64)
    };
    let (h, w) = (x.h * s, x.w * s);
    let mut d = vec![0.0; h * w * x.c];
    for i in 0..h {
        let (a0, a1, fa) = src(i, x.h);
        for j in 0..w {
            let (b0, b1, fb) = src(j, x.w);
            for ch in 0..x.c {
                d[(i * w + j) * x.c + ch] = (1.0 - fa) * ((1.0 - fb) * x.at(a0, b0, ch) + fb * x.at(a0, b1, ch))
                    + fa * ((1.0 - fb) * x.at(a1, b0, ch) + fb * x.at(a1, b1, ch));
            }
        }
    }
    Img { h, w, c: x.c, d }
}

/// Depth-to-space with the usual channel order `c * s^2 + a * s + b`.
fn shuffle(x: &Img, s: usize) -> Img {
    let c = x.c / (s * s);
    let (h, w) = (x.h * s, x.w * s);
    let mut d = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                d[(i * w + j) * c + ch] = x.at(i / s, j / s, ch * s * s + (i % s) * s + j % s);
            }
        }
    }
    Img { h, w, c, d }
}

fn gamma_tile(m: &Model<f64>, n: usize, tpos: f64, h: usize, w: usize) -> Img {
    let s = m.spec.blocks[n].factor;
    let c = m.spec.blocks[n].cin;
    let tg = m.spec.hier_frames;
    let gm = p(m, &format!("dec{n}.gamma"));
    let x = tpos * (tg - 1) as f64;
    let t0 = (x.floor() as usize).min(tg - 1);
    let t1 = (t0 + 1).min(tg - 1);
    let f = x - t0 as f64;
    let mut d = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let at = |t: usize| gm[((t * s + i % s) * s + j % s) * c + ch];
                d[(i * w + j) * c + ch] = (1.0 - f) * at(t0) + f * at(t1);
            }
        }
    }
    Img { h, w, c, d }
}

fn oracle_upsample(m: &Model<f64>, n: usize, x: &Img, tpos: f64) -> Img {
    let s = m.spec.blocks[n].factor;
    let pre = format!("dec{n}");
    let mut up = bilinear(x, s);
    let proj = lin(x, p(m, &format!("{pre}.shuffle.w")), p(m, &format!("{pre}.shuffle.b")), x.c * s * s);
    let ps = shuffle(&proj, s);
    let gt = gamma_tile(m, n, tpos, up.h, up.w);
    for k in 0..up.d.len() {
        up.d[k] += ps.d[k] + gt.d[k];
    }
    up
}

fn oracle_fusion(m: &Model<f64>, n: usize, k: usize, x: &Img) -> Img {
    let q = format!("dec{n}.fuse{k}");
    let b = m.spec.blocks[n];
    let nx = norm(x, p(m, &format!("{q}.ln1.g")), p(m, &format!("{q}.ln1.b")));
    let a3 = dwconv(&nx, p(m, &format!("{q}.dw3.w")), p(m, &format!("{q}.dw3.b")), 3);
    let a5 = dwconv(&nx, p(m, &format!("{q}.dw5.w")), p(m, &format!("{q}.dw5.b")), 5);
    let a = Img { d: a3.d.iter().zip(&a5.d).map(|(u, v)| u + v).collect(), ..a3 };
    let na = norm(&a, p(m, &format!("{q}.ln2.g")), p(m, &format!("{q}.ln2.b")));
    let mut hid = lin(&na, p(m, &format!("{q}.mlp1.w")), p(m, &format!("{q}.mlp1.b")), b.hidden);
    hid.d.iter_mut().for_each(|v| *v = gelu(*v));
    let mo = lin(&hid, p(m, &format!("{q}.mlp2.w")), p(m, &format!("{q}.mlp2.b")), b.slice);
    let mut y = x.clone();
    let keep = b.cout - b.slice;
    for px in 0..x.h * x.w {
        for ch in 0..b.cout {
            let br = if ch < keep { a.d[px * b.cout + ch] } else { mo.d[px * b.slice + ch - keep] };
            y.d[px * b.cout + ch] += br;
        }
    }
    y
}

fn oracle_block(m: &Model<f64>, n: usize, x: &Img, tpos: f64) -> (Img, Vec<Img>) {
    let b = m.spec.blocks[n];
    let up = oracle_upsample(m, n, x, tpos);
    let mut h = lin(&up, p(m, &format!("dec{n}.proj.w")), p(m, &format!("dec{n}.proj.b")), b.cout);
    let mut taps = Vec::new();
    for k in 0..b.depth {
        h = oracle_fusion(m, n, k, &h);
        taps.push(h.clone());
    }
    let mut cat = Img { h: h.h, w: h.w, c: b.cout * b.depth, d: vec![0.0; h.h * h.w * b.cout * b.depth] };
    for px in 0..h.h * h.w {
        for (k, t) in taps.iter().enumerate() {
            for ch in 0..b.cout {
                cat.d[px * cat.c + k * b.cout + ch] = t.d[px * b.cout + ch];
            }
        }
    }
    let g = lin(&cat, p(m, &format!("dec{n}.cross.w")), p(m, &format!("dec{n}.cross.b")), b.cout);
    let out = Img { d: h.d.iter().zip(&g.d).map(|(u, v)| u + v).collect(), ..h };
    (out, taps)
}

#[test]
fn block_matches_straight_line_reference() {
    let m = small(2, 1);
    let n = 1;
    let b = m.spec.blocks[n];
    assert_eq!((b.cin, b.cout, b.factor, b.depth), (4, 4, 2, 2));
    let x = uniform(&[2, 2, 4], -1.0, 1.0, &mut rng(2));
    for tpos in [0.0, 0.3, 0.5, 1.0] {
        let got = run(&m, &[x.clone()], |g, net, v| msf_block(g, net, n, v[0], tpos).0);
        let (want, _) = oracle_block(&m, n, &Img::from(&x), tpos);
        assert_eq!(got.shape(), &[4, 4, 4]);
        close(got.data(), &want.d, 1e-12);
    }
}

#[test]
fn zero_cross_projection_leaves_the_last_tap() {
    let mut m = small(3, 3);
    zero(&mut m, "dec1.cross.w");
    zero(&mut m, "dec1.cross.b");
    let x = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng(4));
    let mut g = Graph::new();
    let bd = m.bind(&mut g, false, None);
    let xv = g.constant(x);
    let (out, taps) = msf_block(&mut g, Net::new(&m, &bd), 1, xv, 0.25);
    assert_eq!(g.value(out).data(), g.value(*taps.last().unwrap()).data());
}

#[test]
fn cross_term_is_exactly_additive() {
    let m = small(3, 5);
    let x = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng(6));
    let mut g = Graph::new();
    let bd = m.bind(&mut g, false, None);
    let xv = g.constant(x);
    let net = Net::new(&m, &bd);
    let (out, taps) = msf_block(&mut g, net, 1, xv, 0.6);
    let cat = g.concat(&taps);
    let c = m.layout.blocks[1].cross.unwrap();
    let gx = g.linear(cat, net.p(c.w), Some(net.p(c.b)));
    let last = *taps.last().unwrap();
    for ((o, l), q) in g.value(out).data().iter().zip(g.value(last).data()).zip(g.value(gx).data()) {
        assert_eq!(*o, l + q);
    }
}

#[test]
fn single_layer_block() {
    let m = small(1, 7);
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(8));
    let got = run(&m, &[x.clone()], |g, net, v| msf_block(g, net, 1, v[0], 0.1).0);
    let (want, taps) = oracle_block(&m, 1, &Img::from(&x), 0.1);
    assert_eq!(taps.len(), 1);
    close(got.data(), &want.d, 1e-12);
}

#[test]
fn zero_fusion_weights_give_the_identity() {
    for fusion in [FusionKind::MultiScale, FusionKind::ConvMlp] {
        let mut cfg = tiny_cfg();
        cfg.decoder.fusion = fusion;
        let mut m = Model::<f64>::init(ModelSpec::new(&cfg, 4, 48, 48).unwrap(), 9);
        randomize(&mut m, 0.5, 10);
        let mut names = vec!["dw3.w", "dw3.b", "mlp2.w", "mlp2.b"];
        if fusion == FusionKind::MultiScale {
            names.extend(["dw5.w", "dw5.b"]);
        }
        for k in 0..3 {
            for nm in &names {
                zero(&mut m, &format!("dec1.fuse{k}.{nm}"));
            }
        }
        let x = uniform(&[5, 4, 4], -1.0, 1.0, &mut rng(11));
        for k in 0..3 {
            let y = run(&m, &[x.clone()], |g, net, v| fusion_layer(g, net, 1, k, v[0]));
            assert_eq!(y.data(), x.data(), "{fusion:?} layer {k}");
        }
    }
}

#[test]
fn identity_depthwise_passes_the_normalized_input() {
    let mut m = small(3, 12);
    let q = "dec1.fuse0";
    for nm in ["dw3.b", "dw5.w", "dw5.b", "mlp2.w", "mlp2.b"] {
        zero(&mut m, &format!("{q}.{nm}"));
    }
    let c = 4;
    let k3 = m.get_mut(&format!("{q}.dw3.w")).unwrap();
    *k3 = Tensor::from_fn(&[3, 3, c], |i| if i / c == 4 { 1.0 } else { 0.0 });
    m.get_mut(&format!("{q}.ln1.g")).unwrap().data_mut().fill(1.0);
    zero(&mut m, &format!("{q}.ln1.b"));
    let x = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng(13));
    let y = run(&m, &[x.clone()], |g, net, v| fusion_layer(g, net, 1, 0, v[0]));
    assert_eq!(m.spec.blocks[1].slice, 2);
    for px in 0..9 {
        let v = &x.data()[px * c..(px + 1) * c];
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        for ch in 0..2 {
            let want = v[ch] + (v[ch] - mean) / (var + 1e-5).sqrt();
            assert!((y.data()[px * c + ch] - want).abs() < 1e-12);
        }
        // The MLP half is zero, so those channels pass through.
        for ch in 2..4 {
            assert_eq!(y.data()[px * c + ch], v[ch]);
        }
    }
}

#[test]
fn fusion_layer_is_translation_equivariant_inside() {
    let m = small(3, 14);
    let (h, w, c) = (10, 7, 4);
    let mut r = rng(15);
    let x = uniform(&[h, w, c], -1.0, 1.0, &mut r);
    let fresh = uniform(&[1, w, c], -1.0, 1.0, &mut r);
    let mut shifted = fresh.data().to_vec();
    shifted.extend_from_slice(&x.data()[..(h - 1) * w * c]);
    let xs = Tensor::from_vec(&[h, w, c], shifted);
    let a = run(&m, &[x], |g, net, v| fusion_layer(g, net, 1, 0, v[0]));
    let b = run(&m, &[xs], |g, net, v| fusion_layer(g, net, 1, 0, v[0]));
    for i in 3..=h - 3 {
        let row = w * c;
        close(&b.data()[i * row..(i + 1) * row], &a.data()[(i - 1) * row..i * row], 1e-12);
    }
}

#[test]
fn constant_input_stays_constant_through_upsampling() {
    let mut m = small(3, 16);
    zero(&mut m, "dec1.shuffle.w");
    zero(&mut m, "dec1.shuffle.b");
    zero(&mut m, "dec1.gamma");
    let x = Tensor::from_fn(&[3, 5, 4], |i| [0.3, -0.7, 1.1, 0.0][i % 4]);
    let y = run(&m, &[x], |g, net, v| hybrid_upsample(g, net, 1, v[0], 0.4));
    assert_eq!(y.shape(), &[6, 10, 4]);
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - [0.3, -0.7, 1.1, 0.0][i % 4]).abs() < 1e-15);
    }
}

#[test]
fn single_cell_pixel_shuffle_by_hand() {
    let mut m = small(3, 17);
    zero(&mut m, "dec1.gamma");
    let x = Tensor::from_vec(&[1, 1, 4], vec![0.5, -1.0, 2.0, 0.25]);
    let y = run(&m, &[x.clone()], |g, net, v| hybrid_upsample(g, net, 1, v[0], 0.0));
    let w = p(&m, "dec1.shuffle.w");
    let b = p(&m, "dec1.shuffle.b");
    let cout = 16;
    for a in 0..2 {
        for bb in 0..2 {
            for ch in 0..4 {
                let o = ch * 4 + a * 2 + bb;
                let proj: f64 = b[o] + (0..4).map(|i| x.data()[i] * w[i * cout + o]).sum::<f64>();
                let want = x.data()[ch] + proj;
                assert!((y.data()[(a * 2 + bb) * 4 + ch] - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn hierarchical_term_is_periodic() {
    let mut m = small(3, 18);
    zero(&mut m, "dec1.shuffle.w");
    zero(&mut m, "dec1.shuffle.b");
    let x = Tensor::zeros(&[4, 4, 4]);
    let y = run(&m, &[x], |g, net, v| hybrid_upsample(g, net, 1, v[0], 0.75));
    let gt = gamma_tile(&m, 1, 0.75, 8, 8);
    close(y.data(), &gt.d, 1e-15);
    let c = 4;
    for i in 0..6 {
        for j in 0..6 {
            for ch in 0..c {
                assert_eq!(y.data()[(i * 8 + j) * c + ch], y.data()[((i + 2) * 8 + j + 2) * c + ch]);
            }
        }
    }
}

fn decode_cfg() -> RunConfig {
    let mut c = tiny_cfg();
    c.encoder.channels = 8;
    c
}

#[test]
fn decoder_shape_chain() {
    let cfg = decode_cfg();
    let spec = ModelSpec::new(&cfg, 2, 96, 192).unwrap();
    assert_eq!((spec.grid_h, spec.grid_w), (4, 8));
    assert_eq!(spec.ladder(), vec![(12, 24), (24, 48), (48, 96), (96, 192)]);
    let mut m = Model::<f64>::init(spec, 19);
    randomize(&mut m, 0.3, 20);
    let grid = uniform(&[4, 8, 8], -1.0, 1.0, &mut rng(21));
    let mut g = Graph::new();
    let bd = m.bind(&mut g, false, None);
    let gv = g.constant(grid);
    let out = decode(&mut g, Net::new(&m, &bd), gv, 0.5, true).unwrap();
    let shapes: Vec<Vec<usize>> = out.features.iter().map(|&f| g.shape(f).to_vec()).collect();
    assert_eq!(shapes.iter().map(|s| (s[0], s[1])).collect::<Vec<_>>(), m.spec.ladder());
    assert_eq!(g.shape(out.output), &[96, 192, 3]);
    assert_eq!(out.projections.len(), m.spec.levels - 1);
    for (i, &pr) in out.projections.iter().enumerate() {
        let f = g.shape(out.features[m.spec.block_of_level(i + 1)]).to_vec();
        assert_eq!(g.shape(pr), &[f[0], f[1], 3]);
    }
    assert!(g.value(out.output).all_finite());
}

#[test]
fn full_hd_ladder() {
    let spec = ModelSpec::new(&RunConfig::default(), 2, 1080, 1920).unwrap();
    assert_eq!((spec.grid_h, spec.grid_w), (45, 80));
    assert_eq!(spec.ladder(), vec![(135, 240), (270, 480), (540, 960), (1080, 1920)]);
}

#[test]
fn eval_output_is_clamped() {
    let cfg = decode_cfg();
    let mut m = Model::<f64>::init(ModelSpec::new(&cfg, 2, 48, 48).unwrap(), 22);
    randomize(&mut m, 5.0, 23);
    let grid = uniform(&[2, 2, 8], -10.0, 10.0, &mut rng(24));
    let mut g = Graph::new();
    let bd = m.bind(&mut g, false, None);
    let gv = g.constant(grid);
    let out = decode(&mut g, Net::new(&m, &bd), gv, 0.2, false).unwrap();
    assert!(out.projections.is_empty());
    let v = g.value(out.output);
    assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    assert!(v.data().iter().any(|&x| x == 0.0 || x == 1.0));
}

#[test]
fn grid_width_mismatch_is_a_config_error() {
    let m = Model::<f64>::init(ModelSpec::new(&decode_cfg(), 2, 48, 48).unwrap(), 0);
    let mut g = Graph::new();
    let bd = m.bind(&mut g, false, None);
    let gv = g.constant(Tensor::zeros(&[2, 2, 7]));
    assert!(matches!(decode(&mut g, Net::new(&m, &bd), gv, 0.0, false), Err(msnerv::Error::Config(_))));
}

#[test]
fn level_heads_are_not_decodable() {
    let spec = ModelSpec::new(&desk_cfg(), 8, 48, 96).unwrap();
    let layout = spec.layout();
    let heads: usize = layout
        .params
        .iter()
        .filter(|p| p.name.starts_with("level"))
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    assert!(heads > 0);
    assert!(layout.params.iter().filter(|p| p.name.starts_with("level")).all(|p| !p.decodable));
    assert_eq!(spec.param_count(false) - spec.param_count(true), heads);
    let m = Model::<f32>::init(spec, 0);
    let q = msnerv::codec::bitstream::quantize_model(&m, 8).unwrap();
    assert!(q.iter().all(|t| !t.name.starts_with("level")));
    assert_eq!(q.iter().map(|t| t.ints.len()).sum::<usize>(), m.param_count(true));
}

#[test]
fn upsampling_modes_change_only_their_branch() {
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(25));
    let mut outs = Vec::new();
    for up in [Upsample::Hybrid, Upsample::Bilinear, Upsample::PixelShuffle] {
        let mut cfg = tiny_cfg();
        cfg.decoder.upsample = up;
        let mut m = Model::<f64>::init(ModelSpec::new(&cfg, 4, 48, 48).unwrap(), 26);
        randomize(&mut m, 0.5, 27);
        zero(&mut m, "dec1.gamma");
        outs.push((run(&m, &[x.clone()], |g, net, v| hybrid_upsample(g, net, 1, v[0], 0.0)), m));
    }
    let bil = bilinear(&Img::from(&x), 2);
    close(outs[1].0.data(), &bil.d, 1e-15);
    let m = &outs[2].1;
    let proj = lin(&Img::from(&x), p(m, "dec1.shuffle.w"), p(m, "dec1.shuffle.b"), 16);
    close(outs[2].0.data(), &shuffle(&proj, 2).d, 1e-15);
}
