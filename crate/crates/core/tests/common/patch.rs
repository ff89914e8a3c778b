//! Windowed decodes compared with crops of the full-frame decode.

use super::*;
use msnerv::decoder::{decode, decode_window};
use msnerv::graph::Graph;
use msnerv::model::{Model, ModelSpec, Net};
use msnerv::video_io::PatchWindow;
use msnerv::{Real, Tensor};

pub const TOL: f64 = 1e-5;

/// Largest gap between the windowed output and the full-frame crop, over
/// the output and every block output.
pub fn gap<T: Real>(m: &Model<T>, grid: &Tensor<T>, win: PatchWindow, context: usize, train: bool) -> (f64, bool) {
    let mut g = Graph::<T>::new();
    let b = m.bind(&mut g, false, None);
    let net = Net::new(m, &b);
    let gv = g.constant(grid.clone());
    let full = decode(&mut g, net, gv, 0.4, train).unwrap();
    let part = decode_window(&mut g, net, gv, 0.4, train, win, context).unwrap();
    let mut worst = 0.0f64;
    let mut cmp = |a: &Tensor<T>, b: &Tensor<T>, scale: usize| {
        let c = a.shape()[2];
        let sc = 24 / scale;
        let crop = a.crop(win.row0 / sc, win.col0 / sc, win.rows / sc, win.cols / sc);
        assert_eq!(crop.shape(), b.shape());
        assert_eq!(c, b.shape()[2]);
        for (x, y) in crop.data().iter().zip(b.data()) {
            worst = worst.max((x.f64() - y.f64()).abs());
        }
    };
    cmp(g.value(full.output), g.value(part.out.output), 24);
    let mut scale = 1;
    for (n, (&f, &p)) in full.features.iter().zip(&part.out.features).enumerate() {
        scale *= m.spec.blocks[n].factor;
        cmp(g.value(f), g.value(p), scale);
    }
    for (i, (&f, &p)) in full.projections.iter().zip(&part.out.projections).enumerate() {
        let blk = m.spec.block_of_level(i + 1);
        let s: usize = m.spec.blocks[..=blk].iter().map(|b| b.factor).product();
        cmp(g.value(f), g.value(p), s);
    }
    (worst, part.exact)
}

pub fn wide_model() -> (Model<f64>, Tensor<f64>) {
    let cfg = tiny_cfg();
    // A 16x16 grid leaves room for the context margin on every side.
    let spec = ModelSpec::new(&cfg, 2, 384, 384).unwrap();
    let mut m = Model::<f64>::init(spec, 1);
    randomize(&mut m, 0.3, 2);
    let grid = uniform(&[16, 16, 8], -1.0, 1.0, &mut rng(3));
    (m, grid)
}

pub fn windows() -> Vec<PatchWindow> {
    vec![
        PatchWindow { row0: 7 * 24, col0: 7 * 24, rows: 48, cols: 48 },
        PatchWindow { row0: 0, col0: 0, rows: 48, cols: 72 },
        PatchWindow { row0: 14 * 24, col0: 13 * 24, rows: 48, cols: 72 },
        PatchWindow { row0: 0, col0: 6 * 24, rows: 24, cols: 24 },
    ]
}
