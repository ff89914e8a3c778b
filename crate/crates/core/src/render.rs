//! Inference: decode frames from a fitted model.

use crate::decoder::{decode, decode_window, time_pos};
use crate::encoder::encode;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Model, Net};
use crate::tensor::Tensor;
use crate::video_io::{PatchWindow, VideoTensor};

/// Frames with more pixels than this are decoded in tiles to bound memory.
const TILE_ABOVE: usize = 512 * 512;
/// Tile edge in grid cells.
const TILE_CELLS: usize = 20;

/// Decode one frame from a grid built by `grid` at temporal position `tpos`.
pub fn render_with(
    model: &Model<f32>,
    tpos: f64,
    grid: impl Fn(&mut Graph<f32>, Net) -> Result<Var>,
) -> Result<Tensor<f32>> {
    let s = &model.spec;
    if s.height * s.width <= TILE_ABOVE {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false, None);
        let net = Net::new(model, &bound);
        let x = grid(&mut g, net)?;
        let out = decode(&mut g, net, x, tpos, false)?;
        return Ok(g.value(out.output).clone());
    }
    let st = crate::config::GRID_STRIDE;
    let mut frame = Tensor::zeros(&[s.height, s.width, 3]);
    let ctx = s.context_cells();
    for r0 in (0..s.grid_h).step_by(TILE_CELLS) {
        for c0 in (0..s.grid_w).step_by(TILE_CELLS) {
            let rows = TILE_CELLS.min(s.grid_h - r0);
            let cols = TILE_CELLS.min(s.grid_w - c0);
            let win = PatchWindow { row0: r0 * st, col0: c0 * st, rows: rows * st, cols: cols * st };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false, None);
            let net = Net::new(model, &bound);
            let x = grid(&mut g, net)?;
            let p = decode_window(&mut g, net, x, tpos, false, win, ctx)?;
            let tile = g.value(p.out.output);
            let w = s.width;
            for i in 0..win.rows {
                let dst = ((win.row0 + i) * w + win.col0) * 3;
                frame.data_mut()[dst..dst + win.cols * 3]
                    .copy_from_slice(&tile.data()[i * win.cols * 3..(i + 1) * win.cols * 3]);
            }
        }
    }
    Ok(frame)
}

/// Frame `t` (1-based), clamped to `[0, 1]`.
pub fn render_frame(model: &Model<f32>, t: usize) -> Result<Tensor<f32>> {
    render_with(model, time_pos(t as f64, model.spec.frames), |g, net| encode(g, net, t))
}

/// Every frame of the clip.
pub fn reconstruct(model: &Model<f32>) -> Result<VideoTensor> {
    let frames = (1..=model.spec.frames).map(|t| render_frame(model, t)).collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames)
}

/// Reconstruction with every decodable tensor on its quantization lattice.
pub fn reconstruct_quantized(model: &Model<f32>, bits: u32) -> Result<VideoTensor> {
    reconstruct(&model.fake_quantized(bits))
}
