//! Model geometry, parameter layout and parameter storage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{FusionKind, RunConfig, Upsample, GRID_STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::video_io::auto_levels;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaseGridSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub factor: usize,
    pub cin: usize,
    pub cout: usize,
    pub depth: usize,
    /// Channels taken from the MLP branch when slicing (`C_m`).
    pub slice: usize,
    pub hidden: usize,
}

/// Everything about the network shape that follows from the config and the
/// clip dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub temporal_fusion: bool,
    /// Window length; 1 when temporal fusion is off.
    pub window: usize,
    pub gop_len: usize,
    pub gop_count: usize,
    pub base: Vec<BaseGridSpec>,
    pub blocks: Vec<BlockSpec>,
    pub levels: usize,
    pub upsample: Upsample,
    pub fusion: FusionKind,
    pub cross_depth: bool,
    pub hier_frames: usize,
    pub mrs: bool,
    pub init_range: f64,
}

/// `C_n = max(C_min, ceil(C_{n-1} / s_n) * g)`.
pub fn channel_schedule(c0: usize, factors: &[usize], c_min: usize, growth: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(factors.len());
    let mut prev = c0;
    for &s in factors {
        let c = ((prev.div_ceil(s)) as f64 * growth).ceil() as usize;
        let c = c.max(c_min);
        out.push(c);
        prev = c;
    }
    out
}

/// Spatial size of every block output for a `gh x gw` grid.
pub fn feature_ladder(gh: usize, gw: usize, factors: &[usize]) -> Vec<(usize, usize)> {
    let mut dims = (gh, gw);
    factors
        .iter()
        .map(|&s| {
            dims = (dims.0 * s, dims.1 * s);
            dims
        })
        .collect()
}

/// Grid cells of context a patch needs so that its decode matches the
/// full-frame decode. Walking back from the output, the head and every
/// fusion layer widen the margin `R` by their kernel radius; a half-pixel
/// bilinear stage of factor `s` maps an output margin `R` to
/// `ceil((2R - 1 + s) / 2s)` source pixels.
pub fn context_cells(blocks: &[BlockSpec], fusion: FusionKind) -> usize {
    let half = match fusion {
        FusionKind::MultiScale => 2,
        FusionKind::ConvMlp => 1,
    };
    let mut r = 1;
    for b in blocks.iter().rev() {
        r += half * b.depth;
        r = (2 * r - 1 + b.factor).div_ceil(2 * b.factor);
    }
    r
}

impl ModelSpec {
    pub fn new(cfg: &RunConfig, frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::config("video.frames must be positive"));
        }
        if height % GRID_STRIDE != 0 || width % GRID_STRIDE != 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "frame size {width}x{height} is not divisible by {GRID_STRIDE}"
            )));
        }
        let e = &cfg.encoder;
        let d = &cfg.decoder;
        let (gh, gw) = (height / GRID_STRIDE, width / GRID_STRIDE);
        let c0 = e.channels;
        let window = if e.temporal_fusion { e.window } else { 1 };
        let extent = frames + window - 1;

        let total_frac: f64 = e.base_grids.iter().map(|g| g[2]).sum();
        let mut base = Vec::with_capacity(e.base_grids.len());
        let mut used = 0;
        for (j, g) in e.base_grids.iter().enumerate() {
            let c = if j + 1 == e.base_grids.len() {
                c0.saturating_sub(used)
            } else {
                (c0 as f64 * g[2] / total_frac).round() as usize
            };
            if c == 0 {
                return Err(Error::config(format!(
                    "encoder.base_grids[{j}] receives no channels out of {c0}"
                )));
            }
            used += c;
            base.push(BaseGridSpec {
                t: ((g[0] * extent as f64).ceil() as usize).max(2),
                h: ((g[1] * gh as f64).ceil() as usize).max(1),
                w: ((g[1] * gw as f64).ceil() as usize).max(1),
                c,
            });
        }
        if used != c0 {
            return Err(Error::config(format!("encoder.base_grids split {used} != encoder.channels {c0}")));
        }

        let chans = channel_schedule(c0, &d.factors, d.channels_min, d.growth);
        let mut blocks = Vec::with_capacity(d.factors.len());
        let mut cin = c0;
        for (n, (&s, &cout)) in d.factors.iter().zip(&chans).enumerate() {
            let slice = ((cout as f64 * d.slice_ratio).round() as usize).clamp(1, cout - 1);
            blocks.push(BlockSpec {
                factor: s,
                cin,
                cout,
                depth: d.fusion_depth[n],
                slice,
                hidden: cout * d.mlp_ratio,
            });
            cin = cout;
        }

        let nb = blocks.len();
        let levels = if cfg.video.levels == 0 {
            auto_levels(height, width, nb)
        } else {
            cfg.video.levels
        };
        if levels == 0 || levels > nb {
            return Err(Error::config(format!("video.levels {levels} must lie in 1..={nb}")));
        }
        if let Some(s) = d.factors[nb + 1 - levels..].iter().find(|&&s| s != 2) {
            return Err(Error::config(format!(
                "pyramid levels above the first must come from x2 blocks, found factor {s}"
            )));
        }
        let div = 1 << (levels - 1);
        if height % div != 0 || width % div != 0 {
            return Err(Error::config(format!("{width}x{height} does not halve {} times", levels - 1)));
        }

        let gop_len = frames.div_ceil(e.gop_count.max(1));
        Ok(Self {
            frames,
            height,
            width,
            grid_h: gh,
            grid_w: gw,
            channels: c0,
            temporal_fusion: e.temporal_fusion,
            window,
            gop_len,
            gop_count: frames.div_ceil(gop_len),
            base,
            blocks,
            levels,
            upsample: d.upsample,
            fusion: d.fusion,
            cross_depth: d.cross_depth,
            hier_frames: d.hier_frames,
            mrs: cfg.loss.mrs,
            init_range: e.init_range,
        })
    }

    /// Temporal extent of the base grids (`T + l - 1`).
    pub fn extent(&self) -> usize {
        self.frames + self.window - 1
    }

    /// GoP index `ceil(t / G)` of frame `t` (1-based both).
    pub fn gop_index(&self, t: usize) -> usize {
        gop_index(t, self.gop_len)
    }

    /// Spatial size of each block output.
    pub fn ladder(&self) -> Vec<(usize, usize)> {
        feature_ladder(self.grid_h, self.grid_w, &self.blocks.iter().map(|b| b.factor).collect::<Vec<_>>())
    }

    /// Block (0-based) whose output is pyramid level `r`.
    pub fn block_of_level(&self, r: usize) -> usize {
        self.blocks.len() - self.levels + r - 1
    }

    pub fn context_cells(&self) -> usize {
        context_cells(&self.blocks, self.fusion)
    }

    /// Parameter layout in declaration order.
    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self, decodable_only: bool) -> usize {
        self.layout()
            .params
            .iter()
            .filter(|p| p.decodable || !decodable_only)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

pub fn gop_index(t: usize, gop_len: usize) -> usize {
    t.div_ceil(gop_len)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// One-hot rows at the window center.
    CenterOneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Needed to decode frames; false for the training-only level heads.
    pub decodable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderIdx {
    pub base: Vec<usize>,
    pub window: Option<usize>,
    pub gop: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIdx {
    pub ln1: Affine,
    pub dw3: Affine,
    pub dw5: Option<Affine>,
    pub ln2: Affine,
    pub mlp1: Affine,
    pub mlp2: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIdx {
    pub shuffle: Option<Affine>,
    pub gamma: usize,
    pub proj: Affine,
    pub layers: Vec<LayerIdx>,
    pub cross: Option<Affine>,
}

/// Parameter declarations plus typed indices into them.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    pub encoder: EncoderIdx,
    pub blocks: Vec<BlockIdx>,
    pub head: Affine,
    /// Heads of levels `1..N-1`; empty without multi-resolution supervision.
    pub level_heads: Vec<Affine>,
}

struct Builder {
    params: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decodable: bool) -> usize {
        self.params.push(ParamSpec { name, shape: shape.to_vec(), init, decodable });
        self.params.len() - 1
    }

    fn affine(&mut self, name: &str, wshape: &[usize], fan_in: usize, cout: usize, decodable: bool) -> Affine {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Affine {
            w: self.add(format!("{name}.w"), wshape, Init::Uniform(bound), decodable),
            b: self.add(format!("{name}.b"), &[cout], Init::Uniform(bound), decodable),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.g"), &[c], Init::Ones, true),
            b: self.add(format!("{name}.b"), &[c], Init::Zeros, true),
        }
    }
}

impl Layout {
    fn new(s: &ModelSpec) -> Self {
        let mut b = Builder { params: Vec::new() };
        let r = s.init_range;
        let base = s
            .base
            .iter()
            .enumerate()
            .map(|(j, g)| b.add(format!("enc.base{j}"), &[g.t, g.h, g.w, g.c], Init::Uniform(r), true))
            .collect();
        let (window, gop) = if s.temporal_fusion {
            (
                Some(b.add("enc.window".into(), &[s.frames, s.window], Init::CenterOneHot, true)),
                Some(b.add(
                    "enc.gop".into(),
                    &[s.gop_count, s.grid_h, s.grid_w, s.channels],
                    Init::Uniform(r),
                    true,
                )),
            )
        } else {
            (None, None)
        };
        let encoder = EncoderIdx { base, window, gop };

        let mut blocks = Vec::with_capacity(s.blocks.len());
        for (n, bs) in s.blocks.iter().enumerate() {
            let p = format!("dec{n}");
            let (ci, co, f) = (bs.cin, bs.cout, bs.factor);
            let shuffle = (s.upsample != Upsample::Bilinear).then(|| {
                let cout = ci * f * f;
                Affine {
                    w: b.add(format!("{p}.shuffle.w"), &[ci, cout], Init::Zeros, true),
                    b: b.add(format!("{p}.shuffle.b"), &[cout], Init::Zeros, true),
                }
            });
            let gamma = b.add(format!("{p}.gamma"), &[s.hier_frames, f, f, ci], Init::Uniform(r), true);
            let proj = b.affine(&format!("{p}.proj"), &[ci, co], ci, co, true);
            let layers = (0..bs.depth)
                .map(|k| {
                    let q = format!("{p}.fuse{k}");
                    let ln1 = b.norm(&format!("{q}.ln1"), co);
                    let dw3 = b.affine(&format!("{q}.dw3"), &[3, 3, co], 9, co, true);
                    let dw5 = (s.fusion == FusionKind::MultiScale)
                        .then(|| b.affine(&format!("{q}.dw5"), &[5, 5, co], 25, co, true));
                    let ln2 = b.norm(&format!("{q}.ln2"), co);
                    let mlp1 = b.affine(&format!("{q}.mlp1"), &[co, bs.hidden], co, bs.hidden, true);
                    let mo = match s.fusion {
                        FusionKind::MultiScale => bs.slice,
                        FusionKind::ConvMlp => co,
                    };
                    let mlp2 = b.affine(&format!("{q}.mlp2"), &[bs.hidden, mo], bs.hidden, mo, true);
                    LayerIdx { ln1, dw3, dw5, ln2, mlp1, mlp2 }
                })
                .collect();
            let cross = s
                .cross_depth
                .then(|| b.affine(&format!("{p}.cross"), &[bs.depth * co, co], bs.depth * co, co, true));
            blocks.push(BlockIdx { shuffle, gamma, proj, layers, cross });
        }
        let cl = s.blocks.last().unwrap().cout;
        let head = b.affine("head", &[3, 3, cl, 3], 9 * cl, 3, true);
        let level_heads = if s.mrs {
            (1..s.levels)
                .map(|r| {
                    let c = s.blocks[s.block_of_level(r)].cout;
                    b.affine(&format!("level{r}.head"), &[3, 3, c, 3], 9 * c, 3, false)
                })
                .collect()
        } else {
            Vec::new()
        };
        Layout { params: b.params, encoder, blocks, head, level_heads }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}

/// Learnable tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub params: Vec<Tensor<T>>,
    /// Frozen per-tensor quantization scales (decodable tensors only).
    pub quant: Option<QuantState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    pub bits: u32,
    /// Indexed like `params`; `None` for tensors that are never coded.
    pub scales: Vec<Option<f64>>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from a seeded generator in layout order.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .params
            .iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                let data: Vec<T> = match p.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Uniform(a) => (0..n).map(|_| T::lit(rng.gen_range(-a..=a))).collect(),
                    Init::CenterOneHot => {
                        let l = p.shape[1];
                        (0..n).map(|i| if i % l == l / 2 { T::one() } else { T::zero() }).collect()
                    }
                };
                Tensor::from_vec(&p.shape, data)
            })
            .collect();
        Self { spec, layout, params, quant: None }
    }

    pub fn param_count(&self, decodable_only: bool) -> usize {
        self.layout
            .params
            .iter()
            .zip(&self.params)
            .filter(|(p, _)| p.decodable || !decodable_only)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.index_of(name).map(move |i| &mut self.params[i])
    }

    /// Hex sha256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (p, t) in self.layout.params.iter().zip(&self.params) {
            h.update(p.name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            quant: self.quant.clone(),
        }
    }

    /// Put every parameter on the graph; with `quantized`, decodable tensors
    /// pass through fake quantization using the frozen scales, or scales taken
    /// from the current weights when none are frozen.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool, quantized: Option<u32>) -> Bound {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, (p, t)) in self.layout.params.iter().zip(&self.params).enumerate() {
            let v = g.leaf(t.clone(), requires_grad);
            leaves.push(v);
            vars.push(match quantized {
                Some(bits) if p.decodable => {
                    let scale = self.scale_for(i, bits);
                    g.fake_quant(v, scale, bits)
                }
                _ => v,
            });
        }
        Bound { leaves, vars }
    }

    /// Scale used to quantize tensor `i` at `bits`.
    pub fn scale_for(&self, i: usize, bits: u32) -> f64 {
        match &self.quant {
            Some(q) if q.bits == bits => {
                q.scales[i].unwrap_or_else(|| crate::codec::quant::symmetric_scale(self.params[i].data().iter().map(|v| v.f64()), bits))
            }
            _ => crate::codec::quant::symmetric_scale(self.params[i].data().iter().map(|v| v.f64()), bits),
        }
    }

    /// Freeze scales from the current weights.
    pub fn freeze_scales(&mut self, bits: u32) {
        let scales = self
            .layout
            .params
            .iter()
            .zip(&self.params)
            .map(|(p, t)| {
                p.decodable
                    .then(|| crate::codec::quant::symmetric_scale(t.data().iter().map(|v| v.f64()), bits))
            })
            .collect();
        self.quant = Some(QuantState { bits, scales });
    }

    /// Copy of the model with every decodable tensor projected onto its
    /// quantization lattice.
    pub fn fake_quantized(&self, bits: u32) -> Self {
        let qm = crate::codec::quant::qmax(bits) as f64;
        let mut out = self.clone();
        for (i, (p, t)) in self.layout.params.iter().zip(&self.params).enumerate() {
            if p.decodable {
                let s = self.scale_for(i, bits);
                out.params[i] = t.map(|v| T::lit(crate::codec::quant::fake_quant_value(v.f64(), s, qm)));
            }
        }
        out
    }
}

/// Graph nodes of the bound parameters, indexed like the layout.
pub struct Bound {
    /// The raw parameter leaves (gradients land here).
    pub leaves: Vec<Var>,
    /// What the network reads: the leaves, or their fake-quantized images.
    pub vars: Vec<Var>,
}

/// A bound model: shape, layout and graph nodes of its parameters.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub spec: &'a ModelSpec,
    pub layout: &'a Layout,
    pub bound: &'a Bound,
}

impl<'a> Net<'a> {
    pub fn new<T: Real>(model: &'a Model<T>, bound: &'a Bound) -> Self {
        Self { spec: &model.spec, layout: &model.layout, bound }
    }

    #[inline]
    pub fn p(&self, i: usize) -> Var {
        self.bound.vars[i]
    }
}
