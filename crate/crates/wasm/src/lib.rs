//! Browser demo: render synthetic low-light frames, show the illumination
//! prompter's pyramid and play with deformable sampling offsets.
//!
//! The `try_*` methods are plain Rust so they can be tested natively; the
//! exported methods only convert errors for JavaScript.

use dptrack::data::{gen_sequence, SceneConfig, Sequence};
use dptrack::params::{Builder, ParamGroup};
use dptrack::prompters::IllumPrompter;
use dptrack::{Graph, Mode, ParamStore, Rng, Tensor};
use wasm_bindgen::prelude::*;

/// Deepest pyramid the demo offers; frames are 256 px so 2^4 divides them.
pub const MAX_LEVELS: usize = 4;
const PATCH: usize = 16;

#[wasm_bindgen]
pub struct Demo {
    seq: Sequence,
    size: usize,
    illum: IllumPrompter,
    store: ParamStore<f32>,
}

/// `[3, H, W]` in `[0, 1]` to row-major RGBA bytes.
pub fn to_rgba(image: &[f32], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut out = Vec::with_capacity(4 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((image[c * plane + i].clamp(0.0, 1.0) * 255.0 + 0.5) as u8);
        }
        out.push(255);
    }
    out
}

/// Map `values` to `[0, 1]` by their own min and max.
fn stretch(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

impl Demo {
    pub fn try_new(seed: u64, illum_jitter: f64, view_warp: f64, n_frames: usize) -> dptrack::Result<Demo> {
        let cfg = SceneConfig { seed, illum_jitter, view_warp, n_frames, ..SceneConfig::default() };
        let seq = gen_sequence(&cfg)?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let illum = IllumPrompter::new(&mut Builder::new(&mut store, &mut rng, ParamGroup::Prompt), 3, MAX_LEVELS, 1, PATCH)?;
        Ok(Demo { seq, size: cfg.frame_size, illum, store })
    }

    fn frame(&self, t: usize) -> dptrack::Result<&Tensor<f32>> {
        self.seq
            .frames
            .get(t)
            .ok_or_else(|| dptrack::Error::InvalidArgument(format!("frame {t} of {}", self.seq.frames.len())))
    }

    /// Gaussian level `level` (`0..=MAX_LEVELS`) or Laplacian level
    /// (`0..MAX_LEVELS`, min/max stretched) as RGBA at side `size >> level`.
    pub fn try_pyramid_level(&self, t: usize, level: usize, laplacian: bool) -> dptrack::Result<Vec<u8>> {
        let limit = if laplacian { MAX_LEVELS } else { MAX_LEVELS + 1 };
        if level >= limit {
            return Err(dptrack::Error::InvalidArgument(format!("level {level} must be below {limit}")));
        }
        let n = self.size;
        let x = self.frame(t)?.clone().reshape(&[1, 3, n, n])?;
        let mut g = Graph::with_params(&self.store, Mode::Eval);
        let xv = g.constant(&x);
        let levels = self.illum.pyramid(&mut g, xv)?;
        let side = n >> level;
        Ok(if laplacian {
            to_rgba(&stretch(g.value(levels.laplacians[level])), side, side)
        } else {
            to_rgba(g.value(levels.gaussians[level]), side, side)
        })
    }

    /// 3x3 mean filter applied by deformable convolution. Tap `k` at grid
    /// position `p_k` is moved by `(dilation - 1) * p_k + (shift_y, shift_x)`.
    pub fn try_deform(&self, t: usize, dilation: f32, shift_x: f32, shift_y: f32) -> dptrack::Result<Vec<u8>> {
        let n = self.size;
        let x = self.frame(t)?.clone().reshape(&[1, 3, n, n])?;
        let mut offsets = vec![0.0f32; 18 * n * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let k = ky * 3 + kx;
                let dy = (dilation - 1.0) * (ky as f32 - 1.0) + shift_y;
                let dx = (dilation - 1.0) * (kx as f32 - 1.0) + shift_x;
                offsets[2 * k * n * n..(2 * k + 1) * n * n].fill(dy);
                offsets[(2 * k + 1) * n * n..(2 * k + 2) * n * n].fill(dx);
            }
        }
        let mut w = vec![0.0f32; 3 * 3 * 9];
        for c in 0..3 {
            w[(c * 3 + c) * 9..(c * 3 + c + 1) * 9].fill(1.0 / 9.0);
        }
        let mut g = Graph::<f32>::new();
        let xv = g.constant(&x);
        let ov = g.constant(&Tensor::new(&[1, 18, n, n], offsets)?);
        let wv = g.constant(&Tensor::new(&[3, 3, 3, 3], w)?);
        let y = g.deform_conv2d(xv, ov, wv, None)?;
        Ok(to_rgba(g.value(y), n, n))
    }
}

fn js(e: dptrack::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, illum_jitter: f64, view_warp: f64, n_frames: usize) -> Result<Demo, JsError> {
        Demo::try_new(seed as u64, illum_jitter, view_warp, n_frames).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn frames(&self) -> usize {
        self.seq.frames.len()
    }

    pub fn levels(&self) -> usize {
        MAX_LEVELS
    }

    /// Frame `t` as RGBA bytes.
    pub fn frame_rgba(&self, t: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(self.frame(t).map_err(js)?.data(), self.size, self.size))
    }

    /// Ground-truth `[x, y, w, h]` of frame `t`.
    pub fn gt_box(&self, t: usize) -> Vec<f64> {
        self.seq.boxes.get(t).map_or_else(Vec::new, |b| vec![b.x, b.y, b.w, b.h])
    }

    pub fn pyramid_level(&self, t: usize, level: usize, laplacian: bool) -> Result<Vec<u8>, JsError> {
        self.try_pyramid_level(t, level, laplacian).map_err(js)
    }

    pub fn deform(&self, t: usize, dilation: f32, shift_x: f32, shift_y: f32) -> Result<Vec<u8>, JsError> {
        self.try_deform(t, dilation, shift_x, shift_y).map_err(js)
    }
}
