//! Synthetic dark scenes with a moving, warping target under flickering
//! illumination.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Square,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frame_size: usize,
    pub n_frames: usize,
    pub target_shape: TargetShape,
    /// Side (square) or diameter (disc) of the unwarped target, pixels.
    pub target_size: f64,
    pub base_brightness: f64,
    /// Target brightness above the background before illumination changes.
    pub target_contrast: f64,
    /// Amplitude of the global gain/gamma modulation; 0 disables it.
    pub illum_jitter: f64,
    /// Largest per-frame change of rotation (rad), shear and log-scale.
    pub view_warp: f64,
    /// Largest per-frame translation, pixels.
    pub motion: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_size: 256,
            n_frames: 40,
            target_shape: TargetShape::Square,
            target_size: 28.0,
            base_brightness: 0.15,
            target_contrast: 0.3,
            illum_jitter: 0.25,
            view_warp: 0.04,
            motion: 4.0,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

/// Bounds on the accumulated warp.
const MAX_SHEAR: f64 = 0.35;
const MAX_LOG_SCALE: f64 = 0.3;
const TEXTURE_AMPLITUDE: f64 = 0.04;

impl SceneConfig {
    /// Scene with stronger flicker and warps than the default.
    pub fn harsh() -> Self {
        Self { illum_jitter: 0.5, view_warp: 0.08, ..Self::default() }
    }

    /// Largest half-extent the warped target can reach.
    fn max_half_extent(&self) -> f64 {
        let half = self.target_size / 2.0 * MAX_LOG_SCALE.exp();
        half * (1.0 + MAX_SHEAR) * std::f64::consts::SQRT_2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if !(self.base_brightness > 0.0 && self.base_brightness < 1.0) {
            return bad(format!("base_brightness {} must lie in (0, 1)", self.base_brightness));
        }
        if !(0.0..=1.0).contains(&self.target_contrast) {
            return bad(format!("target_contrast {} must lie in [0, 1]", self.target_contrast));
        }
        if !(0.0..1.0).contains(&self.illum_jitter) {
            return bad(format!("illum_jitter {} must lie in [0, 1)", self.illum_jitter));
        }
        if !(0.0..=0.3).contains(&self.view_warp) {
            return bad(format!("view_warp {} must lie in [0, 0.3]", self.view_warp));
        }
        if !(self.motion >= 0.0 && self.noise_sigma >= 0.0 && self.target_size >= 2.0) {
            return bad("motion and noise_sigma must be >= 0 and target_size >= 2".into());
        }
        let margin = self.max_half_extent() + 1.0;
        if 2.0 * margin + 2.0 * self.motion >= self.frame_size as f64 {
            return bad(format!(
                "target of size {} moving {} px/frame does not fit a {}-pixel frame",
                self.target_size, self.motion, self.frame_size
            ));
        }
        Ok(())
    }
}

/// Frames `[3, H, W]` in `[0, 1]` with one box per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor<f32>>,
    pub boxes: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Zero-mean background texture: sinusoids whose periods divide the frame.
fn background(cfg: &SceneConfig, rng: &mut Rng) -> Vec<f64> {
    let n = cfg.frame_size;
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fx: 2.0 * PI * (1 + rng.below(5)) as f64 / n as f64,
            fy: 2.0 * PI * (1 + rng.below(5)) as f64 / n as f64,
            phase: rng.uniform_range(0.0, 2.0 * PI),
            amp: TEXTURE_AMPLITUDE * rng.uniform_range(0.5, 1.0) / 2.0,
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let t: f64 = waves.iter().map(|w| w.amp * (w.fx * x as f64 + w.fy * y as f64 + w.phase).sin()).sum();
            out[y * n + x] = cfg.base_brightness + t;
        }
    }
    out
}

/// Per-channel multipliers averaging exactly 1.
fn tints(rng: &mut Rng, spread: f64) -> [f64; 3] {
    let mut t = [0.0; 3];
    t.iter_mut().for_each(|v| *v = 1.0 + rng.symmetric(spread));
    let m = t.iter().sum::<f64>() / 3.0;
    t.map(|v| v / m)
}

/// Affine state of the target: rotation, shear, log-scale per axis.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    angle: f64,
    shear: f64,
    log_sx: f64,
    log_sy: f64,
}

impl Pose {
    /// Linear part mapping unit target coordinates to pixels.
    fn matrix(&self, half: f64) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        let (sx, sy) = (half * self.log_sx.exp(), half * self.log_sy.exp());
        // R * [[sx, shear*sy], [0, sy]]
        [[c * sx, c * self.shear * sy - s * sy], [s * sx, s * self.shear * sy + c * sy]]
    }
}

fn bbox_of(cfg: &SceneConfig, pose: &Pose) -> BBox {
    let a = pose.matrix(cfg.target_size / 2.0);
    let (ex, ey) = match cfg.target_shape {
        TargetShape::Square => (a[0][0].abs() + a[0][1].abs(), a[1][0].abs() + a[1][1].abs()),
        TargetShape::Disc => (a[0][0].hypot(a[0][1]), a[1][0].hypot(a[1][1])),
    };
    BBox::new(pose.cx - ex, pose.cy - ey, 2.0 * ex, 2.0 * ey)
}

/// Target intensity pattern in unit coordinates `(u, v)`, `None` outside.
fn target_pattern(shape: TargetShape, u: f64, v: f64) -> Option<f64> {
    let inside = match shape {
        TargetShape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        TargetShape::Disc => u * u + v * v <= 1.0,
    };
    if !inside {
        return None;
    }
    // Bright cross on a dimmer body, with one brighter quadrant so the
    // target is not symmetric.
    let cross: f64 = if u.abs() < 0.25 || v.abs() < 0.25 { 1.0 } else { 0.55 };
    let quadrant = if u > 0.0 && v < 0.0 { 0.25 } else { 0.0 };
    Some((cross + quadrant).min(1.0))
}

const SUPERSAMPLE: usize = 3;

pub fn gen_sequence(cfg: &SceneConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let n = cfg.frame_size;
    let nf = n as f64;
    let bg = background(cfg, &mut rng);
    let bg_tint = tints(&mut rng, 0.15);
    let target_tint = tints(&mut rng, 0.4);
    let margin = cfg.max_half_extent() + 1.0;
    let mut pose = Pose {
        cx: rng.uniform_range(margin + cfg.motion, nf - margin - cfg.motion),
        cy: rng.uniform_range(margin + cfg.motion, nf - margin - cfg.motion),
        vx: rng.symmetric(cfg.motion),
        vy: rng.symmetric(cfg.motion),
        angle: rng.symmetric(cfg.view_warp * 5.0),
        shear: 0.0,
        log_sx: 0.0,
        log_sy: 0.0,
    };
    let mut light = (0.0f64, 0.0f64);
    let half = cfg.target_size / 2.0;
    let mut seq = Sequence { frames: Vec::with_capacity(cfg.n_frames), boxes: Vec::with_capacity(cfg.n_frames) };
    for t in 0..cfg.n_frames {
        if t > 0 {
            pose.vx = (pose.vx + rng.symmetric(cfg.motion / 2.0)).clamp(-cfg.motion, cfg.motion);
            pose.vy = (pose.vy + rng.symmetric(cfg.motion / 2.0)).clamp(-cfg.motion, cfg.motion);
            pose.cx += pose.vx;
            pose.cy += pose.vy;
            for (c, v) in [(&mut pose.cx, &mut pose.vx), (&mut pose.cy, &mut pose.vy)] {
                if *c < margin {
                    *c = 2.0 * margin - *c;
                    *v = v.abs();
                } else if *c > nf - margin {
                    *c = 2.0 * (nf - margin) - *c;
                    *v = -v.abs();
                }
            }
            let w = cfg.view_warp;
            pose.angle += rng.symmetric(w);
            pose.shear = (pose.shear + rng.symmetric(w)).clamp(-MAX_SHEAR, MAX_SHEAR);
            pose.log_sx = (pose.log_sx + rng.symmetric(w)).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
            pose.log_sy = (pose.log_sy + rng.symmetric(w)).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
            light.0 = (0.6 * light.0 + rng.symmetric(1.0)).clamp(-1.0, 1.0);
            light.1 = (0.6 * light.1 + rng.symmetric(1.0)).clamp(-1.0, 1.0);
        }
        let gain = (cfg.illum_jitter * light.0).exp();
        let gamma = (0.5 * cfg.illum_jitter * light.1).exp();
        let bbox = bbox_of(cfg, &pose);
        let a = pose.matrix(half);
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];

        let mut frame = Tensor::zeros(&[3, n, n]);
        let d = frame.data_mut();
        let (x0, x1) = ((bbox.x.floor().max(0.0)) as usize, (bbox.right().ceil() as usize).min(n));
        let (y0, y1) = ((bbox.y.floor().max(0.0)) as usize, (bbox.bottom().ceil() as usize).min(n));
        for y in 0..n {
            for x in 0..n {
                let base = bg[y * n + x];
                let mut cover = [0.0; 3];
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    // Average the pattern over sub-pixels for soft edges.
                    let mut acc = 0.0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - pose.cx;
                            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - pose.cy;
                            let u = inv[0][0] * px + inv[0][1] * py;
                            let v = inv[1][0] * px + inv[1][1] * py;
                            if let Some(p) = target_pattern(cfg.target_shape, u, v) {
                                acc += p;
                            }
                        }
                    }
                    let f = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    for c in 0..3 {
                        cover[c] = f * cfg.target_contrast * target_tint[c];
                    }
                }
                for c in 0..3 {
                    let v = base * bg_tint[c] + cover[c];
                    let lit = gain * v.max(0.0).powf(gamma);
                    let noisy = lit + cfg.noise_sigma * if cfg.noise_sigma > 0.0 { rng.normal() } else { 0.0 };
                    d[(c * n + y) * n + x] = noisy.clamp(0.0, 1.0) as f32;
                }
            }
        }
        seq.frames.push(frame);
        seq.boxes.push(bbox);
    }
    Ok(seq)
}
