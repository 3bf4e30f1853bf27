//! Direct-loop reference implementations used by unit tests.

use crate::tensor::Tensor;

/// Zero-padded convolution by nested loops. `x[N,C,H,W]`, `w[O,C,k,k]`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, oi, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Bilinear value of a `[H,W]` plane, zero outside.
pub fn naive_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * (1.0 - fx) * px(y0, x0)
        + (1.0 - fy) * fx * px(y0, x0 + 1.0)
        + fy * (1.0 - fx) * px(y0 + 1.0, x0)
        + fy * fx * px(y0 + 1.0, x0 + 1.0)
}

/// Fixed 5-tap Gaussian (sigma 1) blur with clamped borders, then every
/// second pixel. One `[H,W]` plane.
pub fn naive_blur_down(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g: Vec<f64> = (-2..=2).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut out = vec![0.0; (h / 2) * (w / 2)];
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let mut acc = 0.0;
            for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    let iy = (2 * y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let ix = (2 * x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    acc += g[(dy + 2) as usize] * g[(dx + 2) as usize] / (s * s) * plane[iy * w + ix];
                }
            }
            out[y * (w / 2) + x] = acc;
        }
    }
    out
}

/// 2x bilinear upsampling, half-pixel centers, clamped borders.
pub fn naive_upsample(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            out[y * wo + x] = (1.0 - fy) * (1.0 - fx) * plane[y0 * w + x0]
                + (1.0 - fy) * fx * plane[y0 * w + x1]
                + fy * (1.0 - fx) * plane[y1 * w + x0]
                + fy * fx * plane[y1 * w + x1];
        }
    }
    out
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
