use crate::bbox::BBox;
use crate::graph::{bilinear_gather, bilinear_weights};
use crate::tensor::Tensor;

/// Square frame region resampled to `size x size` pixels.
///
/// Frame point `p` maps to crop point `(p - origin) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub left: f64,
    pub top: f64,
    pub scale: f64,
    pub size: usize,
}

impl CropWindow {
    pub fn around(cx: f64, cy: f64, side: f64, size: usize) -> Self {
        Self { left: cx - side / 2.0, top: cy - side / 2.0, scale: size as f64 / side, size }
    }

    /// Region of side `factor * sqrt(w * h)` centered on the box.
    pub fn for_box(b: &BBox, factor: f64, size: usize) -> Self {
        let (cx, cy) = b.center();
        Self::around(cx, cy, factor * (b.w * b.h).sqrt(), size)
    }

    pub fn side(&self) -> f64 {
        self.size as f64 / self.scale
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new((b.x - self.left) * self.scale, (b.y - self.top) * self.scale, b.w * self.scale, b.h * self.scale)
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(b.x / self.scale + self.left, b.y / self.scale + self.top, b.w / self.scale, b.h / self.scale)
    }

    /// Bilinear resample of `frame[C, H, W]`; outside the frame reads zero.
    /// Pixel `i` of the crop samples the frame at its center, `i + 0.5`.
    pub fn sample(&self, frame: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
        let n = self.size;
        let inv = 1.0 / self.scale;
        let ys: Vec<f64> = (0..n).map(|i| self.top + (i as f64 + 0.5) * inv - 0.5).collect();
        let xs: Vec<f64> = (0..n).map(|j| self.left + (j as f64 + 0.5) * inv - 0.5).collect();
        let mut out = Tensor::zeros(&[c, n, n]);
        let src = frame.data();
        let dst = out.data_mut();
        for (i, &y) in ys.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                let tap = bilinear_weights(h, w, y as f32, x as f32);
                for ch in 0..c {
                    dst[(ch * n + i) * n + j] = bilinear_gather(&src[ch * h * w..(ch + 1) * h * w], &tap);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_round_trip() {
        let mut rng = crate::rng::Rng::new(1);
        for _ in 0..100 {
            let gt = BBox::new(rng.uniform_range(10.0, 200.0), rng.uniform_range(10.0, 200.0), rng.uniform_range(8.0, 40.0), rng.uniform_range(8.0, 40.0));
            let win = CropWindow::for_box(&gt, 4.0, 128);
            let back = win.to_frame(&win.to_crop(&gt));
            for (a, e) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
                assert!((a - e).abs() < 0.5);
                assert!((a - e).abs() < 1e-9);
            }
            let c = win.to_crop(&gt).center();
            assert!((c.0 - 64.0).abs() < 1e-9 && (c.1 - 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_scale_crop_copies_pixels() {
        let frame = Tensor::from_fn(&[1, 8, 8], |i| i as f32);
        let win = CropWindow { left: 2.0, top: 3.0, scale: 1.0, size: 4 };
        let crop = win.sample(&frame);
        assert_eq!(crop.at(&[0, 0, 0]), frame.at(&[0, 3, 2]));
        assert_eq!(crop.at(&[0, 3, 3]), frame.at(&[0, 6, 5]));
    }

    #[test]
    fn outside_reads_zero() {
        let frame = Tensor::full(&[3, 4, 4], 1.0f32);
        let win = CropWindow { left: -10.0, top: -10.0, scale: 1.0, size: 4 };
        assert!(win.sample(&frame).data().iter().all(|&v| v == 0.0));
    }
}
