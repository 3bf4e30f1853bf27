//! 2-D convolution, its adjoint and replicate padding, NCHW layout.
//!
//! Kernels unfold the input (im2col) and reuse the dense matmul loops. Every
//! output element is accumulated in a fixed order, so results do not depend
//! on how samples are spread across workers.

use super::linalg::{mm_nn, mm_nt, mm_tn};
use super::{for_each_chunk, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, groups: 1 }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Geometry of a forward convolution `x[n,c,h,w] -> y[n,o,ho,wo]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
}

/// Output indices `[lo, hi)` whose input tap `idx * s + kk - p` is inside
/// `[0, in_len)`.
#[inline]
fn valid_range(kk: usize, s: usize, p: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let off = kk as isize - p as isize;
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

/// Unfold one group of one sample into `cols[cg*k*k, ho*wo]`, zero where
/// the tap falls into padding.
fn im2col<T: Real>(g: &ConvGeom, xs: &[T], grp: usize, cols: &mut [T]) {
    let (cg, k, s, p) = (g.cg(), g.k, g.s, g.p);
    let plane = g.ho * g.wo;
    for cl in 0..cg {
        let xin = &xs[(grp * cg + cl) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, g.w, g.wo);
                let dst = &mut cols[((cl * k + ky) * k + kx) * plane..][..plane];
                dst.fill(T::ZERO);
                for oy in oy_lo..oy_hi {
                    let row = &xin[(oy * s + ky - p) * g.w..][..g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        let ix0 = ox_lo + kx - p;
                        drow[ox_lo..ox_hi].copy_from_slice(&row[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into the sample.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grp: usize, xs: &mut [T]) {
    let (cg, k, s, p) = (g.cg(), g.k, g.s, g.p);
    let plane = g.ho * g.wo;
    for cl in 0..cg {
        let xin = &mut xs[(grp * cg + cl) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, g.w, g.wo);
                let src = &cols[((cl * k + ky) * k + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let row = &mut xin[(oy * s + ky - p) * g.w..][..g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        let ix0 = ox_lo + kx - p;
                        for (d, &v) in row[ix0..].iter_mut().zip(&srow[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            row[ox * s + kx - p] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (cg, og, k) = (g.cg(), g.og(), g.k);
    let (plane, ckk) = (g.ho * g.wo, cg * k * k);
    for_each_chunk(out, g.o * plane, |ni, dst| {
        let xs = &x[ni * g.c * g.h * g.w..][..g.c * g.h * g.w];
        let mut cols = vec![T::ZERO; ckk * plane];
        for (oi, plane_out) in dst.chunks_mut(plane).enumerate() {
            plane_out.fill(bias.map_or(T::ZERO, |b| b[oi]));
        }
        for grp in 0..g.groups {
            im2col(g, xs, grp, &mut cols);
            let w = &wt[grp * og * ckk..][..og * ckk];
            mm_nn(og, ckk, plane, w, &cols, &mut dst[grp * og * plane..][..og * plane]);
        }
    });
}

/// `gx += J^T gout`, i.e. the input gradient of [`conv_forward`].
pub(crate) fn conv_backward_input<T: Real>(g: &ConvGeom, gout: &[T], wt: &[T], gx: &mut [T]) {
    let (cg, og, k) = (g.cg(), g.og(), g.k);
    let (plane, ckk) = (g.ho * g.wo, cg * k * k);
    for_each_chunk(gx, g.c * g.h * g.w, |ni, dst| {
        let mut cols = vec![T::ZERO; ckk * plane];
        for grp in 0..g.groups {
            cols.fill(T::ZERO);
            let w = &wt[grp * og * ckk..][..og * ckk];
            let go = &gout[(ni * g.o + grp * og) * plane..][..og * plane];
            mm_tn(og, ckk, plane, w, go, &mut cols);
            col2im(g, &cols, grp, dst);
        }
    });
}

/// `gw += dL/dW` for [`conv_forward`]. Samples are folded in order.
pub(crate) fn conv_backward_weight<T: Real>(g: &ConvGeom, x: &[T], gout: &[T], gw: &mut [T]) {
    let (cg, og, k) = (g.cg(), g.og(), g.k);
    let (plane, ckk) = (g.ho * g.wo, cg * k * k);
    let mut cols = vec![T::ZERO; ckk * plane];
    for ni in 0..g.n {
        let xs = &x[ni * g.c * g.h * g.w..][..g.c * g.h * g.w];
        for grp in 0..g.groups {
            im2col(g, xs, grp, &mut cols);
            let go = &gout[(ni * g.o + grp * og) * plane..][..og * plane];
            mm_nt(og, plane, ckk, go, &cols, &mut gw[grp * og * ckk..][..og * ckk]);
        }
    }
}

fn bias_grad<T: Real>(n: usize, o: usize, plane: usize, gout: &[T], gb: &mut [T]) {
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = T::ZERO;
            for &v in &gout[(ni * o + oi) * plane..(ni * o + oi + 1) * plane] {
                acc += v;
            }
            gb[oi] += acc;
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// `x[N,C,H,W] * w[O,C/groups,k,k] (+ b[O])` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, b, opts)?;
        let mut value = vec![T::ZERO; geom.n * geom.o * geom.ho * geom.wo];
        conv_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)), &mut value);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", vec![geom.n, geom.o, geom.ho, geom.wo], value, &parents, move |c, s| {
            if let Some(gx) = s.get(x) {
                conv_backward_input(&geom, c.grad, c.value(w), gx);
            }
            if let Some(gw) = s.get(w) {
                conv_backward_weight(&geom, c.value(x), c.grad, gw);
            }
            if let Some(b) = b {
                if let Some(gb) = s.get(b) {
                    bias_grad(geom.n, geom.o, geom.ho * geom.wo, c.grad, gb);
                }
            }
        })
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(op, format!("input {sx:?} and weight {sw:?} must both be rank 4")));
        }
        let [n, c, h, wd] = [sx[0], sx[1], sx[2], sx[3]];
        let [o, cg, k, k2] = [sw[0], sw[1], sw[2], sw[3]];
        let ConvOpts { stride, padding, groups } = opts;
        if stride == 0 || groups == 0 {
            return Err(shape_err(op, "stride and groups must be >= 1"));
        }
        if k != k2 {
            return Err(shape_err(op, format!("kernel must be square, got {k}x{k2}")));
        }
        if c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(shape_err(
                op,
                format!("input channels {c} / weight in-channels {cg} / out channels {o} inconsistent with groups={groups}"),
            ));
        }
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(shape_err(
                op,
                format!("kernel {k} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(op, format!("bias {:?} for {o} output channels", self.shape(b))));
            }
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            s: stride,
            p: padding,
            groups,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        })
    }

    /// Transposed convolution, the exact adjoint of [`Graph::conv2d`].
    /// `x[N,Cin,H,W]`, `w[Cin,Cout/groups,k,k]`, output side
    /// `(H-1)*stride - 2*padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv_transpose2d", format!("input {sx:?} and weight {sw:?} must be rank 4")));
        }
        let ConvOpts { stride, padding, groups } = opts;
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout_g, k) = (sw[1], sw[2]);
        if stride == 0 || groups == 0 || sw[0] != cin || sw[3] != k || cin % groups != 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("weight {sw:?} incompatible with input {sx:?} (groups={groups})"),
            ));
        }
        let cout = cout_g * groups;
        let ho = ((h - 1) * stride + k) as isize - 2 * padding as isize;
        let wo = ((wd - 1) * stride + k) as isize - 2 * padding as isize;
        if ho <= 0 || wo <= 0 {
            return Err(shape_err("conv_transpose2d", format!("empty output for input {sx:?}")));
        }
        let (ho, wo) = (ho as usize, wo as usize);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d", format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        // The forward convolution this op is the adjoint of.
        let geom = ConvGeom { n, c: cout, h: ho, w: wo, o: cin, k, s: stride, p: padding, groups, ho: h, wo: wd };
        if (ho + 2 * padding - k) / stride + 1 != h || (wo + 2 * padding - k) / stride + 1 != wd {
            return Err(shape_err("conv_transpose2d", "padding too large for kernel"));
        }
        let mut value = vec![T::ZERO; n * cout * ho * wo];
        conv_backward_input(&geom, self.value(x), self.value(w), &mut value);
        if let Some(b) = b {
            let vb = self.value(b);
            for (i, plane) in value.chunks_mut(ho * wo).enumerate() {
                let bv = vb[i % cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv_transpose2d", vec![n, cout, ho, wo], value, &parents, move |c, s| {
            if let Some(gx) = s.get(x) {
                let mut tmp = vec![T::ZERO; gx.len()];
                conv_forward(&geom, c.grad, c.value(w), None, &mut tmp);
                gx.iter_mut().zip(&tmp).for_each(|(d, &v)| *d += v);
            }
            if let Some(gw) = s.get(w) {
                conv_backward_weight(&geom, c.grad, c.value(x), gw);
            }
            if let Some(b) = b {
                if let Some(gb) = s.get(b) {
                    bias_grad(n, cout, ho * wo, c.grad, gb);
                }
            }
        })
    }

    /// Pad `x[N,C,H,W]` by `p` on every side, repeating edge pixels.
    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Result<Var> {
        self.expect_rank("pad_replicate", x, 4)?;
        let s = self.shape(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let src = |o: usize, len: usize| (o as isize - p as isize).clamp(0, len as isize - 1) as usize;
        let ys: Vec<usize> = (0..hp).map(|y| src(y, h)).collect();
        let xs: Vec<usize> = (0..wp).map(|x| src(x, w)).collect();
        let vx = self.value(x);
        let mut value = Vec::with_capacity(planes * hp * wp);
        for pl in 0..planes {
            let base = &vx[pl * h * w..(pl + 1) * h * w];
            for &iy in &ys {
                value.extend(xs.iter().map(|&ix| base[iy * w + ix]));
            }
        }
        self.push("pad_replicate", vec![s[0], s[1], hp, wp], value, &[x], move |c, sink| {
            if let Some(gx) = sink.get(x) {
                for pl in 0..planes {
                    let gsrc = &c.grad[pl * hp * wp..(pl + 1) * hp * wp];
                    let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
                    for (oy, &iy) in ys.iter().enumerate() {
                        for (ox, &ix) in xs.iter().enumerate() {
                            dst[iy * w + ix] += gsrc[oy * wp + ox];
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn valid_range_cases() {
        // k=3, p=1, s=1, len 5: tap 0 skips the first output
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        // stride 2
        assert_eq!(valid_range(0, 2, 2, 8, 4), (1, 4));
        assert_eq!(valid_range(4, 2, 2, 8, 4), (0, 3));
    }

    #[test]
    fn ones_kernel_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, ConvOpts::new(1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let t = Tensor::<f64>::randn(&[2, 1, 5, 6], 1.0, &mut rng);
        let mut kern = Tensor::zeros(&[1, 1, 3, 3]);
        kern.set(&[0, 0, 1, 1], 1.0);
        let mut g = Graph::new();
        let x = g.constant(&t);
        let w = g.constant(&kern);
        let y = g.conv2d(x, w, None, ConvOpts::new(1, 1)).unwrap();
        assert_eq!(g.value(y), t.data());
    }

    #[test]
    fn transpose_stamps_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(&[1, 1, 1, 1], 2.5));
        let w = g.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv_transpose2d(x, w, None, ConvOpts::new(2, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[2.5; 4]);
    }

    #[test]
    fn transpose_of_zero_is_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(&Tensor::full(&[2, 3, 4, 4], 0.3));
        let b = g.constant(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.conv_transpose2d(x, w, Some(b), ConvOpts::new(2, 1)).unwrap();
        let out = g.tensor(y);
        assert_eq!(out.shape(), &[1, 3, 6, 6]);
        for (i, plane) in out.data().chunks(36).enumerate() {
            assert!(plane.iter().all(|&v| v == [1.0, -2.0, 0.5][i]));
        }
    }

    #[test]
    fn shape_errors_name_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(&Tensor::zeros(&[2, 2, 3, 3]));
        let msg = g.conv2d(x, w, None, ConvOpts::new(1, 1)).unwrap_err().to_string();
        assert!(msg.contains("input channels 3"), "{msg}");
        let big = g.constant(&Tensor::zeros(&[1, 3, 7, 7]));
        let w3 = g.constant(&Tensor::zeros(&[1, 3, 7, 7]));
        assert!(g.conv2d(x, w3, None, ConvOpts::new(1, 1)).is_err());
        assert!(g.conv2d(big, w3, None, ConvOpts::new(1, 0)).is_ok());
    }

    #[test]
    fn replicate_pad_repeats_edges() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pad_replicate(x, 1).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y), &expected);
    }
}
