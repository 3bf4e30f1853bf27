//! Bilinear sampling at fractional positions and deformable convolution.
//!
//! Neighbours that fall outside the map contribute zero, so sampling is a
//! total function of the position. Derivatives with respect to the position
//! are the one-sided (right) derivatives at integer coordinates.

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Real;

/// The four neighbours of a sample point with their interpolation weights
/// and the weights' derivatives along y and x. `idx` is `usize::MAX` for
/// neighbours outside the map.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    pub dwy: [T; 4],
    pub dwx: [T; 4],
}

const OUTSIDE: usize = usize::MAX;

pub fn bilinear_weights<T: Real>(h: usize, w: usize, y: T, x: T) -> BilinearTap<T> {
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    // Far-away points have no in-range neighbours; avoid casting huge floats.
    let far = |v: T, len: usize| v.to_f64() < -2.0 || v.to_f64() > len as f64 + 1.0;
    let (y0, x0) = if far(y0f, h) || far(x0f, w) {
        (-10isize, -10isize)
    } else {
        (y0f.to_f64() as isize, x0f.to_f64() as isize)
    };
    let at = |yy: isize, xx: isize| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            yy as usize * w + xx as usize
        } else {
            OUTSIDE
        }
    };
    let one = T::ONE;
    BilinearTap {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        w: [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx],
        dwy: [-(one - fx), -fx, one - fx, fx],
        dwx: [-(one - fy), one - fy, -fy, fy],
    }
}

/// Interpolated value of one plane at a tap.
#[inline]
pub fn bilinear_gather<T: Real>(plane: &[T], tap: &BilinearTap<T>) -> T {
    let mut acc = T::ZERO;
    for i in 0..4 {
        if tap.idx[i] != OUTSIDE {
            acc += tap.w[i] * plane[tap.idx[i]];
        }
    }
    acc
}

/// `(d/dy, d/dx)` of the interpolated value.
#[inline]
fn bilinear_dpos<T: Real>(plane: &[T], tap: &BilinearTap<T>) -> (T, T) {
    let (mut dy, mut dx) = (T::ZERO, T::ZERO);
    for i in 0..4 {
        if tap.idx[i] != OUTSIDE {
            let v = plane[tap.idx[i]];
            dy += tap.dwy[i] * v;
            dx += tap.dwx[i] * v;
        }
    }
    (dy, dx)
}

#[inline]
fn bilinear_scatter<T: Real>(plane: &mut [T], tap: &BilinearTap<T>, g: T) {
    for i in 0..4 {
        if tap.idx[i] != OUTSIDE {
            plane[tap.idx[i]] += tap.w[i] * g;
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Sample `map[C,H,W]` at `point = [y, x]`, giving `[C]`.
    /// Differentiable with respect to both the map and the point.
    pub fn bilinear_sample(&mut self, map: Var, point: Var) -> Result<Var> {
        self.expect_rank("bilinear_sample", map, 3)?;
        self.expect_shape("bilinear_sample", point, &[2])?;
        let s = self.shape(map).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (py, px) = (self.value(point)[0], self.value(point)[1]);
        let tap = bilinear_weights(h, w, py, px);
        self.note_branches(tap.idx.map(|i| i as u64));
        let vm = self.value(map);
        let value = (0..c).map(|ci| bilinear_gather(&vm[ci * h * w..(ci + 1) * h * w], &tap)).collect();
        self.push("bilinear_sample", vec![c], value, &[map, point], move |ctx, sink| {
            if let Some(gm) = sink.get(map) {
                for ci in 0..c {
                    bilinear_scatter(&mut gm[ci * h * w..(ci + 1) * h * w], &tap, ctx.grad[ci]);
                }
            }
            let vm = ctx.value(map);
            if let Some(gp) = sink.get(point) {
                for ci in 0..c {
                    let (dy, dx) = bilinear_dpos(&vm[ci * h * w..(ci + 1) * h * w], &tap);
                    gp[0] += ctx.grad[ci] * dy;
                    gp[1] += ctx.grad[ci] * dx;
                }
            }
        })
    }

    /// Deformable convolution with stride 1 and "same" padding:
    /// `out[o, p0] = b[o] + sum_c sum_k w[o,c,k] * x[c](p0 + p_k + dp_k(p0))`.
    ///
    /// `x[B,C,H,W]`, `offsets[B,2K,H,W]` ordered `(dy_1, dx_1, ..., dy_K,
    /// dx_K)`, `w[O,C,k,k]` with odd `k` and `K = k*k`.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, so, sw) = (self.shape(x).to_vec(), self.shape(offsets).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("deform_conv2d", format!("input {sx:?} and weight {sw:?} must be rank 4")));
        }
        let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if sw[1] != c || sw[3] != k || k % 2 == 0 {
            return Err(shape_err("deform_conv2d", format!("weight {sw:?} incompatible with input {sx:?}")));
        }
        let kk = k * k;
        if so != [bs, 2 * kk, h, wd] {
            return Err(shape_err(
                "deform_conv2d",
                format!("offsets {so:?} should be {:?}", [bs, 2 * kk, h, wd]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("deform_conv2d", format!("bias {:?} for {o} channels", self.shape(b))));
            }
        }
        let geom = DeformGeom { bs, c, h, w: wd, o, k };
        let hw = h * wd;
        let tracking = self.tracking_branches();
        let keep_taps = [x, offsets].iter().any(|&v| self.needs_grad(v));
        let mut branch_keys = Vec::new();
        let mut all_taps = Vec::new();
        let (vx, voff) = (self.value(x), self.value(offsets));
        // col[b][c*K + k][pos]
        let mut col = vec![T::ZERO; bs * c * kk * hw];
        for bi in 0..bs {
            for ki in 0..kk {
                let taps = geom.taps(voff, bi, ki);
                if tracking {
                    branch_keys.extend(taps.iter().flat_map(|t| t.idx.map(|i| i as u64)));
                }
                for ci in 0..c {
                    let plane = &vx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let dst = &mut col[((bi * c + ci) * kk + ki) * hw..][..hw];
                    for (d, tap) in dst.iter_mut().zip(&taps) {
                        *d = bilinear_gather(plane, tap);
                    }
                }
                if keep_taps {
                    all_taps.push(taps);
                }
            }
        }
        self.note_branches(branch_keys);
        let vw = self.value(w);
        let mut value = vec![T::ZERO; bs * o * hw];
        for bi in 0..bs {
            for oi in 0..o {
                let dst = &mut value[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
                let bv = b.map_or(T::ZERO, |b| self.value(b)[oi]);
                dst.iter_mut().for_each(|v| *v = bv);
                for ci in 0..c {
                    for ki in 0..kk {
                        let wv = vw[(oi * c + ci) * kk + ki];
                        let src = &col[((bi * c + ci) * kk + ki) * hw..][..hw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(offsets), Some(w), b].into_iter().flatten().collect();
        self.push("deform_conv2d", vec![bs, o, h, wd], value, &parents, move |ctx, sink| {
            geom.backward(ctx.grad, ctx.value(x), &all_taps, ctx.value(w), &col, x, offsets, w, b, sink);
        })
    }
}

#[derive(Clone, Copy)]
struct DeformGeom {
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl DeformGeom {
    /// Sampling taps of kernel position `ki` for every output position.
    fn taps<T: Real>(&self, offsets: &[T], bi: usize, ki: usize) -> Vec<BilinearTap<T>> {
        let (h, w, k) = (self.h, self.w, self.k);
        let kk = k * k;
        let half = (k / 2) as isize;
        let (ky, kx) = ((ki / k) as isize - half, (ki % k) as isize - half);
        let hw = h * w;
        let dy = &offsets[(bi * 2 * kk + 2 * ki) * hw..][..hw];
        let dx = &offsets[(bi * 2 * kk + 2 * ki + 1) * hw..][..hw];
        let mut taps = Vec::with_capacity(hw);
        for y in 0..h {
            for x in 0..w {
                let pos = y * w + x;
                let py = T::lit((y as isize + ky) as f64) + dy[pos];
                let px = T::lit((x as isize + kx) as f64) + dx[pos];
                taps.push(bilinear_weights(h, w, py, px));
            }
        }
        taps
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        grad: &[T],
        vx: &[T],
        all_taps: &[Vec<BilinearTap<T>>],
        vw: &[T],
        col: &[T],
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        sink: &mut super::GradSink<'_, T>,
    ) {
        let DeformGeom { bs, c, h, w: wd, o, k } = *self;
        let (kk, hw) = (k * k, h * wd);
        if let Some(b) = b {
            if let Some(gb) = sink.get(b) {
                for bi in 0..bs {
                    for oi in 0..o {
                        gb[oi] += grad[(bi * o + oi) * hw..(bi * o + oi + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if let Some(gw) = sink.get(w) {
            for oi in 0..o {
                for ci in 0..c {
                    for ki in 0..kk {
                        let mut acc = T::ZERO;
                        for bi in 0..bs {
                            let g = &grad[(bi * o + oi) * hw..][..hw];
                            let s = &col[((bi * c + ci) * kk + ki) * hw..][..hw];
                            for (&a, &bv) in g.iter().zip(s) {
                                acc += a * bv;
                            }
                        }
                        gw[(oi * c + ci) * kk + ki] += acc;
                    }
                }
            }
        }
        let want_x = sink.get(x).is_some();
        let want_off = sink.get(offsets).is_some();
        if !want_x && !want_off {
            return;
        }
        let mut dcol = vec![T::ZERO; hw];
        for bi in 0..bs {
            for ki in 0..kk {
                let taps = &all_taps[bi * kk + ki];
                let mut doff_y = vec![T::ZERO; hw];
                let mut doff_x = vec![T::ZERO; hw];
                for ci in 0..c {
                    dcol.iter_mut().for_each(|v| *v = T::ZERO);
                    for oi in 0..o {
                        let wv = vw[(oi * c + ci) * kk + ki];
                        let g = &grad[(bi * o + oi) * hw..][..hw];
                        for (d, &gv) in dcol.iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                    let plane = &vx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    if want_off {
                        for pos in 0..hw {
                            let (dy, dx) = bilinear_dpos(plane, &taps[pos]);
                            doff_y[pos] += dcol[pos] * dy;
                            doff_x[pos] += dcol[pos] * dx;
                        }
                    }
                    if let Some(gx) = sink.get(x) {
                        let gplane = &mut gx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for pos in 0..hw {
                            bilinear_scatter(gplane, &taps[pos], dcol[pos]);
                        }
                    }
                }
                if let Some(goff) = sink.get(offsets) {
                    let base = (bi * 2 * kk + 2 * ki) * hw;
                    goff[base..base + hw].iter_mut().zip(&doff_y).for_each(|(a, &v)| *a += v);
                    goff[base + hw..base + 2 * hw].iter_mut().zip(&doff_x).for_each(|(a, &v)| *a += v);
                }
            }
        }
    }
}
