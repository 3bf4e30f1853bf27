use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{numel, Real};

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn mm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

const LANES: usize = 8;

/// Dot product over eight interleaved partial sums, which the compiler can
/// keep in vector registers. The summation order is fixed.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn mm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn mm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// `a[..., m, k] x b[k, n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut value = vec![T::ZERO; m * n];
        mm_nn(m, k, n, self.value(a), self.value(b), &mut value);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, value, &[a, b], move |c, s| {
            if let Some(ga) = s.get(a) {
                mm_nt(m, n, k, c.grad, c.value(b), ga);
            }
            if let Some(gb) = s.get(b) {
                mm_tn(m, k, n, c.value(a), c.grad, gb);
            }
        })
    }

    /// Batched `a[B,m,k] x b[B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = self.bmm_dims("bmm", a, b, false)?;
        let mut value = vec![T::ZERO; bs * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..bs {
                mm_nn(m, k, n, &va[i * m * k..], &vb[i * k * n..], &mut value[i * m * n..(i + 1) * m * n]);
            }
        }
        self.push("bmm", vec![bs, m, n], value, &[a, b], move |c, s| {
            let (va, vb) = (c.value(a), c.value(b));
            if let Some(ga) = s.get(a) {
                for i in 0..bs {
                    mm_nt(m, n, k, &c.grad[i * m * n..], &vb[i * k * n..], &mut ga[i * m * k..(i + 1) * m * k]);
                }
            }
            if let Some(gb) = s.get(b) {
                for i in 0..bs {
                    mm_tn(m, k, n, &va[i * m * k..], &c.grad[i * m * n..], &mut gb[i * k * n..(i + 1) * k * n]);
                }
            }
        })
    }

    /// Batched `a[B,m,k] x b[B,n,k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = self.bmm_dims("bmm_nt", a, b, true)?;
        let mut value = vec![T::ZERO; bs * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..bs {
                mm_nt(m, k, n, &va[i * m * k..], &vb[i * n * k..], &mut value[i * m * n..(i + 1) * m * n]);
            }
        }
        self.push("bmm_nt", vec![bs, m, n], value, &[a, b], move |c, s| {
            let (va, vb) = (c.value(a), c.value(b));
            if let Some(ga) = s.get(a) {
                for i in 0..bs {
                    mm_nn(m, n, k, &c.grad[i * m * n..], &vb[i * n * k..], &mut ga[i * m * k..(i + 1) * m * k]);
                }
            }
            if let Some(gb) = s.get(b) {
                // gb[n,k] += g[m,n]^T a[m,k]
                for i in 0..bs {
                    mm_tn(m, n, k, &c.grad[i * m * n..], &va[i * m * k..], &mut gb[i * n * k..(i + 1) * n * k]);
                }
            }
        })
    }

    fn bmm_dims(&self, op: &'static str, a: Var, b: Var, bt: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || shape_err(op, format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if bt {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        Ok((bs, m, k, n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel(x) {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), value, &[x], move |c, s| s.add(x, c.grad))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} invalid for {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = permute_index_map(&shape, axes);
        let vx = self.value(x);
        let value = map.iter().map(|&src| vx[src]).collect();
        self.push("permute", out_shape, value, &[x], move |c, s| {
            if let Some(gx) = s.get(x) {
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += c.grad[o];
                }
            }
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(x)[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let parts: Vec<Var> = xs.to_vec();
        self.push("concat", shape, value, xs, move |c, s| {
            let mut start = 0;
            for (&x, &w) in parts.iter().zip(&widths) {
                if let Some(gx) = s.get(x) {
                    for o in 0..outer {
                        let src = &c.grad[(o * total + start) * inner..(o * total + start + w) * inner];
                        gx[o * w * inner..(o + 1) * w * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
                start += w;
            }
        })
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let vx = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&vx[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, value, &[x], move |c, s| {
            if let Some(gx) = s.get(x) {
                for o in 0..outer {
                    gx[(o * d + start) * inner..(o * d + start + len) * inner]
                        .iter_mut()
                        .zip(&c.grad[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, &g)| *a += g);
                }
            }
        })
    }

    /// Pick entries by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.numel(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(shape_err("gather", format!("indices out of range for {:?}", self.shape(x))));
        }
        let vx = self.value(x);
        let value = idx.iter().map(|&i| vx[i]).collect();
        let idx = idx.to_vec();
        self.push("gather", vec![idx.len()], value, &[x], move |c, s| {
            if let Some(gx) = s.get(x) {
                for (&i, &g) in idx.iter().zip(c.grad) {
                    gx[i] += g;
                }
            }
        })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(d) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push("softmax", self.shape(x).to_vec(), value, &[x], move |c, s| {
            if let Some(gx) = s.get(x) {
                for ((gr, yr), dr) in c.grad.chunks(d).zip(c.out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let mut dot = T::ZERO;
                    for (&g, &y) in gr.iter().zip(yr) {
                        dot += g * y;
                    }
                    for ((dv, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += y * (g - dot);
                    }
                }
            }
        })
    }
}

/// For each output position of a permutation, the flat source index.
fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn permute_matches_index_arithmetic() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let x = g.constant(&t);
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        let out = g.tensor(y);
        assert_eq!(out.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::randn(&[5, 7], 3.0, &mut rng));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::from_fn(&[2, 3, 2], |i| i as f32));
        let b = g.constant(&Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f32));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2]);
        let back = g.slice(c, 1, 3, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }
}
