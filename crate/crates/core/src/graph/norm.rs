use super::{BnUpdate, Graph, Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamId;
use crate::tensor::Real;

/// Learnable and running parameters of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormRefs {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl<T: Real> Graph<'_, T> {
    /// Normalize over the last dimension, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("layer_norm", "rank 0 input"))?;
        if d == 0 {
            return Err(Error::InvalidArgument("layer_norm over an empty dimension".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for last dim {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = vx.len() / d;
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut value = vec![T::ZERO; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                value[r * d + j] = xh * vg[j] + vb[j];
            }
        }
        self.push("layer_norm", self.shape(x).to_vec(), value, &[x, gamma, beta], move |c, s| {
            let vg = c.value(gamma);
            if let Some(gg) = s.get(gamma) {
                for (gr, xr) in c.grad.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = s.get(beta) {
                for gr in c.grad.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, &g)| *a += g);
                }
            }
            if let Some(gx) = s.get(x) {
                for r in 0..rows {
                    let gr = &c.grad[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (T::ZERO, T::ZERO);
                    for j in 0..d {
                        let dxh = gr[j] * vg[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * vg[j];
                        gx[r * d + j] += rstd[r] * (dxh - m1 - xr[j] * m2);
                    }
                }
            }
        })
    }

    /// Batch normalization of `x[B,C,H,W]` per channel.
    ///
    /// In [`Mode::Train`] the batch statistics are used (batch size must be
    /// at least 2) and recorded for a later running-average update; in
    /// [`Mode::Eval`] the running statistics are used.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormRefs) -> Result<Var> {
        self.expect_rank("batch_norm", x, 4)?;
        let s = self.shape(x).to_vec();
        let (b, ch, plane) = (s[0], s[1], s[2] * s[3]);
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        if self.shape(gamma) != [ch] {
            return Err(shape_err("batch_norm", format!("gamma {:?} for {ch} channels", self.shape(gamma))));
        }
        let eps = T::lit(bn.eps);
        let m = b * plane;
        let (mean, var) = match self.mode() {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch_norm in training mode needs batch size >= 2, got {b}"
                    )));
                }
                let vx = self.value(x);
                let mut mean = vec![T::ZERO; ch];
                let mut var = vec![T::ZERO; ch];
                let inv_m = T::lit(1.0 / m as f64);
                for ci in 0..ch {
                    let mut acc = T::ZERO;
                    for bi in 0..b {
                        acc += vx[(bi * ch + ci) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    mean[ci] = acc * inv_m;
                    let mut sq = T::ZERO;
                    for bi in 0..b {
                        for &v in &vx[(bi * ch + ci) * plane..][..plane] {
                            sq += (v - mean[ci]) * (v - mean[ci]);
                        }
                    }
                    var[ci] = sq * inv_m;
                }
                let unbiased = var.iter().map(|&v| v * T::lit(m as f64 / (m as f64 - 1.0))).collect();
                self.push_bn_update(BnUpdate {
                    running_mean: bn.running_mean,
                    running_var: bn.running_var,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
                (mean, var)
            }
            Mode::Eval => (
                self.buffer(bn.running_mean).data().to_vec(),
                self.buffer(bn.running_var).data().to_vec(),
            ),
        };
        let train = self.mode() == Mode::Train;
        let rstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut value = vec![T::ZERO; vx.len()];
        for bi in 0..b {
            for ci in 0..ch {
                let off = (bi * ch + ci) * plane;
                for i in off..off + plane {
                    let xh = (vx[i] - mean[ci]) * rstd[ci];
                    xhat[i] = xh;
                    value[i] = xh * vg[ci] + vb[ci];
                }
            }
        }
        self.push("batch_norm", s, value, &[x, gamma, beta], move |c, sink| {
            let vg = c.value(gamma);
            let mut sum_g = vec![T::ZERO; ch];
            let mut sum_gx = vec![T::ZERO; ch];
            for bi in 0..b {
                for ci in 0..ch {
                    let off = (bi * ch + ci) * plane;
                    for i in off..off + plane {
                        sum_g[ci] += c.grad[i];
                        sum_gx[ci] += c.grad[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = sink.get(gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a += v);
            }
            if let Some(gb) = sink.get(beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a += v);
            }
            if let Some(gx) = sink.get(x) {
                let inv_m = T::lit(1.0 / m as f64);
                for bi in 0..b {
                    for ci in 0..ch {
                        let off = (bi * ch + ci) * plane;
                        let k = vg[ci] * rstd[ci];
                        for i in off..off + plane {
                            gx[i] += if train {
                                k * (c.grad[i] - sum_g[ci] * inv_m - xhat[i] * sum_gx[ci] * inv_m)
                            } else {
                                k * c.grad[i]
                            };
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
    use crate::tensor::Tensor;

    #[test]
    fn constant_row_maps_to_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(&[2, 4], 3.0));
        let gamma = g.constant(&Tensor::full(&[4], 1.0));
        let beta = g.constant(&Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_row_is_fixed_point() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let gamma = g.constant(&Tensor::full(&[2], 1.0));
        let beta = g.constant(&Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_matches_direct_statistics() {
        let mut rng = crate::rng::Rng::new(11);
        let xt = Tensor::<f64>::randn(&[3, 7], 2.0, &mut rng);
        let gt = Tensor::<f64>::randn(&[7], 1.0, &mut rng);
        let bt = Tensor::<f64>::randn(&[7], 1.0, &mut rng);
        let mut g = Graph::new();
        let (x, gm, bt_v) = (g.constant(&xt), g.constant(&gt), g.constant(&bt));
        let y = g.layer_norm(x, gm, bt_v, 1e-5).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..7).map(|j| xt.at(&[r, j])).collect();
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            for j in 0..7 {
                let expect = (row[j] - mean) / (var + 1e-5).sqrt() * gt.at(&[j]) + bt.at(&[j]);
                assert!((g.value(y)[r * 7 + j] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_last_dim_rejected_at_tensor_level() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }
}
