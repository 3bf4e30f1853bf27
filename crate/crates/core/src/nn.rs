//! Layers built from graph ops. Each layer only stores [`ParamId`]s, so one
//! model description serves both the single-precision training store and its
//! double-precision copy used for gradient checks.

use crate::error::{shape_err, Result};
use crate::graph::{BatchNormRefs, ConvOpts, Graph, Var};
use crate::params::{Builder, ParamId};
use crate::tensor::{Real, Tensor};

/// `x * weight + bias` with `weight` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        let weight = s.xavier("weight", &[in_dim, out_dim], in_dim, out_dim);
        let bias = s.zeros("bias", &[out_dim]);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        let fc1 = Linear::new(&mut s, "fc1", dim, hidden);
        let fc2 = Linear::new(&mut s, "fc2", hidden, dim);
        Self { fc1, fc2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(self.fc1.weight), g.param(self.fc1.bias));
        let (w2, b2) = (g.param(self.fc2.weight), g.param(self.fc2.bias));
        mlp_forward(g, x, w1, b1, w2, b2)
    }
}

/// `GELU(x * w1 + b1) * w2 + b2`.
pub fn mlp_forward<T: Real>(g: &mut Graph<'_, T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.constant("gamma", &[dim], 1.0);
        let beta = s.zeros("beta", &[dim]);
        Self { gamma, beta, eps: Self::EPS }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
}

impl Conv2d {
    /// Weight `[out, in/groups, k, k]` drawn `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: ConvOpts,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let fan_in = in_ch / opts.groups * kernel * kernel;
        let weight = s.fan_in_uniform("weight", &[out_ch, in_ch / opts.groups, kernel, kernel], fan_in);
        let bias = bias.then(|| s.zeros("bias", &[out_ch]));
        Self { weight, bias, opts }
    }

    /// Conv layer with a caller-provided initial weight and zero bias.
    pub fn with_weight<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        weight: Tensor<T>,
        opts: ConvOpts,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let out_ch = weight.shape()[0];
        let weight = s.param("weight", weight);
        let bias = bias.then(|| s.zeros("bias", &[out_ch]));
        Self { weight, bias, opts }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub refs: BatchNormRefs,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.constant("gamma", &[channels], 1.0);
        let beta = s.zeros("beta", &[channels]);
        let running_mean = s.buffer("running_mean", Tensor::zeros(&[channels]));
        let running_var = s.buffer("running_var", Tensor::full(&[channels], T::ONE));
        Self { refs: BatchNormRefs { gamma, beta, running_mean, running_var, eps: Self::EPS } }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(x, &self.refs)
    }
}

/// One projection of an attention layer, already bound to graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Projection {
    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

/// Multi-head self-attention over `x[B, N, d]` (or `x[N, d]`).
///
/// Per head `softmax(Q K^T / sqrt(d / heads)) V`; heads are concatenated and
/// passed through the output projection.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    [wq, wk, wv, wo]: [Projection; 4],
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (batch, n, d) = match shape[..] {
        [n, d] => (1, n, d),
        [b, n, d] => (b, n, d),
        _ => return Err(shape_err("multi_head_attention", format!("expected [B,N,d] or [N,d], got {shape:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("multi_head_attention", format!("embed dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<'_, T>, p: Projection| -> Result<Var> {
        let y = p.apply(g, x)?;
        let y = g.reshape(y, &[batch, n, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[batch * heads, n, dh])
    };
    let q = split(g, wq)?;
    let k = split(g, wk)?;
    let v = split(g, wv)?;
    let scores = g.bmm_nt(q, k)?;
    let scores = g.mul_const(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[batch, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &shape)?;
    wo.apply(g, ctx)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            out: Linear::new(&mut s, "out", dim, dim),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut bind = |l: &Linear| Projection { weight: g.param(l.weight), bias: Some(g.param(l.bias)) };
        let proj = [bind(&self.q), bind(&self.k), bind(&self.v), bind(&self.out)];
        multi_head_attention(g, x, proj, self.heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_mlp(x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>, b2: &Tensor<f64>) -> Vec<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let h = w1.shape()[1];
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let hid: Vec<f64> = (0..h)
                .map(|j| gelu(b1.at(&[j]) + (0..d).map(|i| x.at(&[r, i]) * w1.at(&[i, j])).sum::<f64>()))
                .collect();
            for o in 0..d {
                out[r * d + o] = b2.at(&[o]) + (0..h).map(|j| hid[j] * w2.at(&[j, o])).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::full(&[2, 3], 5.0));
        let w1 = g.constant(&Tensor::zeros(&[3, 4]));
        let b1 = g.constant(&Tensor::zeros(&[4]));
        let w2 = g.constant(&Tensor::zeros(&[4, 3]));
        let b2 = g.constant(&Tensor::zeros(&[3]));
        let y = mlp_forward(&mut g, x, w1, b1, w2, b2).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_weights_pass_large_inputs() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let w1 = g.constant(&eye);
        let w2 = g.constant(&eye);
        let b = g.constant(&Tensor::zeros(&[3]));
        let y = mlp_forward(&mut g, x, w1, b, w2, b).unwrap();
        for (a, e) in g.value(y).iter().zip([10.0, 20.0, 30.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_matches_naive() {
        let mut rng = Rng::new(5);
        let ts: Vec<Tensor<f64>> = [&[4usize, 3][..], &[3, 6], &[6], &[6, 3], &[3]]
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        let mut g = Graph::new();
        let v: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let y = mlp_forward(&mut g, v[0], v[1], v[2], v[3], v[4]).unwrap();
        let expect = naive_mlp(&ts[0], &ts[1], &ts[2], &ts[3], &ts[4]);
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    fn proj(g: &mut Graph<'_, f64>, t: &Tensor<f64>) -> Projection {
        Projection { weight: g.constant(t), bias: None }
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let ws: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[4, 4], 1.0, &mut rng)).collect();
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let p = [proj(&mut g, &ws[0]), proj(&mut g, &ws[1]), proj(&mut g, &ws[2]), proj(&mut g, &eye)];
        let y = multi_head_attention(&mut g, xv, p, 2).unwrap();
        for o in 0..4 {
            let v: f64 = (0..4).map(|i| x.at(&[0, i]) * ws[2].at(&[i, o])).sum();
            assert!((g.value(y)[o] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_naive_per_head() {
        let (n, d, heads) = (3, 4, 2);
        let dh = d / heads;
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let ws: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[d, d], 0.7, &mut rng)).collect();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let p = [proj(&mut g, &ws[0]), proj(&mut g, &ws[1]), proj(&mut g, &ws[2]), proj(&mut g, &ws[3])];
        let y = multi_head_attention(&mut g, xv, p, heads).unwrap();

        let mm = |a: &Tensor<f64>, r: usize, w: &Tensor<f64>, c: usize| (0..d).map(|i| a.at(&[r, i]) * w.at(&[i, c])).sum::<f64>();
        let q: Vec<Vec<f64>> = (0..n).map(|r| (0..d).map(|c| mm(&x, r, &ws[0], c)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|r| (0..d).map(|c| mm(&x, r, &ws[1], c)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|r| (0..d).map(|c| mm(&x, r, &ws[2], c)).collect()).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..n {
                    let a = (s[j] - mx).exp() / z;
                    for e in 0..dh {
                        ctx[i][h * dh + e] += a * v[j][h * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            for c in 0..d {
                let e: f64 = (0..d).map(|m| ctx[i][m] * ws[3].at(&[m, c])).sum();
                assert!((g.value(y)[i * d + c] - e).abs() < 1e-5 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::zeros(&[2, 6]));
        let w = g.constant(&Tensor::zeros(&[6, 6]));
        let p = Projection { weight: w, bias: None };
        let err = multi_head_attention(&mut g, x, [p; 4], 4).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }
}
