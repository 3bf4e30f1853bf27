//! Prompt-feature interaction and the transformer block that hosts two of
//! them: one for the illumination stream after attention, one for the
//! viewpoint stream after the feed-forward layer.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, LayerNorm, Mlp};
use crate::params::{Builder, ParamGroup, ParamId};
use crate::prompters::PromptTokens;
use crate::tensor::Real;

pub const COEFF_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct PfiModule {
    pub mlp_sim: Mlp,
    /// Same ids as `mlp_sim` when the block was built with a shared MLP.
    pub mlp_dif: Mlp,
    pub ln_sim: LayerNorm,
    pub ln_dif: LayerNorm,
    pub alpha_f: ParamId,
    pub beta_f: ParamId,
    pub alpha_p: ParamId,
    pub beta_p: ParamId,
}

/// Similarity and difference encodings of one feature/prompt pair.
#[derive(Clone, Copy, Debug)]
pub struct PfiIntermediate {
    pub e_sim: Var,
    pub e_dif: Var,
}

impl PfiModule {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, share_mlp: bool) -> Self {
        let mut s = b.scope(name);
        let mlp_sim = Mlp::new(&mut s, "mlp_sim", dim, dim);
        let mlp_dif = if share_mlp { mlp_sim.clone() } else { Mlp::new(&mut s, "mlp_dif", dim, dim) };
        let ln_sim = LayerNorm::new(&mut s, "ln_sim", dim);
        let ln_dif = LayerNorm::new(&mut s, "ln_dif", dim);
        Self {
            mlp_sim,
            mlp_dif,
            ln_sim,
            ln_dif,
            alpha_f: s.constant("alpha_f", &[1], COEFF_INIT),
            beta_f: s.constant("beta_f", &[1], COEFF_INIT),
            alpha_p: s.constant("alpha_p", &[1], COEFF_INIT),
            beta_p: s.constant("beta_p", &[1], COEFF_INIT),
        }
    }

    pub fn coefficients(&self) -> [ParamId; 4] {
        [self.alpha_f, self.beta_f, self.alpha_p, self.beta_p]
    }

    /// `e_sim = LN(MLP_sim(F + P))`, `e_dif = LN(MLP_dif(F - P))`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, prompt: Var) -> Result<PfiIntermediate> {
        if g.shape(features) != g.shape(prompt) {
            return Err(shape_err(
                "pfi_encode",
                format!("features {:?} vs prompt {:?}", g.shape(features), g.shape(prompt)),
            ));
        }
        let sum = g.add(features, prompt)?;
        let e_sim = self.mlp_sim.forward(g, sum)?;
        let e_sim = self.ln_sim.forward(g, e_sim)?;
        let dif = g.sub(features, prompt)?;
        let e_dif = self.mlp_dif.forward(g, dif)?;
        let e_dif = self.ln_dif.forward(g, e_dif)?;
        Ok(PfiIntermediate { e_sim, e_dif })
    }

    /// `F + alpha_f * e_sim - beta_f * e_dif`.
    pub fn adapt<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, inter: PfiIntermediate) -> Result<Var> {
        let (a, b) = (g.param(self.alpha_f), g.param(self.beta_f));
        let sim = g.scale_by(inter.e_sim, a)?;
        let dif = g.scale_by(inter.e_dif, b)?;
        // Grouped so that equal terms cancel exactly before touching F.
        let delta = g.sub(sim, dif)?;
        g.add(features, delta)
    }

    /// `P - alpha_p * e_sim + beta_p * e_dif`, handed to the next block.
    pub fn evolve<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prompt: PromptTokens,
        inter: PfiIntermediate,
    ) -> Result<PromptTokens> {
        let (a, b) = (g.param(self.alpha_p), g.param(self.beta_p));
        let sim = g.scale_by(inter.e_sim, a)?;
        let dif = g.scale_by(inter.e_dif, b)?;
        let delta = g.sub(dif, sim)?;
        let tokens = g.add(prompt.tokens, delta)?;
        Ok(PromptTokens { tokens, kind: prompt.kind, block_index: prompt.block_index + 1 })
    }
}

/// Pre-norm transformer block with prompt interaction.
#[derive(Clone, Debug)]
pub struct DpBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub pfi_illu: PfiModule,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub pfi_view: PfiModule,
}

impl DpBlock {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
        share_pfi_mlp: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let ln1 = LayerNorm::new(&mut s, "ln1", dim);
        let attn = Attention::new(&mut s, "attn", dim, heads);
        let ln2 = LayerNorm::new(&mut s, "ln2", dim);
        let ffn = Mlp::new(&mut s, "ffn", dim, dim * ffn_ratio);
        let mut p = s.regroup(ParamGroup::Prompt);
        let pfi_illu = PfiModule::new(&mut p, "pfi_illu", dim, share_pfi_mlp);
        let pfi_view = PfiModule::new(&mut p, "pfi_view", dim, share_pfi_mlp);
        Self { ln1, attn, pfi_illu, ln2, ffn, pfi_view }
    }

    fn attention_residual<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        g.add(x, h)
    }

    fn ffn_residual<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        illu: PromptTokens,
        view: PromptTokens,
    ) -> Result<(Var, PromptTokens, PromptTokens)> {
        for p in [illu.tokens, view.tokens] {
            if g.shape(p) != g.shape(features) {
                return Err(shape_err(
                    "dpblock",
                    format!("prompt {:?} vs features {:?}", g.shape(p), g.shape(features)),
                ));
            }
        }
        let x = self.attention_residual(g, features)?;
        let inter = self.pfi_illu.encode(g, x, illu.tokens)?;
        let x = self.pfi_illu.adapt(g, x, inter)?;
        let illu = self.pfi_illu.evolve(g, illu, inter)?;
        let x = self.ffn_residual(g, x)?;
        let inter = self.pfi_view.encode(g, x, view.tokens)?;
        let x = self.pfi_view.adapt(g, x, inter)?;
        let view = self.pfi_view.evolve(g, view, inter)?;
        Ok((x, illu, view))
    }

    /// The block without prompt interaction.
    pub fn forward_plain<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let x = self.attention_residual(g, features)?;
        self.ffn_residual(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::params::ParamStore;
    use crate::prompters::PromptKind;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn prompt(v: Var, kind: PromptKind) -> PromptTokens {
        PromptTokens { tokens: v, kind, block_index: 0 }
    }

    fn block(store: &mut ParamStore<f64>, dim: usize, share: bool) -> DpBlock {
        let mut rng = Rng::new(17);
        let mut b = Builder::new(store, &mut rng, ParamGroup::Backbone);
        DpBlock::new(&mut b, "blk", dim, 2, 4, share)
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
        store.get_mut(id).data_mut().fill(v);
    }

    #[test]
    fn shared_weights_and_zero_prompt_give_equal_encodings() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 6, true);
        let pfi = &blk.pfi_illu;
        let f = Tensor::randn(&[4, 6], 1.0, &mut Rng::new(1));
        let mut g = Graph::with_params(&store, Mode::Eval);
        let fv = g.constant(&f);
        let pv = g.constant(&Tensor::zeros(&[4, 6]));
        let inter = pfi.encode(&mut g, fv, pv).unwrap();
        assert_eq!(g.value(inter.e_sim), g.value(inter.e_dif));
    }

    #[test]
    fn swapping_streams_keeps_similarity() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 6, false);
        let pfi = &blk.pfi_illu;
        let mut rng = Rng::new(2);
        let (f, p) = (Tensor::randn(&[3, 6], 1.0, &mut rng), Tensor::randn(&[3, 6], 1.0, &mut rng));
        let mut g = Graph::with_params(&store, Mode::Eval);
        let (fv, pv) = (g.constant(&f), g.constant(&p));
        let a = pfi.encode(&mut g, fv, pv).unwrap();
        let b = pfi.encode(&mut g, pv, fv).unwrap();
        assert_eq!(g.value(a.e_sim), g.value(b.e_sim));
        let d1 = g.sub(fv, pv).unwrap();
        let d2 = g.sub(pv, fv).unwrap();
        let neg: Vec<f64> = g.value(d2).iter().map(|v| -v).collect();
        assert_eq!(g.value(d1), &neg[..]);
    }

    #[test]
    fn encode_matches_recomputation() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 5, false);
        let pfi = blk.pfi_view.clone();
        let mut rng = Rng::new(3);
        for id in [pfi.ln_sim.gamma, pfi.ln_sim.beta, pfi.mlp_sim.fc1.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal());
        }
        let (f, p) = (Tensor::randn(&[2, 5], 1.0, &mut rng), Tensor::randn(&[2, 5], 1.0, &mut rng));
        let mut g = Graph::with_params(&store, Mode::Eval);
        let (fv, pv) = (g.constant(&f), g.constant(&p));
        let inter = pfi.encode(&mut g, fv, pv).unwrap();

        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let w1 = store.get(pfi.mlp_sim.fc1.weight);
        let b1 = store.get(pfi.mlp_sim.fc1.bias);
        let w2 = store.get(pfi.mlp_sim.fc2.weight);
        let b2 = store.get(pfi.mlp_sim.fc2.bias);
        let (gm, bt) = (store.get(pfi.ln_sim.gamma), store.get(pfi.ln_sim.beta));
        for r in 0..2 {
            let x: Vec<f64> = (0..5).map(|j| f.at(&[r, j]) + p.at(&[r, j])).collect();
            let h: Vec<f64> = (0..5).map(|j| gelu(b1.data()[j] + (0..5).map(|i| x[i] * w1.at(&[i, j])).sum::<f64>())).collect();
            let y: Vec<f64> = (0..5).map(|j| b2.data()[j] + (0..5).map(|i| h[i] * w2.at(&[i, j])).sum::<f64>()).collect();
            let mean = y.iter().sum::<f64>() / 5.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let e = (y[j] - mean) / (var + 1e-5).sqrt() * gm.data()[j] + bt.data()[j];
                assert!((g.value(inter.e_sim)[r * 5 + j] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_coefficients_pass_through() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, false);
        for id in blk.pfi_illu.coefficients() {
            set(&mut store, id, 0.0);
        }
        let mut rng = Rng::new(4);
        let f = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut g = Graph::with_params(&store, Mode::Eval);
        let (fv, pv) = (g.constant(&f), g.constant(&p));
        let inter = blk.pfi_illu.encode(&mut g, fv, pv).unwrap();
        let out = blk.pfi_illu.adapt(&mut g, fv, inter).unwrap();
        let np = blk.pfi_illu.evolve(&mut g, prompt(pv, PromptKind::Illumination), inter).unwrap();
        assert_eq!(g.value(out), f.data());
        assert_eq!(g.value(np.tokens), p.data());
        assert_eq!(np.block_index, 1);
    }

    #[test]
    fn equal_encodings_cancel_with_equal_coefficients() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, true);
        set(&mut store, blk.pfi_illu.alpha_f, 0.37);
        set(&mut store, blk.pfi_illu.beta_f, 0.37);
        let f = Tensor::randn(&[3, 4], 1.0, &mut Rng::new(5));
        let mut g = Graph::with_params(&store, Mode::Eval);
        let fv = g.constant(&f);
        let pv = g.constant(&Tensor::zeros(&[3, 4]));
        let inter = blk.pfi_illu.encode(&mut g, fv, pv).unwrap();
        let out = blk.pfi_illu.adapt(&mut g, fv, inter).unwrap();
        assert_eq!(g.value(out), f.data());
    }

    #[test]
    fn alpha_gradient_is_sum_of_similarity() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, false);
        let mut rng = Rng::new(6);
        let f = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::with_params(store, Mode::Eval);
            let (fv, pv) = (g.constant(&f), g.constant(&p));
            let inter = blk.pfi_illu.encode(&mut g, fv, pv).unwrap();
            let out = blk.pfi_illu.adapt(&mut g, fv, inter).unwrap();
            let s = g.sum(out).unwrap();
            let grads = g.backward(s).unwrap();
            let pg = g.param_grads(&grads);
            let ga = pg.iter().find(|(id, _)| *id == blk.pfi_illu.alpha_f).unwrap().1[0];
            (g.scalar_value(s), ga, g.value(inter.e_sim).iter().sum::<f64>())
        };
        let (_, ga, sum_sim) = run(&store);
        assert!((ga - sum_sim).abs() < 1e-12);
        let h = 1e-4;
        let mut plus = store.clone();
        plus.get_mut(blk.pfi_illu.alpha_f).data_mut()[0] += h;
        let mut minus = store.clone();
        minus.get_mut(blk.pfi_illu.alpha_f).data_mut()[0] -= h;
        let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
        assert!((fd - ga).abs() < 1e-8 * ga.abs().max(1.0));
    }

    #[test]
    fn raising_alpha_p_moves_prompt_against_similarity() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, false);
        let mut rng = Rng::new(7);
        let f = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut projections = Vec::new();
        for a in [0.0, 0.5, 1.0] {
            set(&mut store, blk.pfi_illu.alpha_p, a);
            set(&mut store, blk.pfi_illu.beta_p, 0.0);
            let mut g = Graph::with_params(&store, Mode::Eval);
            let (fv, pv) = (g.constant(&f), g.constant(&p));
            let inter = blk.pfi_illu.encode(&mut g, fv, pv).unwrap();
            let np = blk.pfi_illu.evolve(&mut g, prompt(pv, PromptKind::Illumination), inter).unwrap();
            let e = g.value(inter.e_sim);
            projections.push(g.value(np.tokens).iter().zip(e).map(|(a, b)| a * b).sum::<f64>());
        }
        assert!(projections[0] > projections[1] && projections[1] > projections[2]);
    }

    #[test]
    fn zero_coefficient_block_is_plain_block() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 8, false);
        for pfi in [&blk.pfi_illu, &blk.pfi_view] {
            for id in pfi.coefficients() {
                set(&mut store, id, 0.0);
            }
        }
        let mut rng = Rng::new(8);
        let ts: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 5, 8], 1.0, &mut rng)).collect();
        let mut g = Graph::with_params(&store, Mode::Eval);
        let v: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let (x, pi, pv) = blk
            .forward(&mut g, v[0], prompt(v[1], PromptKind::Illumination), prompt(v[2], PromptKind::Viewpoint))
            .unwrap();
        let plain = blk.forward_plain(&mut g, v[0]).unwrap();
        assert_eq!(g.value(x), g.value(plain));
        assert_eq!(g.value(pi.tokens), ts[1].data());
        assert_eq!(g.value(pv.tokens), ts[2].data());
    }

    #[test]
    fn shapes_preserved_through_stacked_blocks() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(9);
        let blocks: Vec<DpBlock> = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Backbone);
            (0..3).map(|i| DpBlock::new(&mut b, &format!("b{i}"), 32, 4, 4, false)).collect()
        };
        let mut rng = Rng::new(10);
        let ts: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::randn(&[1, 16, 32], 1.0, &mut rng)).collect();
        let mut g = Graph::with_params(&store, Mode::Eval);
        let v: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let (mut x, mut pi, mut pv) =
            (v[0], prompt(v[1], PromptKind::Illumination), prompt(v[2], PromptKind::Viewpoint));
        for blk in &blocks {
            (x, pi, pv) = blk.forward(&mut g, x, pi, pv).unwrap();
        }
        for t in [x, pi.tokens, pv.tokens] {
            assert_eq!(g.shape(t), &[1, 16, 32]);
        }
        assert_eq!(pv.block_index, 3);
    }

    #[test]
    fn mismatched_prompt_rejected() {
        let mut store = ParamStore::new();
        let blk = block(&mut store, 4, false);
        let mut g = Graph::with_params(&store, Mode::Eval);
        let f = g.constant(&Tensor::zeros(&[3, 4]));
        let p = g.constant(&Tensor::zeros(&[2, 4]));
        assert!(blk.pfi_illu.encode(&mut g, f, p).is_err());
    }
}
