use crate::dpblock::DpBlock;
use crate::error::{shape_err, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::{Builder, ParamGroup, ParamId, ParamStore};
use crate::prompters::{tokenize_prompt, IllumPrompter, PromptKind, PromptTokens, ViewPrompter};
use crate::rng::Rng;
use crate::tensor::Real;

use super::TrackerConfig;

/// Image channels the model consumes.
pub const CHANNELS: usize = 3;
/// Initial center-logit bias, `logit(0.1)`.
pub const CENTER_BIAS_INIT: f64 = -2.19;

/// Patch embedding, prompters and the stack of prompt blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Conv2d,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub illum: IllumPrompter,
    pub view: ViewPrompter,
    pub illum_proj: Linear,
    pub view_proj: Linear,
    pub blocks: Vec<DpBlock>,
    pub norm: LayerNorm,
}

/// Light conv branches over the search-token grid.
#[derive(Clone, Debug)]
pub struct Head {
    pub center: [Conv2d; 2],
    pub size: [Conv2d; 2],
    pub offset: [Conv2d; 2],
}

/// Head outputs for a batch, as graph nodes. Maps are `[B, k, g, g]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub center_logits: Var,
    /// `sigmoid(center_logits)`.
    pub center: Var,
    /// Normalized `(w, h)` in `(0, 1)`.
    pub size: Var,
    /// Sub-cell `(x, y)` offsets.
    pub offset: Var,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub backbone: Backbone,
    pub head: Head,
}

impl Tracker {
    /// Build the model and a freshly initialized parameter store.
    pub fn new<T: Real>(cfg: &TrackerConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let model = Self::build(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn build<T: Real>(cfg: &TrackerConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let ps = cfg.patch_size;
        let backbone = {
            let mut b = Builder::new(store, rng, ParamGroup::Backbone);
            let mut bb = b.scope("backbone");
            let patch_embed = Conv2d::new(&mut bb, "patch_embed", CHANNELS, d, ps, ConvOpts::new(ps, 0), true);
            let pos_template = bb.normal("pos_template", &[cfg.template_tokens(), d], 0.02);
            let pos_search = bb.normal("pos_search", &[cfg.search_tokens(), d], 0.02);
            let blocks = (0..cfg.depth)
                .map(|i| DpBlock::new(&mut bb, &format!("blocks.{i}"), d, cfg.heads, cfg.ffn_ratio, cfg.share_pfi_mlp))
                .collect();
            let norm = LayerNorm::new(&mut bb, "norm", d);
            let mut pb = bb.scope("prompt").group(ParamGroup::Prompt);
            let illum = IllumPrompter::new(&mut pb, CHANNELS, cfg.n_pyramid_levels, cfg.illum_width, ps)?;
            let view = ViewPrompter::new(&mut pb, CHANNELS, cfg.view_hidden, cfg.view_width, ps);
            let illum_proj = Linear::new(&mut pb, "illum_proj", illum.out_channels(), d);
            let view_proj = Linear::new(&mut pb, "view_proj", cfg.view_width, d);
            Backbone { patch_embed, pos_template, pos_search, illum, view, illum_proj, view_proj, blocks, norm }
        };
        let head = {
            let mut b = Builder::new(store, rng, ParamGroup::Head);
            let mut hb = b.scope("head");
            let mut branch = |name: &str, out: usize| {
                let mut s = hb.scope(name);
                let c1 = Conv2d::new(&mut s, "conv1", d, cfg.head_hidden, 3, ConvOpts::new(1, 1), true);
                let c2 = Conv2d::new(&mut s, "conv2", cfg.head_hidden, out, 1, ConvOpts::new(1, 0), true);
                [c1, c2]
            };
            let center = branch("center", 1);
            let size = branch("size", 2);
            let offset = branch("offset", 2);
            Head { center, size, offset }
        };
        if let Some(b) = head.center[1].bias {
            store.get_mut(b).data_mut().fill(T::lit(CENTER_BIAS_INIT));
        }
        Ok(Self { cfg: cfg.clone(), backbone, head })
    }

    /// Every PFI coefficient, in block order.
    pub fn pfi_coefficients(&self) -> Vec<ParamId> {
        self.backbone
            .blocks
            .iter()
            .flat_map(|b| b.pfi_illu.coefficients().into_iter().chain(b.pfi_view.coefficients()))
            .collect()
    }

    /// Set every PFI coefficient to zero, the prompt-free ablation.
    pub fn zero_pfi<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.pfi_coefficients() {
            store.get_mut(id).data_mut().fill(T::ZERO);
        }
    }

    /// Patch tokens `[B, N, d]` of `image[B, 3, H, W]` plus positions.
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<'_, T>, image: Var, pos: ParamId) -> Result<Var> {
        let x = self.backbone.patch_embed.forward(g, image)?;
        let s = g.shape(x).to_vec();
        let (b, d, n) = (s[0], s[1], s[2] * s[3]);
        let pos = g.param(pos);
        if g.shape(pos) != [n, d] {
            return Err(shape_err(
                "patch_embed",
                format!("image gives {n} patches, positional table is {:?}", g.shape(pos)),
            ));
        }
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[b, n * d])?;
        let pos = g.reshape(pos, &[n * d])?;
        let x = g.add_row(x, pos)?;
        g.reshape(x, &[b, n, d])
    }

    fn region_prompts<T: Real>(&self, g: &mut Graph<'_, T>, image: Var, tokens: usize) -> Result<(Var, Var)> {
        let bb = &self.backbone;
        let illum = bb.illum.forward(g, image)?;
        let illum = tokenize_prompt(g, illum, &bb.illum_proj, tokens)?;
        let view = bb.view.forward(g, image)?;
        let view = tokenize_prompt(g, view, &bb.view_proj, tokens)?;
        Ok((illum, view))
    }

    fn check_regions<T: Real>(&self, g: &Graph<'_, T>, template: Var, search: Var) -> Result<()> {
        let (t, s) = (g.shape(template), g.shape(search));
        let (ts, ss) = (self.cfg.template_size, self.cfg.search_size);
        if t.len() != 4 || s.len() != 4 || t[1..] != [CHANNELS, ts, ts] || s[1..] != [CHANNELS, ss, ss] || t[0] != s[0] {
            return Err(shape_err(
                "backbone",
                format!("template {t:?} / search {s:?}, expected [B,3,{ts},{ts}] / [B,3,{ss},{ss}]"),
            ));
        }
        Ok(())
    }

    /// One-stream encoding of template and search tokens with both prompt
    /// streams. Returns `[B, Nt + Ns, d]`.
    pub fn backbone_forward<T: Real>(&self, g: &mut Graph<'_, T>, template: Var, search: Var) -> Result<Var> {
        self.check_regions(g, template, search)?;
        let bb = &self.backbone;
        let ft = self.patch_embed(g, template, bb.pos_template)?;
        let fs = self.patch_embed(g, search, bb.pos_search)?;
        let mut x = g.concat(&[ft, fs], 1)?;
        let (ti, tv) = self.region_prompts(g, template, self.cfg.template_tokens())?;
        let (si, sv) = self.region_prompts(g, search, self.cfg.search_tokens())?;
        let mut illu = PromptTokens { tokens: g.concat(&[ti, si], 1)?, kind: PromptKind::Illumination, block_index: 0 };
        let mut view = PromptTokens { tokens: g.concat(&[tv, sv], 1)?, kind: PromptKind::Viewpoint, block_index: 0 };
        for blk in &bb.blocks {
            (x, illu, view) = blk.forward(g, x, illu, view)?;
        }
        bb.norm.forward(g, x)
    }

    /// The same backbone with prompters and interaction units left out.
    pub fn backbone_forward_plain<T: Real>(&self, g: &mut Graph<'_, T>, template: Var, search: Var) -> Result<Var> {
        self.check_regions(g, template, search)?;
        let bb = &self.backbone;
        let ft = self.patch_embed(g, template, bb.pos_template)?;
        let fs = self.patch_embed(g, search, bb.pos_search)?;
        let mut x = g.concat(&[ft, fs], 1)?;
        for blk in &bb.blocks {
            x = blk.forward_plain(g, x)?;
        }
        bb.norm.forward(g, x)
    }

    /// Head over the search tokens of `tokens[B, Nt + Ns, d]`.
    pub fn head_forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<HeadOutput> {
        let (nt, ns, gs, d) = (self.cfg.template_tokens(), self.cfg.search_tokens(), self.cfg.grid(), self.cfg.embed_dim);
        let b = g.shape(tokens)[0];
        let x = g.slice(tokens, 1, nt, ns)?;
        let x = g.reshape(x, &[b, gs, gs, d])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        let branch = |g: &mut Graph<'_, T>, convs: &[Conv2d; 2]| -> Result<Var> {
            let h = convs[0].forward(g, x)?;
            let h = g.gelu(h)?;
            convs[1].forward(g, h)
        };
        let center_logits = branch(g, &self.head.center)?;
        let center = g.sigmoid(center_logits)?;
        let size = branch(g, &self.head.size)?;
        let size = g.sigmoid(size)?;
        let offset = branch(g, &self.head.offset)?;
        Ok(HeadOutput { center_logits, center, size, offset })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, template: Var, search: Var) -> Result<HeadOutput> {
        let tokens = self.backbone_forward(g, template, search)?;
        self.head_forward(g, tokens)
    }

    pub fn forward_plain<T: Real>(&self, g: &mut Graph<'_, T>, template: Var, search: Var) -> Result<HeadOutput> {
        let tokens = self.backbone_forward_plain(g, template, search)?;
        self.head_forward(g, tokens)
    }
}
