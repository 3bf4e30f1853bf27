//! Illumination and viewpoint prompters: image region in, token stream out.

mod illum;
mod view;

pub use illum::{gaussian_taps, IllumPrompter, PyramidLevels, BILINEAR_TAPS, BLUR_KERNEL, BLUR_SIGMA, UP_KERNEL};
pub use view::{ViewPrompter, DEFORM_KERNEL, DEFORM_TAPS, LEAKY_SLOPE};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Illumination,
    Viewpoint,
}

/// One prompt stream `[B, N, d]` as it enters or leaves block `block_index`.
#[derive(Clone, Copy, Debug)]
pub struct PromptTokens {
    pub tokens: Var,
    pub kind: PromptKind,
    pub block_index: usize,
}

/// Flatten a prompt map `[B, C, h, w]` to rows in patch order and project
/// each row `C -> d`. Returns `[B, h*w, d]`.
pub fn tokenize_prompt<T: Real>(
    g: &mut Graph<'_, T>,
    map: Var,
    proj: &Linear,
    expected_tokens: usize,
) -> Result<Var> {
    g.expect_rank("tokenize_prompt", map, 4)?;
    let s = g.shape(map).to_vec();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    if n != expected_tokens {
        return Err(shape_err(
            "tokenize_prompt",
            format!("prompt grid {}x{} gives {n} tokens, backbone region has {expected_tokens}", s[2], s[3]),
        ));
    }
    let x = g.permute(map, &[0, 2, 3, 1])?;
    let x = g.reshape(x, &[b, n, c])?;
    proj.forward(g, x)
}
