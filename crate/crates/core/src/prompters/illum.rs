use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::nn::Conv2d;
use crate::params::{Builder, ParamId};
use crate::tensor::{Real, Tensor};

pub const BLUR_KERNEL: usize = 5;
pub const BLUR_SIGMA: f64 = 1.0;
pub const UP_KERNEL: usize = 4;

/// Normalized 1-D Gaussian taps of length [`BLUR_KERNEL`].
pub fn gaussian_taps() -> [f64; BLUR_KERNEL] {
    let r = (BLUR_KERNEL / 2) as f64;
    let mut t = [0.0; BLUR_KERNEL];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Taps of 2x linear upsampling with half-pixel centers.
pub const BILINEAR_TAPS: [f64; UP_KERNEL] = [0.25, 0.75, 0.75, 0.25];

fn outer_kernel<T: Real>(channels: usize, taps: &[f64]) -> Tensor<T> {
    let k = taps.len();
    Tensor::from_fn(&[channels, 1, k, k], |i| {
        let (ky, kx) = ((i / k) % k, i % k);
        T::lit(taps[ky] * taps[kx])
    })
}

/// Gaussian and Laplacian levels of one image batch, as graph nodes.
#[derive(Clone, Debug)]
pub struct PyramidLevels {
    /// `G_0` (the input) through `G_n`.
    pub gaussians: Vec<Var>,
    /// `L_0` through `L_{n-1}`.
    pub laplacians: Vec<Var>,
    pub n_levels: usize,
}

/// Learnable Laplacian-pyramid prompter.
///
/// Downsampling is a depthwise 5x5 stride-2 blur, upsampling a depthwise 4x4
/// stride-2 transposed conv. Both read edge-replicated input so a constant
/// image stays constant at every level.
#[derive(Clone, Debug)]
pub struct IllumPrompter {
    pub blur: Vec<ParamId>,
    pub up: Vec<ParamId>,
    pub level_convs: Vec<Conv2d>,
    pub n_levels: usize,
    pub channels: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl IllumPrompter {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        n_levels: usize,
        width: usize,
        patch_size: usize,
    ) -> Result<Self> {
        if n_levels == 0 || patch_size % (1 << (n_levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "patch size {patch_size} must be divisible by 2^(n_levels-1) for {n_levels} levels"
            )));
        }
        let taps = gaussian_taps();
        let mut s = b.scope("illum");
        let mut blur = Vec::new();
        let mut up = Vec::new();
        let mut level_convs = Vec::new();
        for i in 0..n_levels {
            blur.push(s.param(&format!("blur.{i}"), outer_kernel(channels, &taps)));
            up.push(s.param(&format!("up.{i}"), outer_kernel(channels, &BILINEAR_TAPS)));
            let k = patch_size >> i;
            let opts = ConvOpts::new(k, 0);
            level_convs.push(Conv2d::new(&mut s, &format!("level.{i}"), channels, width, k, opts, true));
        }
        Ok(Self { blur, up, level_convs, n_levels, channels, width, patch_size })
    }

    pub fn out_channels(&self) -> usize {
        self.n_levels * self.width
    }

    /// `G_0 = image`, `G_{i+1} = blur_i(G_i)` at half resolution.
    pub fn gaussian_levels<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        let div = 1usize << self.n_levels;
        if s.len() != 4 || s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "pyramid input {s:?} must be [B,C,H,W] with H and W divisible by {div}"
            )));
        }
        let opts = ConvOpts::new(2, 0).groups(self.channels);
        let mut levels = vec![image];
        for &k in &self.blur {
            let prev = *levels.last().unwrap();
            let padded = g.pad_replicate(prev, BLUR_KERNEL / 2)?;
            let w = g.param(k);
            levels.push(g.conv2d(padded, w, None, opts)?);
        }
        Ok(levels)
    }

    /// `UP_i(G_{i+1})`, back at the resolution of `G_i`.
    pub fn upsample<T: Real>(&self, g: &mut Graph<'_, T>, level: usize, coarse: Var) -> Result<Var> {
        let padded = g.pad_replicate(coarse, 1)?;
        let w = g.param(self.up[level]);
        g.conv_transpose2d(padded, w, None, ConvOpts::new(2, 3).groups(self.channels))
    }

    /// `L_i = G_i - UP_i(G_{i+1})`.
    pub fn laplacian_levels<T: Real>(&self, g: &mut Graph<'_, T>, gaussians: &[Var]) -> Result<Vec<Var>> {
        if gaussians.len() != self.n_levels + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} gaussian levels, got {}",
                self.n_levels + 1,
                gaussians.len()
            )));
        }
        (0..self.n_levels)
            .map(|i| {
                let up = self.upsample(g, i, gaussians[i + 1])?;
                g.sub(gaussians[i], up)
            })
            .collect()
    }

    pub fn pyramid<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<PyramidLevels> {
        let gaussians = self.gaussian_levels(g, image)?;
        let laplacians = self.laplacian_levels(g, &gaussians)?;
        Ok(PyramidLevels { gaussians, laplacians, n_levels: self.n_levels })
    }

    /// Each `L_i` strided onto the patch grid and concatenated channel-wise:
    /// `[B, n_levels * width, H/ps, W/ps]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let levels = self.pyramid(g, image)?;
        let maps = levels
            .laplacians
            .iter()
            .zip(&self.level_convs)
            .map(|(&l, conv)| conv.forward(g, l))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&maps, 1)
    }
}
