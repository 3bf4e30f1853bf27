use crate::error::Result;
use crate::graph::{ConvOpts, Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::params::Builder;
use crate::tensor::{Real, Tensor};

pub const DEFORM_KERNEL: usize = 3;
/// Sampling taps of the deformable kernel.
pub const DEFORM_TAPS: usize = DEFORM_KERNEL * DEFORM_KERNEL;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Deformable-convolution prompter.
///
/// A coarse conv/BN/LeakyReLU map predicts per-pixel sampling offsets; a
/// deformable 3x3 conv resamples the coarse map along them, and a stride-`ps`
/// conv moves the result onto the patch grid.
#[derive(Clone, Debug)]
pub struct ViewPrompter {
    pub coarse_conv: Conv2d,
    pub coarse_bn: BatchNorm2d,
    pub offset_conv: Conv2d,
    pub deform_weight: crate::params::ParamId,
    pub out_bn: BatchNorm2d,
    pub grid_conv: Conv2d,
    pub leaky_slope: f64,
    pub hidden: usize,
    pub out_channels: usize,
}

impl ViewPrompter {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        hidden: usize,
        out_channels: usize,
        patch_size: usize,
    ) -> Self {
        let mut s = b.scope("view");
        let same = ConvOpts::new(1, DEFORM_KERNEL / 2);
        let coarse_conv = Conv2d::new(&mut s, "coarse_conv", channels, hidden, 3, same, false);
        let coarse_bn = BatchNorm2d::new(&mut s, "coarse_bn", hidden);
        let offset_conv = Conv2d::with_weight(
            &mut s,
            "offset_conv",
            Tensor::zeros(&[2 * DEFORM_TAPS, hidden, DEFORM_KERNEL, DEFORM_KERNEL]),
            same,
            true,
        );
        let fan_in = hidden * DEFORM_TAPS;
        let deform_weight =
            s.fan_in_uniform("deform_weight", &[hidden, hidden, DEFORM_KERNEL, DEFORM_KERNEL], fan_in);
        let out_bn = BatchNorm2d::new(&mut s, "out_bn", hidden);
        let grid = ConvOpts::new(patch_size, 0);
        let grid_conv = Conv2d::new(&mut s, "grid_conv", hidden, out_channels, patch_size, grid, true);
        Self {
            coarse_conv,
            coarse_bn,
            offset_conv,
            deform_weight,
            out_bn,
            grid_conv,
            leaky_slope: LEAKY_SLOPE,
            hidden,
            out_channels,
        }
    }

    /// `LeakyReLU(BN(conv(image)))`.
    pub fn coarse<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let x = self.coarse_conv.forward(g, image)?;
        let x = self.coarse_bn.forward(g, x)?;
        g.leaky_relu(x, self.leaky_slope)
    }

    /// Offset field `[B, 2K, H, W]`, channels `(dy_1, dx_1, ..., dy_K, dx_K)`.
    pub fn offsets<T: Real>(&self, g: &mut Graph<'_, T>, coarse: Var) -> Result<Var> {
        self.offset_conv.forward(g, coarse)
    }

    pub fn deform<T: Real>(&self, g: &mut Graph<'_, T>, coarse: Var, offsets: Var) -> Result<Var> {
        let w = g.param(self.deform_weight);
        g.deform_conv2d(coarse, offsets, w, None)
    }

    fn finish<T: Real>(&self, g: &mut Graph<'_, T>, r: Var) -> Result<Var> {
        let x = self.out_bn.forward(g, r)?;
        let x = g.leaky_relu(x, self.leaky_slope)?;
        self.grid_conv.forward(g, x)
    }

    /// Prompt map `[B, out_channels, H/ps, W/ps]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let coarse = self.coarse(g, image)?;
        let offsets = self.offsets(g, coarse)?;
        let r = self.deform(g, coarse, offsets)?;
        self.finish(g, r)
    }

    /// The same pipeline with an ordinary 3x3 conv in place of the
    /// deformable one.
    pub fn forward_rigid<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let coarse = self.coarse(g, image)?;
        let w = g.param(self.deform_weight);
        let r = g.conv2d(coarse, w, None, ConvOpts::new(1, DEFORM_KERNEL / 2))?;
        self.finish(g, r)
    }
}
