use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::{decode_box, CropWindow, HeadMaps, Tracker};

/// Whether inference runs with the prompt branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Prompted,
    Plain,
}

/// Smallest box side the tracker will report, pixels.
pub const MIN_SIDE: f64 = 2.0;

/// Single-image inference on prepared crops `[3, t, t]` and `[3, s, s]`.
/// Returns the box in search-crop pixels.
pub fn predict(
    model: &Tracker,
    store: &ParamStore<f32>,
    template: &Tensor<f32>,
    search: &Tensor<f32>,
    variant: Variant,
) -> Result<(BBox, HeadMaps)> {
    let cfg = &model.cfg;
    let mut g = Graph::with_params(store, Mode::Eval);
    let mut batch = |t: &Tensor<f32>| -> Result<_> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        Ok(g.constant(&t.clone().reshape(&shape)?))
    };
    let t = batch(template)?;
    let s = batch(search)?;
    let out = match variant {
        Variant::Prompted => model.forward(&mut g, t, s)?,
        Variant::Plain => model.forward_plain(&mut g, t, s)?,
    };
    let maps = HeadMaps::from_output(&g, &out, 0);
    Ok((decode_box(&maps, cfg.patch_size, cfg.search_size), maps))
}

/// One-pass tracking from the first-frame box. The template is cropped once;
/// each search region is centered on the previous estimate.
pub fn track_sequence(
    model: &Tracker,
    store: &ParamStore<f32>,
    frames: &[Tensor<f32>],
    init: BBox,
    variant: Variant,
) -> Result<Vec<BBox>> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("cannot track an empty sequence".into()))?;
    if !(init.w > 0.0 && init.h > 0.0 && init.is_finite()) {
        return Err(Error::InvalidArgument(format!("initial box {init:?} must have positive size")));
    }
    let cfg = &model.cfg;
    let template = CropWindow::for_box(&init, cfg.template_factor, cfg.template_size).sample(first);
    let (fh, fw) = (first.shape()[1] as f64, first.shape()[2] as f64);
    let mut out = vec![init];
    let mut prev = init;
    for frame in &frames[1..] {
        let win = CropWindow::for_box(&prev, cfg.search_factor, cfg.search_size);
        let search = win.sample(frame);
        let (in_crop, _) = predict(model, store, &template, &search, variant)?;
        let b = win.to_frame(&in_crop);
        let (cx, cy) = b.center();
        let next = BBox::from_center(
            cx.clamp(0.0, fw),
            cy.clamp(0.0, fh),
            b.w.clamp(MIN_SIDE, fw),
            b.h.clamp(MIN_SIDE, fh),
        );
        out.push(next);
        prev = next;
    }
    Ok(out)
}
