use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

use super::HeadOutput;

pub const HEATMAP_SIGMA: f64 = 1.0;
pub const L1_WEIGHT: f64 = 5.0;
pub const IOU_WEIGHT: f64 = 2.0;

/// Gaussian target `[g, g]` centered on the box center in cell units, where
/// cell `(r, c)` has its center at `(r + 0.5, c + 0.5)`.
pub fn target_heatmap(gt: &BBox, grid: usize, patch_size: usize) -> Vec<f64> {
    let (cx, cy) = gt.center();
    let (gx, gy) = (cx / patch_size as f64, cy / patch_size as f64);
    let s2 = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
    (0..grid * grid)
        .map(|i| {
            let (r, c) = ((i / grid) as f64 + 0.5, (i % grid) as f64 + 0.5);
            (-((c - gx).powi(2) + (r - gy).powi(2)) / s2).exp()
        })
        .collect()
}

/// Cell containing the box center as `(row, col)`, or an error when the
/// center lies outside the search region.
pub fn gt_cell(gt: &BBox, grid: usize, patch_size: usize) -> Result<(usize, usize)> {
    let (cx, cy) = gt.center();
    let side = (grid * patch_size) as f64;
    if !gt.is_finite() || gt.w <= 0.0 || gt.h <= 0.0 || !(0.0..side).contains(&cx) || !(0.0..side).contains(&cy) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth box {gt:?} is not centered inside the {side}x{side} search region"
        )));
    }
    Ok(((cy / patch_size as f64) as usize, (cx / patch_size as f64) as usize))
}

/// Batch mean of
/// `BCE(center, heatmap) + 5 * L1(size, offset at gt cell) + 2 * (1 - IoU)`,
/// where the IoU compares the box decoded at the gt cell with the gt box.
pub fn tracking_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &HeadOutput,
    gts: &[BBox],
    patch_size: usize,
    search_size: usize,
) -> Result<Var> {
    let s = g.shape(out.center_logits).to_vec();
    let (b, grid) = (s[0], s[2]);
    if gts.len() != b {
        return Err(Error::InvalidArgument(format!("{} boxes for a batch of {b}", gts.len())));
    }
    let plane = grid * grid;
    let ps = patch_size as f64;
    let side = search_size as f64;
    let mut heat = Vec::with_capacity(b * plane);
    let (mut idx_w, mut idx_h, mut idx_x, mut idx_y) = (vec![], vec![], vec![], vec![]);
    let (mut t_w, mut t_h, mut t_x, mut t_y, mut cols, mut rows) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (i, gt) in gts.iter().enumerate() {
        let (r, c) = gt_cell(gt, grid, patch_size)?;
        heat.extend(target_heatmap(gt, grid, patch_size).into_iter().map(T::lit));
        let cell = r * grid + c;
        idx_w.push(2 * i * plane + cell);
        idx_h.push((2 * i + 1) * plane + cell);
        idx_x.push(2 * i * plane + cell);
        idx_y.push((2 * i + 1) * plane + cell);
        let (cx, cy) = gt.center();
        t_w.push(gt.w / side);
        t_h.push(gt.h / side);
        t_x.push(cx / ps - c as f64);
        t_y.push(cy / ps - r as f64);
        cols.push(c as f64);
        rows.push(r as f64);
    }
    let bce = g.bce_with_logits(out.center_logits, &heat)?;

    let vec_const = |g: &mut Graph<'_, T>, v: &[f64]| g.constant(&Tensor::from_fn(&[v.len()], |i| T::lit(v[i])));
    let pw = g.gather(out.size, &idx_w)?;
    let ph = g.gather(out.size, &idx_h)?;
    let ox = g.gather(out.offset, &idx_x)?;
    let oy = g.gather(out.offset, &idx_y)?;

    let mut l1 = Vec::new();
    for (p, t) in [(pw, &t_w), (ph, &t_h), (ox, &t_x), (oy, &t_y)] {
        let t = vec_const(g, t);
        let d = g.sub(p, t)?;
        let d = g.abs(d)?;
        l1.push(g.sum(d)?);
    }
    let l1 = l1.into_iter().try_fold(None, |acc: Option<Var>, v| -> Result<Option<Var>> {
        Ok(Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        }))
    })?;
    let l1 = l1.expect("four terms");

    // Decoded box at the gt cell, in pixels.
    let col_c = vec_const(g, &cols);
    let row_c = vec_const(g, &rows);
    let pcx = g.add(ox, col_c)?;
    let pcx = g.mul_const(pcx, ps)?;
    let pcy = g.add(oy, row_c)?;
    let pcy = g.mul_const(pcy, ps)?;
    let pw_px = g.mul_const(pw, side)?;
    let ph_px = g.mul_const(ph, side)?;
    let half_w = g.mul_const(pw_px, 0.5)?;
    let half_h = g.mul_const(ph_px, 0.5)?;
    let px1 = g.sub(pcx, half_w)?;
    let px2 = g.add(pcx, half_w)?;
    let py1 = g.sub(pcy, half_h)?;
    let py2 = g.add(pcy, half_h)?;
    let gx1 = vec_const(g, &gts.iter().map(|b| b.x).collect::<Vec<_>>());
    let gx2 = vec_const(g, &gts.iter().map(|b| b.right()).collect::<Vec<_>>());
    let gy1 = vec_const(g, &gts.iter().map(|b| b.y).collect::<Vec<_>>());
    let gy2 = vec_const(g, &gts.iter().map(|b| b.bottom()).collect::<Vec<_>>());
    let garea = vec_const(g, &gts.iter().map(|b| b.area()).collect::<Vec<_>>());
    let overlap = |g: &mut Graph<'_, T>, a1: Var, a2: Var, b1: Var, b2: Var| -> Result<Var> {
        let hi = g.minimum(a2, b2)?;
        let lo = g.maximum(a1, b1)?;
        let d = g.sub(hi, lo)?;
        g.relu(d)
    };
    let iw = overlap(g, px1, px2, gx1, gx2)?;
    let ih = overlap(g, py1, py2, gy1, gy2)?;
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(pw_px, ph_px)?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let iou_sum = g.sum(iou)?;
    // sum(1 - iou) = b - sum(iou)
    let iou_term = g.mul_const(iou_sum, -IOU_WEIGHT)?;
    let iou_term = g.add_const(iou_term, IOU_WEIGHT * b as f64)?;

    let l1 = g.mul_const(l1, L1_WEIGHT)?;
    let reg = g.add(l1, iou_term)?;
    let reg = g.mul_const(reg, 1.0 / b as f64)?;
    g.add(bce, reg)
}
