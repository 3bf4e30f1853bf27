use crate::bbox::BBox;
use crate::graph::Graph;
use crate::tensor::Real;

use super::HeadOutput;

/// Head maps of one batch item, in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub grid: usize,
    /// `[g, g]` in `(0, 1)`.
    pub center: Vec<f64>,
    /// `[2, g, g]`: normalized width then height.
    pub size: Vec<f64>,
    /// `[2, g, g]`: x then y offset inside the cell.
    pub offset: Vec<f64>,
}

impl HeadMaps {
    pub fn from_output<T: Real>(g: &Graph<'_, T>, out: &HeadOutput, item: usize) -> Self {
        let grid = g.shape(out.center)[2];
        let plane = grid * grid;
        let take = |v, ch: usize| -> Vec<f64> {
            g.value(v)[item * ch * plane..(item + 1) * ch * plane].iter().map(|x: &T| x.to_f64()).collect()
        };
        Self { grid, center: take(out.center, 1), size: take(out.size, 2), offset: take(out.offset, 2) }
    }

    /// Maps that decode to `bbox` exactly: a one-hot center at the cell
    /// holding the box center, with that cell's offset and size.
    pub fn encode(bbox: &BBox, grid: usize, patch_size: usize, search_size: usize) -> Self {
        let plane = grid * grid;
        let (cx, cy) = bbox.center();
        let (gx, gy) = (cx / patch_size as f64, cy / patch_size as f64);
        let (col, row) = (gx.floor() as usize, gy.floor() as usize);
        let cell = row * grid + col;
        let mut maps = Self {
            grid,
            center: vec![0.0; plane],
            size: vec![0.0; 2 * plane],
            offset: vec![0.0; 2 * plane],
        };
        maps.center[cell] = 1.0;
        maps.size[cell] = bbox.w / search_size as f64;
        maps.size[plane + cell] = bbox.h / search_size as f64;
        maps.offset[cell] = gx - col as f64;
        maps.offset[plane + cell] = gy - row as f64;
        maps
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax_cell(center: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in center.iter().enumerate() {
        if v > center[best] {
            best = i;
        }
    }
    best
}

/// Box in search-region pixels from the strongest center cell:
/// center `(cell + offset) * patch_size`, size `size_map * search_size`.
pub fn decode_box(maps: &HeadMaps, patch_size: usize, search_size: usize) -> BBox {
    let plane = maps.grid * maps.grid;
    let cell = argmax_cell(&maps.center);
    let (row, col) = (cell / maps.grid, cell % maps.grid);
    let ps = patch_size as f64;
    let s = search_size as f64;
    let cx = (col as f64 + maps.offset[cell]) * ps;
    let cy = (row as f64 + maps.offset[plane + cell]) * ps;
    BBox::from_center(cx, cy, maps.size[cell] * s, maps.size[plane + cell] * s)
}
