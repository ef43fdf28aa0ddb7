use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{PixelRect, Scalar};
use crate::vit::selection_count;

/// Square boolean grid over patch windows, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    side: usize,
    cells: Vec<bool>,
}

impl TokenGrid {
    pub fn new(side: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != side * side {
            return Err(Error::dim(format!("{} cells do not form a {side}x{side} grid", cells.len())));
        }
        Ok(Self { side, cells })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.side + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Flat indices of the set cells, ascending.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }
}

/// Indices of the `m` largest scores, equal scores ordered by index.
pub fn select_top<T: Scalar>(scores: &[T], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(m);
    order.sort_unstable();
    order
}

/// Marks the top `min(N, ⌈N·λ⌉)` entries of the class row on the window grid.
pub fn select_tokens<T: Scalar>(class_row: &[T], side: usize, lambda: f64) -> Result<TokenGrid> {
    let n = class_row.len();
    if n == 0 || n != side * side {
        return Err(Error::dim(format!("class row of {n} does not fill a {side}x{side} grid")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config("lambda_thresh", format!("{lambda} is outside (0, 1]")));
    }
    let mut cells = vec![false; n];
    for i in select_top(class_row, selection_count(n, lambda)) {
        cells[i] = true;
    }
    TokenGrid::new(side, cells)
}

/// Largest 4-connected component, ascending flat indices. Equal sizes go to
/// the component holding the smallest index.
pub fn largest_connected_component(grid: &TokenGrid) -> Result<Vec<usize>> {
    let side = grid.side;
    let mut seen = vec![false; grid.cells.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.cells.len() {
        if !grid.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (r, c) = (i / side, i % side);
            let mut visit = |j: usize| {
                if grid.cells[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - side);
            }
            if r + 1 < side {
                visit(i + side);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < side {
                visit(i + 1);
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    if best.is_empty() {
        return Err(Error::Internal("no selected token to form a region".into()));
    }
    best.sort_unstable();
    Ok(best)
}

/// Crop proposal in global-image pixels, half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
    /// Every patch the selection marked.
    pub selected_patches: Vec<usize>,
    /// Patches whose windows span the box.
    pub component_size: usize,
}

impl RegionBox {
    pub fn rect(&self) -> PixelRect {
        PixelRect {
            row_min: self.row_min,
            col_min: self.col_min,
            row_max: self.row_max,
            col_max: self.col_max,
        }
    }

    pub fn area(&self) -> usize {
        self.rect().area()
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        self.rect().iou(other)
    }
}

/// Union of the windows of `patches`, clamped to the image.
pub fn region_to_box(
    patches: &[usize],
    side: usize,
    patch: usize,
    stride: usize,
    height: usize,
    width: usize,
) -> Result<RegionBox> {
    if patches.is_empty() {
        return Err(Error::Internal("empty patch set has no box".into()));
    }
    if let Some(&bad) = patches.iter().find(|&&p| p >= side * side) {
        return Err(Error::dim(format!("patch {bad} outside a {side}x{side} grid")));
    }
    let rows = patches.iter().map(|p| p / side);
    let cols = patches.iter().map(|p| p % side);
    let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
    let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
    let rect = PixelRect {
        row_min: r0 * stride,
        col_min: c0 * stride,
        row_max: r1 * stride + patch,
        col_max: c1 * stride + patch,
    }
    .clamp_to(height, width);
    if rect.area() == 0 {
        return Err(Error::Input(format!("windows fall outside the {height}x{width} image")));
    }
    Ok(RegionBox {
        row_min: rect.row_min,
        col_min: rect.col_min,
        row_max: rect.row_max,
        col_max: rect.col_max,
        selected_patches: patches.to_vec(),
        component_size: patches.len(),
    })
}
