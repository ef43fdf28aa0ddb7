use crate::error::Result;
use crate::numerics::{PixelRect, Tensor};

/// Per-pixel mean of the scores of every window covering it, divided by the
/// largest such mean. Pixels past the last window copy the nearest covered one.
pub fn heat_map(scores: &[f64], side: usize, patch: usize, stride: usize, size: usize) -> Vec<f64> {
    let mut sum = vec![0.0; size * size];
    let mut cover = vec![0u32; size * size];
    for (i, &v) in scores.iter().enumerate().take(side * side) {
        let (r, c) = (i / side, i % side);
        for y in r * stride..(r * stride + patch).min(size) {
            for x in c * stride..(c * stride + patch).min(size) {
                sum[y * size + x] += v;
                cover[y * size + x] += 1;
            }
        }
    }
    let covered = (side.saturating_sub(1) * stride + patch).min(size).max(1);
    let mut heat: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size).min(covered - 1), (i % size).min(covered - 1));
            let j = y * size + x;
            if cover[j] == 0 {
                0.0
            } else {
                sum[j] / cover[j] as f64
            }
        })
        .collect();
    let max = heat.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|h| *h /= max);
    }
    heat
}

fn gray(image: &Tensor<f32>) -> Result<(Vec<f32>, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    let d = image.data();
    let g = (0..h * w)
        .map(|i| (0..c).map(|k| d[k * h * w + i]).sum::<f32>() / c as f32)
        .collect();
    Ok((g, h, w))
}

/// Grayscale image tinted toward red by `heat` in `[0, 1]`.
pub fn overlay(image: &Tensor<f32>, heat: &[f64]) -> Result<Tensor<f32>> {
    let (g, h, w) = gray(image)?;
    let n = h * w;
    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        let t = heat[i] as f32;
        out[i] = g[i] + (1.0 - g[i]) * t;
        out[n + i] = g[i] * (1.0 - t);
        out[2 * n + i] = g[i] * (1.0 - t);
    }
    Tensor::new(vec![3, h, w], out)
}

/// RGB copy of `image` with a red outline of `thickness` px inside `rect`.
pub fn draw_box(image: &Tensor<f32>, rect: &PixelRect, thickness: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    let n = h * w;
    let d = image.data();
    let mut out: Vec<f32> = (0..3).flat_map(|k| d[(k % c) * n..(k % c) * n + n].to_vec()).collect();
    let r = rect.clamp_to(h, w);
    for y in r.row_min..r.row_max {
        for x in r.col_min..r.col_max {
            let edge = y < r.row_min + thickness
                || y + thickness >= r.row_max
                || x < r.col_min + thickness
                || x + thickness >= r.col_max;
            if edge {
                let i = y * w + x;
                out[i] = 1.0;
                out[n + i] = 0.0;
                out[2 * n + i] = 0.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}
