//! Channel-first image resampling.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Half-open pixel rectangle `[row_min, row_max) × [col_min, col_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl PixelRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: height,
            col_max: width,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max.saturating_sub(self.row_min)
    }

    pub fn width(&self) -> usize {
        self.col_max.saturating_sub(self.col_min)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn clamp_to(&self, height: usize, width: usize) -> Self {
        Self {
            row_min: self.row_min.min(height),
            col_min: self.col_min.min(width),
            row_max: self.row_max.min(height),
            col_max: self.col_max.min(width),
        }
    }

    pub fn intersection(&self, other: &Self) -> usize {
        let rows = self.row_max.min(other.row_max).saturating_sub(self.row_min.max(other.row_min));
        let cols = self.col_max.min(other.col_max).saturating_sub(self.col_min.max(other.col_min));
        rows * cols
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Bilinear resampling with half-pixel centres: output pixel `i` samples
/// source coordinate `(i + 0.5)·in/out − 0.5`, clamped to the image.
pub fn bilinear_resize<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (channels, in_h, in_w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input(format!("resize to {out_h}x{out_w}")));
    }
    if in_h == 0 || in_w == 0 {
        return Err(Error::Input(format!("resize of an empty {in_h}x{in_w} image")));
    }
    if in_h == out_h && in_w == out_w {
        return Ok(image.clone());
    }
    let rows = sample_axis(in_h, out_h);
    let cols = sample_axis(in_w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = lerp(plane[r0 * in_w + c0], plane[r0 * in_w + c1], fc);
                let bottom = lerp(plane[r1 * in_w + c0], plane[r1 * in_w + c1], fc);
                out.push(lerp(top, bottom, fr));
            }
        }
    }
    Tensor::new(vec![channels, out_h, out_w], out)
}

fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// For each output index: (low source index, high source index, weight of high).
fn sample_axis<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::from_f64_lossy(x - lo as f64))
        })
        .collect()
}

/// Copies the pixels inside `rect`. The rectangle is clamped to the image
/// first; if nothing is left the whole image is returned.
pub fn crop<T: Scalar>(image: &Tensor<T>, rect: &PixelRect) -> Result<Tensor<T>> {
    let (channels, h, w) = image.dims3()?;
    let mut r = rect.clamp_to(h, w);
    if r.height() == 0 || r.width() == 0 {
        r = PixelRect::full(h, w);
    }
    let mut out = Vec::with_capacity(channels * r.area());
    for c in 0..channels {
        for y in r.row_min..r.row_max {
            let start = (c * h + y) * w;
            out.extend_from_slice(&image.data()[start + r.col_min..start + r.col_max]);
        }
    }
    Tensor::new(vec![channels, r.height(), r.width()], out)
}
