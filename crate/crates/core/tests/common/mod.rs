//! Oracles shared by the integration tests.
#![allow(dead_code)]

use aftrans::numerics::{PixelRect, Tensor};
use aftrans::pipeline::{compute_gradients, compute_loss, Model, Sample};
use aftrans::vit::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Micro configuration for gradient checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size_global: 16,
        image_size_local: 8,
        patch_size: 8,
        stride: 8,
        channels: 3,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// Model with every parameter drawn from U(-0.5, 0.5), norm gains shifted
/// to sit around 1.
pub fn randomized_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    model.params.visit_mut(|name, t| {
        let offset = if name.contains("gain") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5) + offset;
        }
    });
    model
}

pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences on every scalar of every parameter, with the crops
/// held at the ones the analytic pass used.
pub fn finite_difference_check(model: &Model<f64>, batch: &[Sample], h: f64) -> GradReport {
    let (_, grads, crops) = compute_gradients(model, batch, None).unwrap();
    let crops: Vec<PixelRect> = crops;
    let names = model.params.names();
    let analytic: Vec<&Tensor<f64>> = grads.slots();
    let mut probe = model.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (k, name) in names.iter().enumerate() {
        for i in 0..analytic[k].len() {
            let original = probe.params.slots()[k].data()[i];
            probe.params.slots_mut()[k].data_mut()[i] = original + h;
            let plus = compute_loss(&probe, batch, Some(&crops)).unwrap().total;
            probe.params.slots_mut()[k].data_mut()[i] = original - h;
            let minus = compute_loss(&probe, batch, Some(&crops)).unwrap().total;
            probe.params.slots_mut()[k].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
            report.checked += 1;
        }
    }
    report
}

/// Largest 4-connected component by recursive flood fill from every cell in
/// index order; the first component found wins a size tie.
pub fn flood_fill_lcc(cells: &[bool], side: usize) -> Vec<usize> {
    fn fill(cells: &[bool], side: usize, label: &mut [Option<usize>], i: usize, id: usize, out: &mut Vec<usize>) {
        if !cells[i] || label[i].is_some() {
            return;
        }
        label[i] = Some(id);
        out.push(i);
        let (r, c) = (i / side, i % side);
        if r > 0 {
            fill(cells, side, label, i - side, id, out);
        }
        if r + 1 < side {
            fill(cells, side, label, i + side, id, out);
        }
        if c > 0 {
            fill(cells, side, label, i - 1, id, out);
        }
        if c + 1 < side {
            fill(cells, side, label, i + 1, id, out);
        }
    }
    let mut label = vec![None; cells.len()];
    let mut best: Vec<usize> = Vec::new();
    for i in 0..cells.len() {
        let mut comp = Vec::new();
        fill(cells, side, &mut label, i, i, &mut comp);
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Bounding box of the union of windows, straight from the definition:
/// scan every pixel and keep those inside any window.
pub fn window_union_box(patches: &[usize], side: usize, patch: usize, stride: usize, size: usize) -> PixelRect {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in patches {
        let (top, left) = ((p / side) * stride, (p % side) * stride);
        for y in top..(top + patch).min(size) {
            for x in left..(left + patch).min(size) {
                r0 = r0.min(y);
                c0 = c0.min(x);
                r1 = r1.max(y + 1);
                c1 = c1.max(x + 1);
            }
        }
    }
    PixelRect {
        row_min: r0,
        col_min: c0,
        row_max: r1,
        col_max: c1,
    }
}
