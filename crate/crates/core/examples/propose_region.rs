//! Walks one image through region proposal: fused class-token attention,
//! the top-λ selection, its largest component and the crop box.
//!
//! `cargo run --release --example propose_region -- [model.aftk]`

use aftrans::pipeline::{generate_synthetic_dataset, load_checkpoint, Model, SyntheticSpec};
use aftrans::sacm::{largest_connected_component, propose_region, select_tokens};
use aftrans::vit::{Branch, ModelConfig};

fn main() -> aftrans::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint::<f32>(path.as_ref())?.model,
        None => Model::init(ModelConfig::default(), 0)?,
    };
    let cfg = &model.cfg;
    let spec = SyntheticSpec {
        seed: 7,
        num_classes: cfg.num_classes,
        per_class: 1,
    };
    let sample = generate_synthetic_dataset(&spec, cfg)?.remove(0);

    let out = model.vit().forward(&[&sample.image], Branch::Global)?;
    let (region, fused) = propose_region(&out[0].attention, &model.gates, cfg)?;

    let side = cfg.tokens_per_side(Branch::Global);
    println!("gates {:?}", fused.gates_f64());
    println!("class-token attention on the {side}x{side} window grid (x = selected, # = kept component):");
    let max = fused.class_row.iter().cloned().fold(f32::MIN, f32::max);
    let grid = select_tokens(&fused.class_row, side, cfg.lambda_thresh)?;
    let kept = largest_connected_component(&grid)?;
    for r in 0..side {
        let line: String = (0..side)
            .map(|c| {
                let i = r * side + c;
                let mark = if kept.contains(&i) {
                    '#'
                } else if region.selected_patches.contains(&i) {
                    'x'
                } else {
                    '.'
                };
                format!("{:4.2}{mark} ", fused.class_row[i] / max)
            })
            .collect();
        println!("  {line}");
    }
    let glyph = sample.glyph_box.expect("synthetic sample");
    println!(
        "{} selected, component of {}, box rows [{}, {}) cols [{}, {})",
        region.selected_patches.len(),
        region.component_size,
        region.row_min,
        region.row_max,
        region.col_min,
        region.col_max
    );
    println!("glyph at {glyph:?}, IoU {:.3}", region.iou(&glyph));
    Ok(())
}
