//! Renders the attention heatmap and crop box for a few synthetic images.
//!
//! `cargo run --release --example visualize -- [model.aftk] [out_dir]`

use std::path::PathBuf;

use aftrans::cli::{draw_box, heat_map, overlay};
use aftrans::pipeline::{generate_synthetic_dataset, infer, load_checkpoint, write_ppm, Model, SyntheticSpec};
use aftrans::vit::{Branch, ModelConfig};

fn main() -> aftrans::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next().filter(|a| a != "-") {
        Some(path) => load_checkpoint::<f32>(path.as_ref())?.model,
        None => Model::init(ModelConfig::default(), 0)?,
    };
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "visualize_out".into()));
    std::fs::create_dir_all(&out_dir)?;

    let cfg = &model.cfg;
    let spec = SyntheticSpec {
        seed: 3,
        num_classes: cfg.num_classes,
        per_class: 1,
    };
    let side = cfg.tokens_per_side(Branch::Global);
    for sample in &generate_synthetic_dataset(&spec, cfg)? {
        let inf = infer(&model, &sample.image)?;
        let heat = heat_map(&inf.class_row, side, cfg.patch_size, cfg.stride, cfg.image_size_global);
        let glyph = sample.glyph_box.expect("synthetic sample");
        let boxed = draw_box(&overlay(&sample.image, &heat)?, &inf.region.rect(), 1)?;
        let path = out_dir.join(format!("class{}.ppm", sample.label));
        write_ppm(&path, &boxed)?;
        println!(
            "{}: predicted {}, box IoU with glyph {:.3}",
            path.display(),
            inf.predicted,
            inf.region.iou(&glyph)
        );
    }
    Ok(())
}
