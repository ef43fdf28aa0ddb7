//! Box size and accuracy as the selection ratio λ varies.
//!
//! `cargo run --release --example sweep_lambda -- [model.aftk]`

use aftrans::cli::sweep_lambda;
use aftrans::pipeline::{generate_synthetic_dataset, load_checkpoint, Model, SyntheticSpec};
use aftrans::vit::ModelConfig;

fn main() -> aftrans::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint::<f32>(path.as_ref())?.model,
        None => Model::init(ModelConfig::default(), 0)?,
    };
    let spec = SyntheticSpec {
        seed: 2,
        num_classes: model.cfg.num_classes,
        per_class: 16,
    };
    let samples = generate_synthetic_dataset(&spec, &model.cfg)?;
    let rows = sweep_lambda(&model, &samples, &[0.1, 0.2, 0.3, 0.4, 0.5])?;
    println!("lambda    m  mean_area  acc_global  acc_local  mean_iou");
    for r in rows {
        println!(
            "{:6.2} {:4} {:10.1} {:11.3} {:10.3} {:9.3}",
            r.lambda,
            r.selection_count,
            r.mean_box_area,
            r.acc_global,
            r.acc_local,
            r.mean_iou.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
