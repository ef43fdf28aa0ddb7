//! One checkpoint, every way of building the proposal: the gated fusion,
//! each layer alone, the ungated sum, and both box rules.
//!
//! `cargo run --release --example fusion_ablation -- [model.aftk]`

use aftrans::pipeline::{evaluate, generate_synthetic_dataset, load_checkpoint, Model, SyntheticSpec};
use aftrans::vit::{BoxMode, FusionMode, ModelConfig};

fn main() -> aftrans::Result<()> {
    let base = match std::env::args().nth(1) {
        Some(path) => load_checkpoint::<f32>(path.as_ref())?.model,
        None => Model::init(ModelConfig::default(), 0)?,
    };
    let spec = SyntheticSpec {
        seed: 2,
        num_classes: base.cfg.num_classes,
        per_class: 16,
    };
    let samples = generate_synthetic_dataset(&spec, &base.cfg)?;

    let mut fusions = vec![FusionMode::Fused, FusionMode::NoGate];
    fusions.extend((0..base.cfg.num_layers).map(FusionMode::SingleLayer));
    println!("{:>10} {:>8} {:>9} {:>9} {:>9}", "fusion", "box", "acc_local", "mean_iou", "hit_rate");
    for fusion in fusions {
        for box_mode in [BoxMode::Lcc, BoxMode::ExtremeValues] {
            let mut model = base.clone();
            model.cfg.fusion_mode = fusion;
            model.cfg.box_mode = box_mode;
            let m = evaluate(&model, &samples)?;
            println!(
                "{:>10} {:>8} {:9.3} {:9.3} {:9.3}",
                fusion.to_string(),
                box_mode.to_string(),
                m.acc_local,
                m.mean_iou.unwrap_or(f64::NAN),
                m.hit_rate.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
