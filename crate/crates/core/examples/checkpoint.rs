//! Saves a model with its optimizer state, reloads it, and checks that
//! nothing moved by a single bit.
//!
//! `cargo run --release --example checkpoint -- [path]`

use aftrans::pipeline::{
    generate_synthetic_dataset, infer, load_checkpoint, save_checkpoint, Model, SyntheticSpec, TrainOptions, Trainer,
};
use aftrans::vit::ModelConfig;

fn main() -> aftrans::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "example.aftk".into());
    let cfg = ModelConfig::default();
    let spec = SyntheticSpec {
        seed: 4,
        num_classes: cfg.num_classes,
        per_class: 4,
    };
    let samples = generate_synthetic_dataset(&spec, &cfg)?;
    let options = TrainOptions {
        epochs: 1,
        batch_size: 8,
        ..TrainOptions::default()
    };
    let mut trainer = Trainer::new(Model::<f32>::init(cfg, 0)?, options, samples.len())?;
    trainer.fit(&samples, |_| Ok(()))?;

    save_checkpoint(path.as_ref(), &trainer.model, Some(&trainer.opt))?;
    let bytes = std::fs::metadata(&path)?.len();
    let restored = load_checkpoint::<f32>(path.as_ref())?;
    let opt = restored.optimizer.expect("optimizer state was saved");
    println!("{path}: {bytes} bytes, optimizer at step {}", opt.step_index);

    assert!(restored.model == trainer.model, "parameters differ after reload");
    let before = infer(&trainer.model, &samples[0].image)?;
    let after = infer(&restored.model, &samples[0].image)?;
    let same = before.global_logits.iter().zip(&after.global_logits).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("logits {:?}, bitwise equal after reload: {same}", after.global_logits);
    Ok(())
}
