//! Trains the desk-scale model on generated glyph images and reports
//! accuracy and localization on a held-out split.
//!
//! `cargo run --release --example train_synthetic -- [epochs] [lr] [stop_acc]`
//!
//! A `stop_acc` of 0 trains every epoch.

use aftrans::pipeline::{evaluate, generate_synthetic_dataset, Model, SyntheticSpec, TrainOptions, Trainer};
use aftrans::vit::ModelConfig;

fn main() -> aftrans::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let base_lr = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.01);
    let stop: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.95);

    let cfg = ModelConfig::default();
    let train = generate_synthetic_dataset(&SyntheticSpec { seed: 1, num_classes: 4, per_class: 64 }, &cfg)?;
    let held_out = generate_synthetic_dataset(&SyntheticSpec { seed: 2, num_classes: 4, per_class: 16 }, &cfg)?;

    let options = TrainOptions {
        seed: 0,
        epochs,
        base_lr,
        stop_at_train_acc: (stop > 0.0).then_some(stop),
        ..TrainOptions::default()
    };
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(Model::<f32>::init(cfg, 0)?, options, train.len())?;
    trainer.fit(&train, |m| {
        println!("{}", serde_json::to_string(m)?);
        Ok(())
    })?;
    println!("trained {} epochs in {:.1?}", trainer.epoch, start.elapsed());

    let fit = evaluate(&trainer.model, &train)?;
    let test = evaluate(&trainer.model, &held_out)?;
    println!("train {}", serde_json::to_string(&fit)?);
    println!("held-out {}", serde_json::to_string(&test)?);
    Ok(())
}
