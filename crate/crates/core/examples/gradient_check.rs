//! Central differences against the analytic gradient of the two-branch
//! loss on a tiny model, in f64.
//!
//! `cargo run --release --example gradient_check`

use aftrans::pipeline::{compute_gradients, compute_loss, generate_synthetic_dataset, Model, SyntheticSpec};
use aftrans::vit::ModelConfig;
use rand::{Rng, SeedableRng};

fn main() -> aftrans::Result<()> {
    let cfg = ModelConfig {
        image_size_global: 16,
        image_size_local: 8,
        patch_size: 8,
        stride: 8,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_classes: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::init(cfg.clone(), 1)?;
    // push weights well away from the small init so every path matters
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    model.params.visit_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5)));
    let spec = SyntheticSpec {
        seed: 3,
        num_classes: 2,
        per_class: 1,
    };
    let batch = generate_synthetic_dataset(&spec, &cfg)?[..1].to_vec();

    let (loss, grads, crops) = compute_gradients(&model, &batch, None)?;
    println!("loss {:.6} = {:.6} + {:.6}", loss.total, loss.global, loss.local);
    let h = 1e-4;
    let mut probe = model.clone();
    for (k, (name, g)) in model.params.names().iter().zip(grads.slots()).enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let x = probe.params.slots()[k].data()[i];
            probe.params.slots_mut()[k].data_mut()[i] = x + h;
            let up = compute_loss(&probe, &batch, Some(&crops))?.total;
            probe.params.slots_mut()[k].data_mut()[i] = x - h;
            let down = compute_loss(&probe, &batch, Some(&crops))?.total;
            probe.params.slots_mut()[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{name:24} {:5} values, max rel err {worst:.2e}", g.len());
    }
    Ok(())
}
