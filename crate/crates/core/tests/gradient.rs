mod common;

use aftrans::pipeline::{generate_synthetic_dataset, SyntheticSpec};
use common::*;

#[test]
fn loss_total_gradient_matches_finite_differences() {
    let cfg = micro_config();
    let model = randomized_model(cfg.clone(), 3);
    let spec = SyntheticSpec {
        seed: 4,
        num_classes: 2,
        per_class: 1,
    };
    let batch = generate_synthetic_dataset(&spec, &cfg).unwrap()[..1].to_vec();
    let r = finite_difference_check(&model, &batch, 1e-5);
    println!("checked {} scalars, max rel err {:e} at {}", r.checked, r.max_rel_err, r.worst);
    assert!(r.max_rel_err < 1e-4, "{}", r.worst);
}
