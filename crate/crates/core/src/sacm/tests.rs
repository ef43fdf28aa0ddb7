use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::PixelRect;

fn stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.01..1.0)).collect();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![n, n], data).unwrap()
}

fn random_stack(layers: usize, heads: usize, n: usize, rng: &mut ChaCha8Rng) -> AttentionStack<f64> {
    AttentionStack::new((0..layers).map(|_| (0..heads).map(|_| stochastic(n, rng)).collect()).collect()).unwrap()
}

fn grid_cfg(side: usize, layers: usize) -> ModelConfig {
    // side×side windows of 4 px at stride 4
    ModelConfig {
        image_size_global: side * 4,
        image_size_local: 4,
        patch_size: 4,
        stride: 4,
        num_layers: layers,
        num_heads: 1,
        embed_dim: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn single_head_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stack = random_stack(2, 1, 5, &mut rng);
    let maps = fuse_heads(&stack);
    assert!(maps[0].bitwise_eq(stack.get(0, 0)));
    assert!(maps[1].bitwise_eq(stack.get(1, 0)));
}

#[test]
fn half_times_half() {
    let half = Tensor::full(&[3, 3], 0.5);
    let stack = AttentionStack::new(vec![vec![half.clone(), half]]).unwrap();
    assert!(fuse_heads(&stack)[0].data().iter().all(|&v| v == 0.25));
}

#[test]
fn hadamard_matches_entry_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stack = random_stack(3, 3, 6, &mut rng);
    let maps = fuse_heads(&stack);
    for l in 0..3 {
        for i in 0..6 {
            for j in 0..6 {
                let mut p = 1.0;
                for h in 0..3 {
                    p *= stack.get(l, h).at(&[i, j]);
                }
                assert_eq!(maps[l].at(&[i, j]), p);
            }
        }
    }
}

#[test]
fn head_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stack = random_stack(1, 3, 5, &mut rng);
    let heads = stack.layer(0);
    let reversed = AttentionStack::new(vec![heads.iter().rev().cloned().collect()]).unwrap();
    let (a, b) = (&fuse_heads(&stack)[0], &fuse_heads(&reversed)[0]);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-15 * x.abs());
    }
}

#[test]
fn zero_gate_parameters_give_half() {
    let cfg = grid_cfg(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let maps: Vec<_> = (0..4).map(|_| stochastic(10, &mut rng)).collect();
    let gates = compute_gates(&maps, &GateParams::zeros(&cfg)).unwrap();
    assert_eq!(gates, vec![0.5; 4]);
}

#[test]
fn gates_by_hand() {
    // L=2, hidden=1
    let params = GateParams {
        w1: Tensor::from_f64(&[1, 2], &[2.0, -1.0]).unwrap(),
        b1: Tensor::from_f64(&[1], &[0.1]).unwrap(),
        w2: Tensor::from_f64(&[2, 1], &[1.5, -3.0]).unwrap(),
        b2: Tensor::from_f64(&[2], &[0.0, 0.2]).unwrap(),
    };
    let maps = vec![Tensor::full(&[2, 2], 0.5), Tensor::full(&[2, 2], 0.25)];
    let gates = compute_gates(&maps, &params).unwrap();
    let h = (2.0 * 0.5 - 0.25 + 0.1f64).max(0.0);
    let expect = [1.0 / (1.0 + (-1.5 * h).exp()), 1.0 / (1.0 + (3.0 * h - 0.2f64).exp())];
    for (g, e) in gates.iter().zip(expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn extreme_gate_inputs_stay_open() {
    let cfg = grid_cfg(3, 3);
    let mut params = GateParams::<f64>::zeros(&cfg);
    params.b2 = Tensor::from_f64(&[3], &[-30.0, 0.0, 30.0]).unwrap();
    let maps: Vec<_> = (0..3).map(|_| Tensor::full(&[4, 4], 0.25)).collect();
    for g in compute_gates(&maps, &params).unwrap() {
        assert!(g > 0.0 && g < 1.0);
    }
}

#[test]
fn fuse_layers_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<_> = (0..3).map(|_| stochastic(5, &mut rng)).collect();
    let picked = fuse_layers(&maps, &[0.0, 1.0, 0.0]).unwrap();
    assert!(picked.bitwise_eq(&maps[1]));
    let summed = fuse_layers(&maps, &[1.0; 3]).unwrap();
    for k in 0..25 {
        assert_eq!(summed.data()[k], maps[0].data()[k] + maps[1].data()[k] + maps[2].data()[k]);
    }
    let gates: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
    let fused = fuse_layers(&maps, &gates).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let mut acc = 0.0;
            for l in 0..3 {
                acc += gates[l] * maps[l].at(&[i, j]);
            }
            assert_eq!(fused.at(&[i, j]), acc);
        }
    }
    assert!(fuse_layers(&maps, &[1.0]).is_err());
}

#[test]
fn selection_counts() {
    let row: Vec<f64> = (0..100).map(|i| (i * 37 % 100) as f64).collect();
    assert_eq!(select_tokens(&row, 10, 0.4).unwrap().count(), 40);
    assert!(select_tokens(&row, 10, 1.0).unwrap().cells().iter().all(|&c| c));
    assert!(select_tokens(&row, 10, 0.0).is_err());
    assert!(select_tokens(&row, 10, 1.5).is_err());
}

#[test]
fn known_top_three() {
    let mut row = vec![0.01; 25];
    row[7] = 0.9;
    row[19] = 0.5;
    row[3] = 0.4;
    row[11] = 0.39;
    let grid = select_tokens(&row, 5, 0.1).unwrap();
    assert_eq!(grid.indices(), vec![3, 7, 19]);
}

#[test]
fn ties_go_to_lower_index() {
    let row = vec![1.0; 9];
    assert_eq!(select_top(&row, 4), vec![0, 1, 2, 3]);
}

fn grid(side: usize, set: &[usize]) -> TokenGrid {
    let mut cells = vec![false; side * side];
    for &i in set {
        cells[i] = true;
    }
    TokenGrid::new(side, cells).unwrap()
}

#[test]
fn lcc_examples() {
    assert_eq!(largest_connected_component(&grid(4, &[9])).unwrap(), vec![9]);
    // sizes 2 and 3
    let g = grid(4, &[0, 1, 10, 11, 15]);
    assert_eq!(largest_connected_component(&g).unwrap(), vec![10, 11, 15]);
    let all: Vec<usize> = (0..16).collect();
    assert_eq!(largest_connected_component(&grid(4, &all)).unwrap(), all);
    // equal sizes: the one holding index 2 wins over the one holding 8
    let g = grid(4, &[2, 3, 8, 12]);
    assert_eq!(largest_connected_component(&g).unwrap(), vec![2, 3]);
    // diagonal neighbours are not connected
    let g = grid(3, &[0, 4, 8]);
    assert_eq!(largest_connected_component(&g).unwrap(), vec![0]);
    assert!(matches!(
        largest_connected_component(&grid(3, &[])),
        Err(crate::error::Error::Internal(_))
    ));
}

/// Union-find labelling, then the biggest class with the smallest member.
fn lcc_oracle(side: usize, cells: &[bool]) -> Vec<usize> {
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    let n = side * side;
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if !cells[i] {
            continue;
        }
        let right = i % side + 1 < side && cells[i + 1];
        let down = i + side < n && cells[i + side];
        for (ok, j) in [(right, i + 1), (down, i + side)] {
            if ok {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..n).filter(|&i| cells[i]) {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut best: Vec<usize> = Vec::new();
    for g in groups.into_values() {
        if g.len() > best.len() || (g.len() == best.len() && g[0] < best[0]) {
            best = g;
        }
    }
    best
}

#[test]
fn window_boxes() {
    let b = region_to_box(&[0], 37, 16, 12, 448, 448).unwrap();
    assert_eq!(b.rect(), PixelRect { row_min: 0, col_min: 0, row_max: 16, col_max: 16 });
    let b = region_to_box(&[0, 38], 37, 16, 12, 448, 448).unwrap();
    assert_eq!(b.rect(), PixelRect { row_min: 0, col_min: 0, row_max: 28, col_max: 28 });
    let last = 36 * 37 + 36;
    let b = region_to_box(&[last], 37, 16, 12, 448, 448).unwrap();
    assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (36 * 12, 36 * 12 + 16, 432, 448));
    assert_eq!(b.row_max, 448);
}

#[test]
fn windows_past_the_edge_are_clamped() {
    // 3 windows of 8 at stride 6 on a 19-pixel image: the last ends at 20
    let b = region_to_box(&[8], 3, 8, 6, 19, 19).unwrap();
    assert_eq!((b.row_min, b.row_max), (12, 19));
}

#[test]
fn single_layer_mode_matches_that_layer_alone() {
    let cfg = grid_cfg(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stack = random_stack(3, 2, 17, &mut rng);
    let gates = GateParams::init(&cfg, &mut rng);
    for i in 0..3 {
        let c = ModelConfig { fusion_mode: FusionMode::SingleLayer(i), ..cfg.clone() };
        let (region, fused) = propose_region(&stack, &gates, &c).unwrap();
        let alone = AttentionStack::new(vec![stack.layer(i).to_vec()]).unwrap();
        let c1 = ModelConfig { num_layers: 1, fusion_mode: FusionMode::NoGate, ..cfg.clone() };
        let (expect, _) = propose_region(&alone, &GateParams::zeros(&c1), &c1).unwrap();
        assert_eq!(region, expect);
        assert!(fused.fused.bitwise_eq(&fuse_heads(&stack)[i]));
    }
}

#[test]
fn uniform_attention_picks_first_patches() {
    let cfg = ModelConfig { lambda_thresh: 0.25, ..grid_cfg(4, 2) };
    let flat = Tensor::full(&[17, 17], 1.0 / 17.0);
    let stack = AttentionStack::new(vec![vec![flat.clone()], vec![flat]]).unwrap();
    let (a, fused) = propose_region(&stack, &GateParams::zeros(&cfg), &cfg).unwrap();
    let (b, _) = propose_region(&stack, &GateParams::zeros(&cfg), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.selected_patches, vec![0, 1, 2, 3]);
    assert_eq!(a.rect(), PixelRect { row_min: 0, col_min: 0, row_max: 4, col_max: 16 });
    assert!(fused.class_row.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn concentrated_attention_boxes_its_cluster() {
    // 5×5 grid, mass on patches (1,2),(1,3),(2,2),(2,3)
    let cfg = ModelConfig { lambda_thresh: 0.16, ..grid_cfg(5, 3) };
    let hot = [7, 8, 12, 13];
    let layer = |boost: f64| {
        let mut m = Tensor::full(&[26, 26], 0.01);
        for &p in &hot {
            m.data_mut()[p + 1] = boost;
        }
        m
    };
    let stack = AttentionStack::new(vec![vec![layer(0.3)], vec![layer(0.5)], vec![layer(0.2)]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (region, _) = propose_region(&stack, &GateParams::init(&cfg, &mut rng), &cfg).unwrap();
    assert_eq!(region.selected_patches, hot.to_vec());
    assert_eq!(region.rect(), PixelRect { row_min: 4, col_min: 8, row_max: 12, col_max: 16 });
}

#[test]
fn zero_gates_halve_the_layer_sum() {
    let cfg = grid_cfg(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stack = random_stack(4, 2, 10, &mut rng);
    let (_, fused) = propose_region(&stack, &GateParams::zeros(&cfg), &cfg).unwrap();
    let maps = fuse_heads(&stack);
    for k in 0..100 {
        let mut s = 0.0;
        for m in &maps {
            s += 0.5 * m.data()[k];
        }
        assert_eq!(fused.fused.data()[k], s);
    }
}

#[test]
fn lcc_and_extreme_agree_on_one_component() {
    let base = ModelConfig { lambda_thresh: 0.12, ..grid_cfg(5, 1) };
    let mut m = Tensor::full(&[26, 26], 0.01);
    for p in [6, 7, 12] {
        m.data_mut()[p + 1] = 0.5;
    }
    let stack = AttentionStack::new(vec![vec![m]]).unwrap();
    let gates = GateParams::zeros(&base);
    let lcc = propose_region(&stack, &gates, &base).unwrap().0;
    let ext = propose_region(&stack, &gates, &ModelConfig { box_mode: BoxMode::ExtremeValues, ..base }).unwrap().0;
    assert_eq!(lcc.rect(), ext.rect());
}

#[test]
fn mismatched_grid_is_rejected() {
    let cfg = grid_cfg(4, 1);
    let stack = AttentionStack::new(vec![vec![Tensor::full(&[10, 10], 0.1)]]).unwrap();
    assert!(propose_region(&stack, &GateParams::zeros(&cfg), &cfg).is_err());
}

proptest! {
    #[test]
    fn lcc_matches_union_find(side in 1usize..=12, bits in proptest::collection::vec(any::<bool>(), 144)) {
        let mut cells = bits[..side * side].to_vec();
        cells[0] = true;
        let g = TokenGrid::new(side, cells.clone()).unwrap();
        prop_assert_eq!(largest_connected_component(&g).unwrap(), lcc_oracle(side, &cells));
    }

    #[test]
    fn ranking_ignores_positive_scale(
        row in proptest::collection::vec(0.0f64..1.0, 36),
        scale in 1e-3f64..1e3,
        lambda in 0.05f64..=1.0,
    ) {
        let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
        prop_assert_eq!(select_tokens(&row, 6, lambda).unwrap(), select_tokens(&scaled, 6, lambda).unwrap());
    }

    #[test]
    fn selection_law(side in 1usize..=37, li in 0usize..5) {
        let lambda = [0.1, 0.2, 0.3, 0.4, 0.5][li];
        let n = side * side;
        let row: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64).collect();
        let expect = ((n as f64 * lambda * 10.0).round() as usize).div_ceil(10).min(n).max(1);
        prop_assert_eq!(select_tokens(&row, side, lambda).unwrap().count(), expect);
    }

    #[test]
    fn boxes_stay_inside(set in proptest::collection::btree_set(0usize..1369, 1..60)) {
        let patches: Vec<usize> = set.into_iter().collect();
        let b = region_to_box(&patches, 37, 16, 12, 448, 448).unwrap();
        prop_assert!(b.row_min < b.row_max && b.row_max <= 448);
        prop_assert!(b.col_min < b.col_max && b.col_max <= 448);
    }
}
