use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::{argmax, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        image_size_global: 16,
        image_size_local: 16,
        patch_size: 4,
        stride: 4,
        channels: 2,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Every slot drawn from U(-scale, scale), norm gains included.
fn randomized(cfg: &ModelConfig, seed: u64, scale: f64) -> EncoderParams<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncoderParams::shapes(cfg).map(|_, s| random(s, &mut rng, scale))
}

#[test]
fn patch_counts() {
    let img = Tensor::<f64>::zeros(&[3, 64, 64]);
    assert_eq!(patchify(&img, 8, 8).unwrap().shape(), &[64, 192]);
    let img = Tensor::<f64>::zeros(&[3, 448, 448]);
    assert_eq!(patchify(&img, 16, 12).unwrap().shape(), &[1369, 768]);
}

#[test]
fn whole_image_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random(&[3, 5, 5], &mut rng, 1.0);
    let p = patchify(&img, 5, 2).unwrap();
    assert_eq!(p.shape(), &[1, 75]);
    assert_eq!(p.data(), img.data());
    assert!(matches!(patchify(&img, 6, 1), Err(Error::Input(_))));
}

#[test]
fn windows_cover_expected_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random(&[2, 20, 20], &mut rng, 1.0);
    let (patch, stride) = (8, 6);
    let p = patchify(&img, patch, stride).unwrap();
    let side = tokens_per_side(20, patch, stride);
    assert_eq!(side, 3);
    for r in 0..side {
        for c in 0..side {
            let row = p.row(r * side + c);
            let mut k = 0;
            for ch in 0..2 {
                for y in 0..patch {
                    for x in 0..patch {
                        assert_eq!(row[k], img.at(&[ch, r * stride + y, c * stride + x]));
                        k += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn zero_image_embeds_to_position_embedding() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = EncoderParams::<Tensor<f64>>::init(&cfg, &mut rng);
    params.global.pos_embed = random(&[17, 8], &mut rng, 1.0);
    let vit = Vit::new(&cfg, &params);
    let patches = patchify(&Tensor::zeros(&[2, 16, 16]), 4, 4).unwrap();
    let tokens = vit.embed(&patches, Branch::Global).unwrap();
    assert_eq!(tokens.shape(), &[17, 8]);
    assert!(tokens.bitwise_eq(&params.global.pos_embed));
}

#[test]
fn embedding_length_mismatch_is_config_error() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = EncoderParams::<Tensor<f64>>::init(&cfg, &mut rng);
    let vit = Vit::new(&cfg, &params);
    let patches = patchify(&Tensor::zeros(&[2, 12, 12]), 4, 4).unwrap();
    assert!(matches!(vit.embed(&patches, Branch::Global), Err(Error::Config { .. })));
}

fn unit_cfg() -> ModelConfig {
    ModelConfig {
        image_size_global: 1,
        image_size_local: 1,
        patch_size: 1,
        stride: 1,
        channels: 1,
        embed_dim: 1,
        num_layers: 1,
        num_heads: 1,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn single_pixel_embedding_by_hand() {
    let cfg = unit_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = EncoderParams::<Tensor<f64>>::init(&cfg, &mut rng);
    params.patch_weight = Tensor::from_f64(&[1, 1, 1, 1], &[1.5]).unwrap();
    params.patch_bias = Tensor::from_f64(&[1], &[0.25]).unwrap();
    params.global.class_token = Tensor::from_f64(&[1], &[-3.0]).unwrap();
    params.global.pos_embed = Tensor::from_f64(&[2, 1], &[0.5, 2.0]).unwrap();
    let vit = Vit::new(&cfg, &params);
    let patches = Tensor::from_f64(&[1, 1], &[0.8]).unwrap();
    let t = vit.embed(&patches, Branch::Global).unwrap();
    assert_eq!(t.data()[0], -3.0 + 0.5);
    assert!((t.data()[1] - (0.8 * 1.5 + 0.25 + 2.0)).abs() < 1e-15);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small_cfg();
    let params = randomized(&cfg, 4, 0.8);
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = random(&[17, 8], &mut rng, 2.0);
    let (_, stack) = vit.encoder_forward(&tokens).unwrap();
    assert_eq!(stack.num_layers(), 2);
    assert_eq!(stack.num_heads(), 2);
    assert_eq!(stack.num_patches(), 16);
    assert!(stack.max_row_sum_error() < 1e-12);
    for layer in stack.layers() {
        for m in layer {
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn zeroed_residual_branches_pass_tokens_through() {
    let cfg = small_cfg();
    let mut params = randomized(&cfg, 6, 0.5);
    for l in &mut params.layers {
        for t in [&mut l.wo, &mut l.bo, &mut l.mlp_w2, &mut l.mlp_b2] {
            *t = Tensor::zeros(t.shape());
        }
    }
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens = random(&[17, 8], &mut rng, 1.0);
    let (features, _) = vit.encoder_forward(&tokens).unwrap();
    assert!(features.bitwise_eq(&tokens));
}

#[test]
fn micro_attention_matches_hand_softmax() {
    // L=1, K=1, D=2, N=1
    let cfg = ModelConfig {
        embed_dim: 2,
        ..unit_cfg()
    };
    let params = randomized(&cfg, 8, 0.9);
    let vit = Vit::new(&cfg, &params);
    let tokens = Tensor::from_f64(&[2, 2], &[0.3, -1.1, 0.7, 0.2]).unwrap();
    let (_, stack) = vit.encoder_forward(&tokens).unwrap();

    let l = &params.layers[0];
    let norm = |row: &[f64]| -> Vec<f64> {
        let mean = (row[0] + row[1]) / 2.0;
        let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        (0..2)
            .map(|c| (row[c] - mean) * inv * l.norm1_gain.data()[c] + l.norm1_bias.data()[c])
            .collect()
    };
    let proj = |h: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..2).map(|j| h[0] * w.at(&[0, j]) + h[1] * w.at(&[1, j]) + b.data()[j]).collect()
    };
    let hs: Vec<Vec<f64>> = (0..2).map(|r| norm(tokens.row(r))).collect();
    let qs: Vec<Vec<f64>> = hs.iter().map(|h| proj(h, &l.wq, &l.bq)).collect();
    let ks: Vec<Vec<f64>> = hs.iter().map(|h| proj(h, &l.wk, &l.bk)).collect();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (qs[i][0] * ks[j][0] + qs[i][1] * ks[j][1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        for j in 0..2 {
            let expect = s[j].exp() / z;
            assert!((stack.get(0, 0).at(&[i, j]) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn classify_zero_feature_gives_zero_logits() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = EncoderParams::<Tensor<f64>>::init(&cfg, &mut rng);
    let vit = Vit::new(&cfg, &params);
    let logits = vit.classify(&Tensor::zeros(&[17, 8])).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert_eq!(argmax(&logits), 0);
}

#[test]
fn classify_matches_dot_product_oracle() {
    let cfg = small_cfg();
    let params = randomized(&cfg, 10, 1.0);
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let features = random(&[17, 8], &mut rng, 1.0);
    let logits = vit.classify(&features).unwrap();

    let f = features.row(0);
    let mean = f.iter().sum::<f64>() / 8.0;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    let normed: Vec<f64> = (0..8)
        .map(|c| {
            (f[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * params.head_norm_gain.data()[c]
                + params.head_norm_bias.data()[c]
        })
        .collect();
    for k in 0..3 {
        let dot: f64 = (0..8).map(|c| normed[c] * params.head_weight.at(&[c, k])).sum();
        assert!((logits[k] - dot - params.head_bias.data()[k]).abs() < 1e-12);
    }
    let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
    assert_eq!(argmax(&shifted), argmax(&logits));
}

#[test]
fn branches_share_everything_but_embeddings() {
    let cfg = small_cfg();
    let mut params = randomized(&cfg, 12, 0.5);
    params.local = params.global.clone();
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = random(&[2, 16, 16], &mut rng, 1.0);
    let g = vit.forward(&[&img], Branch::Global).unwrap();
    let l = vit.forward(&[&img], Branch::Local).unwrap();
    assert_eq!(g[0].logits, l[0].logits);
}

#[test]
fn batched_forward_matches_single() {
    let cfg = small_cfg();
    let params = randomized(&cfg, 14, 0.5);
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let imgs: Vec<Tensor<f64>> = (0..3).map(|_| random(&[2, 16, 16], &mut rng, 1.0)).collect();
    let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
    let batched = vit.forward(&refs, Branch::Global).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let single = vit.forward(&[img], Branch::Global).unwrap();
        for (a, b) in single[0].logits.iter().zip(&batched[i].logits) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(single[0].attention.num_patches(), batched[i].attention.num_patches());
    }
}

#[test]
fn permuting_patch_tokens_permutes_features() {
    let cfg = small_cfg();
    let params = randomized(&cfg, 16, 0.6);
    let vit = Vit::new(&cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tokens = random(&[17, 8], &mut rng, 1.0);
    // class token stays at row 0
    let mut perm: Vec<usize> = (1..17).collect();
    perm.reverse();
    perm.swap(0, 5);
    let order: Vec<usize> = std::iter::once(0).chain(perm.iter().copied()).collect();
    let permuted_data: Vec<f64> = order.iter().flat_map(|&r| tokens.row(r).to_vec()).collect();
    let permuted = Tensor::new(vec![17, 8], permuted_data).unwrap();
    let (fa, _) = vit.encoder_forward(&tokens).unwrap();
    let (fb, _) = vit.encoder_forward(&permuted).unwrap();
    for (new_row, &old_row) in order.iter().enumerate() {
        for (a, b) in fb.row(new_row).iter().zip(fa.row(old_row)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
