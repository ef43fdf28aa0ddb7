//! Selective attention collection: fuses per-head attention into one map per
//! layer, gates and sums the layers, then turns the class token's strongest
//! patches into a single crop box.
//!
//! Everything here works on detached attention values. No gradient flows
//! through the proposal.

mod region;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{relu, sigmoid, Scalar, Tensor};
use crate::vit::{truncated_normal, AttentionStack, BoxMode, Branch, FusionMode, ModelConfig, INIT_STD};

pub use region::{largest_connected_component, region_to_box, select_top, select_tokens, RegionBox, TokenGrid};

/// Layer-gate MLP: `M = σ(W₂·relu(W₁·pooled + b₁) + b₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// `[hidden, L]`.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `[L, hidden]`.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> GateParams<T> {
    pub const NAMES: [&'static str; 4] = ["gate.w1", "gate.b1", "gate.w2", "gate.b2"];

    pub fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 4] {
        let (l, h) = (cfg.num_layers, cfg.gate_hidden());
        [vec![h, l], vec![h], vec![l, h], vec![l]]
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let [a, b, c, d] = Self::shapes(cfg);
        Self {
            w1: Tensor::zeros(&a),
            b1: Tensor::zeros(&b),
            w2: Tensor::zeros(&c),
            b2: Tensor::zeros(&d),
        }
    }

    /// Truncated-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let [a, b, c, d] = Self::shapes(cfg);
        Self {
            w1: truncated_normal(&a, INIT_STD, rng),
            b1: Tensor::zeros(&b),
            w2: truncated_normal(&c, INIT_STD, rng),
            b2: Tensor::zeros(&d),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        if tensors.len() != 4 {
            return Err(Error::Integrity(format!("expected 4 gate tensors, got {}", tensors.len())));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(Self::NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Integrity(format!(
                    "{name} has shape {:?}, config expects {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.b2.len()
    }

    pub fn cast<U: Scalar>(&self) -> GateParams<U> {
        GateParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

/// Everything the proposal computed, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAttentionMap<T> {
    /// Head-fused map of each layer, `(N+1)×(N+1)`.
    pub layer_maps: Vec<Tensor<T>>,
    pub gates: Vec<T>,
    pub fused: Tensor<T>,
    /// Row 0 of `fused` over the patch columns, length N.
    pub class_row: Vec<T>,
}

/// Elementwise product over the heads of each layer.
pub fn fuse_heads<T: Scalar>(attn: &AttentionStack<T>) -> Vec<Tensor<T>> {
    attn.layers()
        .map(|heads| {
            let mut acc = heads[0].clone();
            for h in &heads[1..] {
                for (a, &b) in acc.data_mut().iter_mut().zip(h.data()) {
                    *a *= b;
                }
            }
            acc
        })
        .collect()
}

/// One gate per layer from the mean of that layer's fused map.
pub fn compute_gates<T: Scalar>(layer_maps: &[Tensor<T>], params: &GateParams<T>) -> Result<Vec<T>> {
    let l = layer_maps.len();
    let (hidden, w1_in) = params.w1.dims2()?;
    if l == 0 || w1_in != l || params.w2.shape() != [l, hidden] || params.b1.len() != hidden || params.b2.len() != l {
        return Err(Error::dim(format!(
            "gate parameters for {} layers cannot gate {l} maps",
            params.num_layers()
        )));
    }
    let pooled: Vec<T> = layer_maps
        .iter()
        .map(|m| m.data().iter().fold(T::zero(), |s, &v| s + v) / T::from_f64_lossy(m.len() as f64))
        .collect();
    let hid: Vec<T> = (0..hidden)
        .map(|j| {
            let w = params.w1.row(j);
            let z = (0..l).fold(T::zero(), |s, i| s + w[i] * pooled[i]);
            relu(z + params.b1.data()[j])
        })
        .collect();
    Ok((0..l)
        .map(|i| {
            let w = params.w2.row(i);
            let z = (0..hidden).fold(T::zero(), |s, j| s + w[j] * hid[j]);
            sigmoid(z + params.b2.data()[i])
        })
        .collect())
}

/// `Σᵢ gᵢ·Aᵢ`.
pub fn fuse_layers<T: Scalar>(layer_maps: &[Tensor<T>], gates: &[T]) -> Result<Tensor<T>> {
    if layer_maps.is_empty() || layer_maps.len() != gates.len() {
        return Err(Error::dim(format!(
            "{} layer maps but {} gates",
            layer_maps.len(),
            gates.len()
        )));
    }
    let shape = layer_maps[0].shape();
    let mut acc = Tensor::zeros(shape);
    for (m, &g) in layer_maps.iter().zip(gates) {
        if m.shape() != shape {
            return Err(Error::dim("layer maps differ in shape"));
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += g * v;
        }
    }
    Ok(acc)
}

/// Row 0 of a fused map without its class-token column.
pub fn class_row<T: Scalar>(fused: &Tensor<T>) -> Result<Vec<T>> {
    let (n1, n2) = fused.dims2()?;
    if n1 != n2 || n1 < 2 {
        return Err(Error::dim(format!("fused map shape {:?}", fused.shape())));
    }
    Ok(fused.row(0)[1..].to_vec())
}

/// Global-branch attention to one crop box in global-image pixels.
pub fn propose_region<T: Scalar>(
    attn: &AttentionStack<T>,
    params: &GateParams<T>,
    cfg: &ModelConfig,
) -> Result<(RegionBox, FusedAttentionMap<T>)> {
    let side = cfg.tokens_per_side(Branch::Global);
    if attn.num_patches() != side * side {
        return Err(Error::dim(format!(
            "attention covers {} patches, the global grid has {}",
            attn.num_patches(),
            side * side
        )));
    }
    let layer_maps = fuse_heads(attn);
    let l = layer_maps.len();
    let (gates, fused) = match cfg.fusion_mode {
        FusionMode::Fused => {
            let gates = compute_gates(&layer_maps, params)?;
            let fused = fuse_layers(&layer_maps, &gates)?;
            (gates, fused)
        }
        FusionMode::NoGate => {
            let gates = vec![T::one(); l];
            let fused = fuse_layers(&layer_maps, &gates)?;
            (gates, fused)
        }
        FusionMode::SingleLayer(i) => {
            let fused = layer_maps
                .get(i)
                .cloned()
                .ok_or_else(|| Error::config("fusion_mode", format!("layer {i} out of range for {l} layers")))?;
            let gates = (0..l).map(|k| if k == i { T::one() } else { T::zero() }).collect();
            (gates, fused)
        }
    };
    let row = class_row(&fused)?;
    let grid = select_tokens(&row, side, cfg.lambda_thresh)?;
    let selected = grid.indices();
    let members = match cfg.box_mode {
        BoxMode::Lcc => largest_connected_component(&grid)?,
        BoxMode::ExtremeValues => selected.clone(),
    };
    let size = cfg.image_size_global;
    let mut region = region_to_box(&members, side, cfg.patch_size, cfg.stride, size, size)?;
    region.selected_patches = selected;
    Ok((
        region,
        FusedAttentionMap {
            layer_maps,
            gates,
            fused,
            class_row: row,
        },
    ))
}

impl<T: Scalar> FusedAttentionMap<T> {
    pub fn gates_f64(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g.as_f64()).collect()
    }
}

#[cfg(test)]
mod tests;
