use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Which attention maps feed the region proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    /// Gated sum over all layers, gates from the pooled MLP.
    #[default]
    Fused,
    /// One layer's head-fused map with a unit gate.
    SingleLayer(usize),
    /// Plain sum over layers, every gate fixed to 1.
    NoGate,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Fused => f.write_str("fused"),
            FusionMode::SingleLayer(i) => write!(f, "single:{i}"),
            FusionMode::NoGate => f.write_str("no-gate"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(FusionMode::Fused),
            "no-gate" | "no_gate" => Ok(FusionMode::NoGate),
            _ => s
                .strip_prefix("single:")
                .and_then(|i| i.parse().ok())
                .map(FusionMode::SingleLayer)
                .ok_or_else(|| format!("expected fused | single:<layer> | no-gate, got `{s}`")),
        }
    }
}

/// How the selected patches become one pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BoxMode {
    /// Bounding box of the largest 4-connected component.
    #[default]
    Lcc,
    /// Bounding box of every selected patch.
    ExtremeValues,
}

impl fmt::Display for BoxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxMode::Lcc => f.write_str("lcc"),
            BoxMode::ExtremeValues => f.write_str("extreme"),
        }
    }
}

impl FromStr for BoxMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lcc" => Ok(BoxMode::Lcc),
            "extreme" | "extreme_values" | "extreme-values" => Ok(BoxMode::ExtremeValues),
            _ => Err(format!("expected lcc | extreme, got `{s}`")),
        }
    }
}

macro_rules! serde_via_str {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(FusionMode);
serde_via_str!(BoxMode);

/// The two uses of the shared encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Global,
    Local,
}

/// Complete model hyperparameters. `Default` is the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size_global: usize,
    pub image_size_local: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub lambda_thresh: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reduction_ratio: usize,
    pub fusion_mode: FusionMode,
    pub box_mode: BoxMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size_global: 64,
            image_size_local: 32,
            patch_size: 8,
            stride: 6,
            channels: 3,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
            lambda_thresh: 0.4,
            alpha: 1.0,
            beta: 1.0,
            reduction_ratio: 4,
            fusion_mode: FusionMode::Fused,
            box_mode: BoxMode::Lcc,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16 geometry at 448/224 with a 12-pixel sliding stride.
    pub fn paper_scale(num_classes: usize) -> Self {
        Self {
            image_size_global: 448,
            image_size_local: 224,
            patch_size: 16,
            stride: 12,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            num_classes,
            ..Self::default()
        }
    }

    pub fn image_size(&self, branch: Branch) -> usize {
        match branch {
            Branch::Global => self.image_size_global,
            Branch::Local => self.image_size_local,
        }
    }

    /// Sliding windows per image side: `floor((size − P)/S) + 1`.
    pub fn tokens_per_side(&self, branch: Branch) -> usize {
        tokens_per_side(self.image_size(branch), self.patch_size, self.stride)
    }

    pub fn num_patches(&self, branch: Branch) -> usize {
        self.tokens_per_side(branch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Hidden width of the layer-gate MLP.
    pub fn gate_hidden(&self) -> usize {
        (self.num_layers / self.reduction_ratio.max(1)).max(1)
    }

    /// Number of patch tokens kept from the fused class row.
    pub fn selection_count(&self) -> usize {
        selection_count(self.num_patches(Branch::Global), self.lambda_thresh)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size_global", self.image_size_global),
            ("image_size_local", self.image_size_local),
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("reduction_ratio", self.reduction_ratio),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.patch_size > self.image_size_local {
            return Err(Error::config(
                "patch_size",
                format!(
                    "{} exceeds image_size_local {}",
                    self.patch_size, self.image_size_local
                ),
            ));
        }
        if self.image_size_local > self.image_size_global {
            return Err(Error::config(
                "image_size_local",
                format!("{} exceeds image_size_global {}", self.image_size_local, self.image_size_global),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio", "must be a positive number"));
        }
        if !(self.lambda_thresh > 0.0 && self.lambda_thresh <= 1.0) {
            return Err(Error::config(
                "lambda_thresh",
                format!("{} is outside (0, 1]", self.lambda_thresh),
            ));
        }
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        if let FusionMode::SingleLayer(i) = self.fusion_mode {
            if i >= self.num_layers {
                return Err(Error::config(
                    "fusion_mode",
                    format!("layer {i} out of range for {} layers", self.num_layers),
                ));
            }
        }
        Ok(())
    }
}

pub fn tokens_per_side(size: usize, patch: usize, stride: usize) -> usize {
    if patch > size || stride == 0 {
        0
    } else {
        (size - patch) / stride + 1
    }
}

/// `min(N, ⌈N·λ⌉)`, at least one.
pub fn selection_count(num_patches: usize, lambda: f64) -> usize {
    // a tiny relative slack keeps products like 100·0.3 = 30.000000000000004 at 30
    let raw = num_patches as f64 * lambda;
    let m = (raw - raw.abs() * 1e-12).ceil() as usize;
    m.clamp(1, num_patches.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry_window_count() {
        let cfg = ModelConfig::paper_scale(200);
        assert_eq!(cfg.tokens_per_side(Branch::Global), 37);
        assert_eq!(cfg.num_patches(Branch::Global), 1369);
        // brute-force window enumeration
        let starts = (0..).map(|r| r * 12).take_while(|s| s + 16 <= 448).count();
        assert_eq!(starts, 37);
    }

    #[test]
    fn desk_geometry() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(Branch::Global), 100);
        assert_eq!(cfg.num_patches(Branch::Local), 25);
        assert_eq!(cfg.selection_count(), 40);
        assert_eq!(cfg.gate_hidden(), 1);
    }

    #[test]
    fn selection_count_law() {
        assert_eq!(selection_count(25, 0.1), 3);
        assert_eq!(selection_count(100, 0.3), 30);
        assert_eq!(selection_count(100, 1.0), 100);
        assert_eq!(selection_count(1369, 0.4), 548);
        assert_eq!(selection_count(4, 0.01), 1);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ModelConfig {
            lambda_thresh: 0.0,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda_thresh"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [FusionMode::Fused, FusionMode::NoGate, FusionMode::SingleLayer(3)] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert_eq!("extreme".parse::<BoxMode>().unwrap(), BoxMode::ExtremeValues);
        assert!("single:x".parse::<FusionMode>().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::default());
    }
}
