//! Learnable parameters of the shared encoder.
//!
//! The containers are generic over their slot type so one layout serves
//! tensors, tape handles and gradients alike (`map` converts between them).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Branch, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Draws from N(0, std²), resampling anything beyond two deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Class token and position embedding owned by one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<P> {
    pub class_token: P,
    pub pos_embed: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub norm1_gain: P,
    pub norm1_bias: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub norm2_gain: P,
    pub norm2_bias: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

/// Everything the two branches share plus each branch's own embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    /// Patch projection kernel `[D, C, P, P]`.
    pub patch_weight: P,
    pub patch_bias: P,
    pub global: BranchParams<P>,
    pub local: BranchParams<P>,
    pub layers: Vec<LayerParams<P>>,
    pub head_norm_gain: P,
    pub head_norm_bias: P,
    /// `W_cls`, `[D, num_classes]`.
    pub head_weight: P,
    pub head_bias: P,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            norm1_gain, norm1_bias, wq, bq, wk, bk, wv, bv, wo, bo, norm2_gain, norm2_bias, mlp_w1,
            mlp_b1, mlp_w2, mlp_b2
        )
    };
}

impl<P> LayerParams<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> LayerParams<Q> {
        macro_rules! build {
            ($($field:ident),*) => {
                LayerParams { $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)),* }
            };
        }
        layer_fields!(build)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        macro_rules! each {
            ($($field:ident),*) => {
                {$(f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*}
            };
        }
        layer_fields!(each)
    }
}

impl<P> BranchParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BranchParams<Q> {
        BranchParams {
            class_token: f(&format!("{prefix}.class_token"), &self.class_token),
            pos_embed: f(&format!("{prefix}.pos_embed"), &self.pos_embed),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.class_token"), &mut self.class_token);
        f(&format!("{prefix}.pos_embed"), &mut self.pos_embed);
    }
}

impl<P> EncoderParams<P> {
    /// Applies `f` to every slot in canonical order, keeping the layout.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            patch_weight: f("patch_embed.weight", &self.patch_weight),
            patch_bias: f("patch_embed.bias", &self.patch_bias),
            global: self.global.map("global", &mut f),
            local: self.local.map("local", &mut f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
                .collect(),
            head_norm_gain: f("head.norm_gain", &self.head_norm_gain),
            head_norm_bias: f("head.norm_bias", &self.head_norm_bias),
            head_weight: f("head.weight", &self.head_weight),
            head_bias: f("head.bias", &self.head_bias),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &P)) {
        self.map(|name, p| f(name, p));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        f("patch_embed.weight", &mut self.patch_weight);
        f("patch_embed.bias", &mut self.patch_bias);
        self.global.visit_mut("global", &mut f);
        self.local.visit_mut("local", &mut f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), &mut f);
        }
        f("head.norm_gain", &mut self.head_norm_gain);
        f("head.norm_bias", &mut self.head_norm_bias);
        f("head.weight", &mut self.head_weight);
        f("head.bias", &mut self.head_bias);
    }

    pub fn branch(&self, branch: Branch) -> &BranchParams<P> {
        match branch {
            Branch::Global => &self.global,
            Branch::Local => &self.local,
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut BranchParams<P> {
        match branch {
            Branch::Global => &mut self.global,
            Branch::Local => &mut self.local,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    pub fn slots(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit_ref(&mut |p| out.push(p));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_ref_mut(&mut |p| out.push(p));
        out
    }

    fn visit_ref_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        f(&mut self.patch_weight);
        f(&mut self.patch_bias);
        for b in [&mut self.global, &mut self.local] {
            f(&mut b.class_token);
            f(&mut b.pos_embed);
        }
        for l in self.layers.iter_mut() {
            macro_rules! each {
                ($($field:ident),*) => { $(f(&mut l.$field);)* };
            }
            layer_fields!(each);
        }
        f(&mut self.head_norm_gain);
        f(&mut self.head_norm_bias);
        f(&mut self.head_weight);
        f(&mut self.head_bias);
    }

    fn visit_ref<'a>(&'a self, f: &mut impl FnMut(&'a P)) {
        f(&self.patch_weight);
        f(&self.patch_bias);
        for b in [&self.global, &self.local] {
            f(&b.class_token);
            f(&b.pos_embed);
        }
        for l in &self.layers {
            macro_rules! each {
                ($($field:ident),*) => { $(f(&l.$field);)* };
            }
            layer_fields!(each);
        }
        f(&self.head_norm_gain);
        f(&self.head_norm_bias);
        f(&self.head_weight);
        f(&self.head_bias);
    }

    /// Rebuilds a container from slots listed in canonical order.
    pub fn from_slots(template: &EncoderParams<()>, slots: Vec<P>) -> Result<Self> {
        let expected = template.names().len();
        if slots.len() != expected {
            return Err(Error::Integrity(format!(
                "expected {expected} parameter tensors, got {}",
                slots.len()
            )));
        }
        let mut it = slots.into_iter();
        Ok(template.map(|_, _| it.next().expect("count checked")))
    }
}

impl EncoderParams<Vec<usize>> {
    /// Shape of every parameter tensor implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let branch = |b: Branch| BranchParams {
            class_token: vec![d],
            pos_embed: vec![cfg.num_patches(b) + 1, d],
        };
        let layer = LayerParams {
            norm1_gain: vec![d],
            norm1_bias: vec![d],
            wq: vec![d, d],
            bq: vec![d],
            wk: vec![d, d],
            bk: vec![d],
            wv: vec![d, d],
            bv: vec![d],
            wo: vec![d, d],
            bo: vec![d],
            norm2_gain: vec![d],
            norm2_bias: vec![d],
            mlp_w1: vec![d, hidden],
            mlp_b1: vec![hidden],
            mlp_w2: vec![hidden, d],
            mlp_b2: vec![d],
        };
        EncoderParams {
            patch_weight: vec![d, cfg.channels, cfg.patch_size, cfg.patch_size],
            patch_bias: vec![d],
            global: branch(Branch::Global),
            local: branch(Branch::Local),
            layers: vec![layer; cfg.num_layers],
            head_norm_gain: vec![d],
            head_norm_bias: vec![d],
            head_weight: vec![d, cfg.num_classes],
            head_bias: vec![cfg.num_classes],
        }
    }
}

/// How a slot is initialized.
enum Init {
    Zeros,
    Ones,
    Normal,
}

fn init_kind(name: &str) -> Init {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.ends_with("gain") {
        Init::Ones
    } else if leaf.starts_with('w') || leaf == "weight" || leaf.starts_with("mlp_w") {
        Init::Normal
    } else {
        // biases, class tokens, position embeddings
        Init::Zeros
    }
}

impl<T: Scalar> EncoderParams<Tensor<T>> {
    /// Truncated-normal weights, unit norm gains, zeros everywhere else.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        EncoderParams::shapes(cfg).map(|name, shape| match init_kind(name) {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal => truncated_normal(shape, INIT_STD, rng),
        })
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = EncoderParams::shapes(cfg);
        if expected.layers.len() != self.layers.len() {
            return Err(Error::Integrity(format!(
                "{} layers, config says {}",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        let want: Vec<Vec<usize>> = expected.slots().into_iter().cloned().collect();
        let names = self.names();
        for ((name, t), shape) in names.iter().zip(self.slots()).zip(&want) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "{name}: shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.slots().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}
