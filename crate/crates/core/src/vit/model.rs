//! Encoder forward pass: sliding-window patch embedding, pre-norm
//! transformer layers with attention capture, and the class-token head.

use super::attention::AttentionStack;
use super::config::{Branch, ModelConfig};
use super::params::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{AttentionGeometry, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Cuts `[C, H, W]` into `P×P` windows at stride `S`, row-major over window
/// positions. Each row is one window flattened in `(channel, y, x)` order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize, stride: usize) -> Result<Tensor<T>> {
    let (channels, h, w) = image.dims3()?;
    if patch == 0 || stride == 0 {
        return Err(Error::Input("patch size and stride must be positive".into()));
    }
    if patch > h || patch > w {
        return Err(Error::Input(format!("patch {patch} larger than image {h}x{w}")));
    }
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;
    let src = image.data();
    let mut out = Vec::with_capacity(rows * cols * channels * patch * patch);
    for r in 0..rows {
        for c in 0..cols {
            for ch in 0..channels {
                for y in 0..patch {
                    let start = (ch * h + r * stride + y) * w + c * stride;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, channels * patch * patch], out)
}

/// Tape handles produced by one branch forward over a batch.
#[derive(Debug, Clone)]
pub struct BranchGraph {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// Residual stream after the last layer, `[B·(N+1), D]`.
    pub features: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

/// Linear patch projection, class token prepended, position embedding added.
/// `patches` is `[B·N, C·P·P]`; the result is `[B·(N+1), D]`.
pub fn embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderParams<Var>,
    branch: Branch,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let (rows, patch_len) = tape.value(patches).dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim(format!("{rows} patch rows do not split into {batch} samples")));
    }
    let n = rows / batch;
    let bp = vars.branch(branch);
    let pos_rows = tape.value(bp.pos_embed).dims2()?.0;
    if pos_rows != n + 1 {
        return Err(Error::config(
            format!("{branch:?}.pos_embed").to_lowercase(),
            format!("has {pos_rows} rows but the {branch:?} branch yields {n} patches + class token"),
        ));
    }
    let d = tape.value(vars.patch_bias).len();
    let kernel = tape.reshape(vars.patch_weight, &[d, patch_len])?;
    let kernel = tape.transpose(kernel)?;
    let projected = tape.matmul(patches, kernel)?;
    let projected = tape.add_row_bias(projected, vars.patch_bias)?;
    let cls = tape.reshape(bp.class_token, &[1, d])?;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(cls);
        parts.push(tape.slice_rows(projected, b * n, (b + 1) * n)?);
    }
    let tokens = tape.concat_rows(&parts)?;
    tape.add_tiled(tokens, bp.pos_embed)
}

/// Pre-norm transformer layers over `[B·seq, D]` tokens. Returns the final
/// residual stream and the attention node of each layer.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    tokens: Var,
    batch: usize,
) -> Result<(Var, Vec<Var>)> {
    let (rows, _) = tape.value(tokens).dims2()?;
    let geom = AttentionGeometry {
        batch,
        seq: rows / batch.max(1),
        heads: cfg.num_heads,
    };
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut x = tokens;
    let mut attention = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let h = tape.layer_norm(x, layer.norm1_gain, layer.norm1_bias, eps)?;
        let q = linear(tape, h, layer.wq, layer.bq)?;
        let k = linear(tape, h, layer.wk, layer.bk)?;
        let v = linear(tape, h, layer.wv, layer.bv)?;
        let attn = tape.attention(q, k, v, geom)?;
        attention.push(attn);
        let o = linear(tape, attn, layer.wo, layer.bo)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, layer.norm2_gain, layer.norm2_bias, eps)?;
        let m = linear(tape, h, layer.mlp_w1, layer.mlp_b1)?;
        let m = tape.gelu(m)?;
        let m = linear(tape, m, layer.mlp_w2, layer.mlp_b2)?;
        x = tape.add(x, m)?;
    }
    Ok((x, attention))
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Class-token rows through the final norm and `W_cls`: `[B, num_classes]`.
pub fn classify_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderParams<Var>,
    features: Var,
    batch: usize,
) -> Result<Var> {
    let (rows, _) = tape.value(features).dims2()?;
    let seq = rows / batch.max(1);
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let cls = tape.gather_rows(features, &cls_rows)?;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let normed = tape.layer_norm(cls, vars.head_norm_gain, vars.head_norm_bias, eps)?;
    linear(tape, normed, vars.head_weight, vars.head_bias)
}

/// Full branch forward for a batch of `[C, S, S]` images at the branch size.
pub fn branch_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderParams<Var>,
    cfg: &ModelConfig,
    branch: Branch,
    images: &[&Tensor<T>],
) -> Result<BranchGraph> {
    let size = cfg.image_size(branch);
    let mut stacked = Vec::new();
    let mut n = 0;
    for img in images {
        let (c, h, w) = img.dims3()?;
        if c != cfg.channels || h != size || w != size {
            return Err(Error::dim(format!(
                "{branch:?} branch expects [{}, {size}, {size}] images, got {:?}",
                cfg.channels,
                img.shape()
            )));
        }
        let p = patchify(img, cfg.patch_size, cfg.stride)?;
        n = p.dims2()?.0;
        stacked.extend_from_slice(p.data());
    }
    let batch = images.len();
    let patches = tape.constant(Tensor::new(vec![batch * n, cfg.patch_len()], stacked)?);
    let tokens = embed_on_tape(tape, vars, branch, patches, batch)?;
    let (features, attention) = encode_on_tape(tape, vars, cfg, tokens, batch)?;
    let logits = classify_on_tape(tape, vars, features, batch)?;
    Ok(BranchGraph {
        logits,
        features,
        attention,
        batch,
        seq: n + 1,
    })
}

/// Copies each sample's attention out of the tape.
pub fn capture_attention<T: Scalar>(tape: &Tape<T>, attention: &[Var]) -> Result<Vec<AttentionStack<T>>> {
    let mut per_sample: Vec<Vec<Vec<Tensor<T>>>> = Vec::new();
    for &node in attention {
        let (probs, geom) = tape
            .attention_probs(node)
            .ok_or_else(|| Error::Internal("node is not an attention op".into()))?;
        let split = AttentionStack::split_layer(probs, geom);
        if per_sample.is_empty() {
            per_sample = vec![Vec::new(); split.len()];
        }
        for (sample, heads) in per_sample.iter_mut().zip(split) {
            sample.push(heads);
        }
    }
    per_sample.into_iter().map(AttentionStack::new).collect()
}

/// Branch output for one image.
#[derive(Debug, Clone)]
pub struct BranchOutput<T> {
    pub logits: Vec<T>,
    pub attention: AttentionStack<T>,
}

/// Gradient-free view of the model for inference and inspection.
#[derive(Debug, Clone, Copy)]
pub struct Vit<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a EncoderParams<Tensor<T>>,
}

/// Images per inference batch.
const INFER_BATCH: usize = 32;

impl<'a, T: Scalar> Vit<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a EncoderParams<Tensor<T>>) -> Self {
        Self { cfg, params }
    }

    fn constants(&self, tape: &mut Tape<T>) -> EncoderParams<Var> {
        self.params.map(|_, t| tape.constant(t.clone()))
    }

    /// `[N, C·P·P]` patches to `[N+1, D]` tokens for one image.
    pub fn embed(&self, patches: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let p = tape.constant(patches.clone());
        let out = embed_on_tape(&mut tape, &vars, branch, p, 1)?;
        Ok(tape.value(out).clone())
    }

    /// Runs the transformer layers over `[N+1, D]` tokens of one image.
    pub fn encoder_forward(&self, tokens: &Tensor<T>) -> Result<(Tensor<T>, AttentionStack<T>)> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let t = tape.constant(tokens.clone());
        let (features, attn) = encode_on_tape(&mut tape, &vars, self.cfg, t, 1)?;
        let mut stacks = capture_attention(&tape, &attn)?;
        Ok((tape.value(features).clone(), stacks.remove(0)))
    }

    /// Logits from the class-token row of `[N+1, D]` features.
    pub fn classify(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let f = tape.constant(features.clone());
        let logits = classify_on_tape(&mut tape, &vars, f, 1)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Logits and captured attention for each image.
    pub fn forward(&self, images: &[&Tensor<T>], branch: Branch) -> Result<Vec<BranchOutput<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let mut tape = Tape::new();
            let vars = self.constants(&mut tape);
            let graph = branch_on_tape(&mut tape, &vars, self.cfg, branch, chunk)?;
            let stacks = capture_attention(&tape, &graph.attention)?;
            let logits = tape.value(graph.logits);
            let classes = self.cfg.num_classes;
            for (b, attention) in stacks.into_iter().enumerate() {
                out.push(BranchOutput {
                    logits: logits.data()[b * classes..(b + 1) * classes].to_vec(),
                    attention,
                });
            }
        }
        Ok(out)
    }
}
