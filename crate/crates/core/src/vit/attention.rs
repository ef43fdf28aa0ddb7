use crate::error::{Error, Result};
use crate::numerics::{AttentionGeometry, Scalar, Tensor};

/// Post-softmax attention of one forward pass, `maps[layer][head]`, each a
/// square `(N+1)×(N+1)` matrix with the class token at index 0.
///
/// These are detached copies; nothing computed from them reaches the
/// gradient graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    maps: Vec<Vec<Tensor<T>>>,
    num_patches: usize,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(maps: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let first = maps
            .first()
            .and_then(|l| l.first())
            .ok_or_else(|| Error::dim("attention stack needs at least one layer and head"))?;
        let (n1, n2) = first.dims2()?;
        if n1 != n2 || n1 < 2 {
            return Err(Error::dim(format!("attention map shape {:?}", first.shape())));
        }
        let heads = maps[0].len();
        for (i, layer) in maps.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::dim(format!("layer {i} has {} heads, expected {heads}", layer.len())));
            }
            if layer.iter().any(|m| m.shape() != [n1, n1]) {
                return Err(Error::dim(format!("layer {i} has a map of the wrong shape")));
            }
        }
        Ok(Self {
            maps,
            num_patches: n1 - 1,
        })
    }

    /// Splits captured probabilities `[batch][head][q][k]` of one layer into
    /// per-sample head lists.
    pub(crate) fn split_layer(probs: &[T], geom: AttentionGeometry) -> Vec<Vec<Tensor<T>>> {
        let seq = geom.seq;
        (0..geom.batch)
            .map(|b| {
                (0..geom.heads)
                    .map(|h| {
                        let start = (b * geom.heads + h) * seq * seq;
                        Tensor::new(vec![seq, seq], probs[start..start + seq * seq].to_vec())
                            .expect("square block")
                    })
                    .collect()
            })
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_heads(&self) -> usize {
        self.maps[0].len()
    }

    /// Patch-token count N (the maps are N+1 wide).
    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn get(&self, layer: usize, head: usize) -> &Tensor<T> {
        &self.maps[layer][head]
    }

    pub fn layer(&self, layer: usize) -> &[Tensor<T>] {
        &self.maps[layer]
    }

    pub fn layers(&self) -> impl Iterator<Item = &[Tensor<T>]> {
        self.maps.iter().map(|l| l.as_slice())
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let width = self.num_patches + 1;
        self.maps
            .iter()
            .flatten()
            .flat_map(|m| m.data().chunks(width).map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}
