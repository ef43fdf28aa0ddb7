use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::train::local_crop;
use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{argmax, bilinear_resize, crop, Scalar, Tensor};
use crate::sacm::{propose_region, RegionBox};
use crate::vit::Branch;

/// Which logits decide the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    #[default]
    Global,
    Local,
    /// Elementwise sum of global and local logits.
    Sum,
}

impl fmt::Display for DecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionMode::Global => "global",
            DecisionMode::Local => "local",
            DecisionMode::Sum => "sum",
        })
    }
}

impl FromStr for DecisionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" => Ok(DecisionMode::Global),
            "local" => Ok(DecisionMode::Local),
            "sum" => Ok(DecisionMode::Sum),
            _ => Err(format!("expected global | local | sum, got `{s}`")),
        }
    }
}

/// Prediction for one image with everything behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    /// Argmax of the global logits.
    pub predicted: usize,
    pub global_logits: Vec<f64>,
    pub local_logits: Vec<f64>,
    pub region: RegionBox,
    pub gates: Vec<f64>,
    /// Fused class-token attention over patches.
    pub class_row: Vec<f64>,
}

impl Inference {
    pub fn decide(&self, mode: DecisionMode) -> usize {
        match mode {
            DecisionMode::Global => argmax(&self.global_logits),
            DecisionMode::Local => argmax(&self.local_logits),
            DecisionMode::Sum => {
                let s: Vec<f64> = self.global_logits.iter().zip(&self.local_logits).map(|(a, b)| a + b).collect();
                argmax(&s)
            }
        }
    }
}

/// Global forward, proposal, and local forward for each image.
pub fn infer_batch<T: Scalar>(model: &Model<T>, images: &[&Tensor<f32>]) -> Result<Vec<Inference>> {
    let cfg = &model.cfg;
    let vit = model.vit();
    let cast: Vec<Tensor<T>> = images.iter().map(|i| i.cast()).collect();
    let refs: Vec<&Tensor<T>> = cast.iter().collect();
    let global = vit.forward(&refs, Branch::Global)?;
    let mut proposals = Vec::with_capacity(images.len());
    let mut local_images = Vec::with_capacity(images.len());
    for (img, out) in cast.iter().zip(&global) {
        let (region, fused) = propose_region(&out.attention, &model.gates, cfg)?;
        let rect = local_crop(&region, cfg);
        local_images.push(bilinear_resize(&crop(img, &rect)?, cfg.image_size_local, cfg.image_size_local)?);
        proposals.push((region, fused));
    }
    let refs: Vec<&Tensor<T>> = local_images.iter().collect();
    let local = vit.forward(&refs, Branch::Local)?;
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    Ok(global
        .iter()
        .zip(local)
        .zip(proposals)
        .map(|((g, l), (region, fused))| {
            let global_logits = to64(&g.logits);
            Inference {
                predicted: argmax(&global_logits),
                global_logits,
                local_logits: to64(&l.logits),
                region,
                gates: fused.gates_f64(),
                class_row: to64(&fused.class_row),
            }
        })
        .collect())
}

pub fn infer<T: Scalar>(model: &Model<T>, image: &Tensor<f32>) -> Result<Inference> {
    Ok(infer_batch(model, &[image])?.remove(0))
}

/// Accuracy under each decision rule plus localization quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub acc_global: f64,
    pub acc_local: f64,
    pub acc_sum: f64,
    /// Patches kept per image.
    pub selection_count: usize,
    pub mean_box_area: f64,
    /// Mean IoU against planted glyph boxes, when every sample has one.
    pub mean_iou: Option<f64>,
    /// Share of images with IoU above 0.25.
    pub hit_rate: Option<f64>,
    /// Images on which the three decision rules do not all agree.
    pub mode_disagreements: usize,
}

/// IoU above which a proposal counts as a hit.
pub const HIT_IOU: f64 = 0.25;

pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut hits = [0usize; 3];
    let (mut area, mut iou_sum, mut hit, mut with_box, mut disagree) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let modes = [DecisionMode::Global, DecisionMode::Local, DecisionMode::Sum];
    for chunk in samples.chunks(64) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        for (s, inf) in chunk.iter().zip(infer_batch(model, &images)?) {
            let decided = modes.map(|m| inf.decide(m));
            for (h, d) in hits.iter_mut().zip(decided) {
                *h += usize::from(d == s.label);
            }
            if decided[0] != decided[1] || decided[0] != decided[2] {
                disagree += 1;
            }
            area += inf.region.area() as f64;
            if let Some(g) = s.glyph_box {
                let iou = inf.region.iou(&g);
                iou_sum += iou;
                hit += usize::from(iou > HIT_IOU);
                with_box += 1;
            }
        }
    }
    let n = samples.len() as f64;
    let boxed = with_box == samples.len();
    Ok(EvalMetrics {
        count: samples.len(),
        acc_global: hits[0] as f64 / n,
        acc_local: hits[1] as f64 / n,
        acc_sum: hits[2] as f64 / n,
        selection_count: model.cfg.selection_count(),
        mean_box_area: area / n,
        mean_iou: boxed.then(|| iou_sum / n),
        hit_rate: boxed.then(|| hit as f64 / n),
        mode_disagreements: disagree,
    })
}
