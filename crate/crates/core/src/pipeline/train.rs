use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::eval::evaluate;
use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{argmax, bilinear_resize, crop, OptimizerState, PixelRect, Scalar, Tape, Tensor, Var, WarmupCosine};
use crate::sacm::{propose_region, RegionBox};
use crate::vit::{branch_on_tape, capture_attention, Branch, EncoderParams, ModelConfig};

/// The three scalars of the multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

/// What one optimizer step saw and did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossParts,
    /// Proposed box of each sample.
    pub regions: Vec<RegionBox>,
    /// Rectangle actually cut out for the local branch.
    pub crops: Vec<PixelRect>,
    /// Layer gates of each sample.
    pub gates: Vec<Vec<f64>>,
    pub lr: f64,
    /// Samples the global logits classified correctly before the update.
    pub correct: usize,
}

/// Crop rectangle for a proposal. Boxes narrower than one patch fall back to
/// the whole image.
pub fn local_crop(region: &RegionBox, cfg: &ModelConfig) -> PixelRect {
    let size = cfg.image_size_global;
    let rect = region.rect().clamp_to(size, size);
    if rect.height() < cfg.patch_size || rect.width() < cfg.patch_size {
        PixelRect::full(size, size)
    } else {
        rect
    }
}

struct LossGraph {
    global: Var,
    local: Var,
    total: Var,
    global_logits: Var,
    regions: Vec<RegionBox>,
    crops: Vec<PixelRect>,
    gates: Vec<Vec<f64>>,
}

fn check_batch(cfg: &ModelConfig, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(Error::Input(format!("label {} outside {} classes", s.label, cfg.num_classes)));
    }
    Ok(())
}

/// Global forward, region proposal (or the given crops), local forward on
/// the resized crops, and `α·Loss_g + β·Loss_l`.
fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderParams<Var>,
    model: &Model<T>,
    batch: &[Sample],
    fixed_crops: Option<&[PixelRect]>,
) -> Result<LossGraph> {
    let cfg = &model.cfg;
    check_batch(cfg, batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let images: Vec<Tensor<T>> = batch.iter().map(|s| s.image.cast()).collect();
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let g = branch_on_tape(tape, vars, cfg, Branch::Global, &refs)?;
    let global = tape.cross_entropy(g.logits, &labels)?;

    let (regions, crops, gates) = match fixed_crops {
        Some(c) if c.len() == batch.len() => (Vec::new(), c.to_vec(), Vec::new()),
        Some(c) => {
            return Err(Error::Usage(format!("{} crops for {} samples", c.len(), batch.len())));
        }
        None => {
            let stacks = capture_attention(tape, &g.attention)?;
            let mut regions = Vec::with_capacity(batch.len());
            let mut gates = Vec::with_capacity(batch.len());
            for stack in &stacks {
                let (region, fused) = propose_region(stack, &model.gates, cfg)?;
                gates.push(fused.gates_f64());
                regions.push(region);
            }
            let crops = regions.iter().map(|r| local_crop(r, cfg)).collect();
            (regions, crops, gates)
        }
    };

    let local_size = cfg.image_size_local;
    let local_images = images
        .iter()
        .zip(&crops)
        .map(|(img, rect)| bilinear_resize(&crop(img, rect)?, local_size, local_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = local_images.iter().collect();
    let l = branch_on_tape(tape, vars, cfg, Branch::Local, &refs)?;
    let local = tape.cross_entropy(l.logits, &labels)?;

    let weighted_g = tape.scale(global, T::from_f64_lossy(cfg.alpha))?;
    let weighted_l = tape.scale(local, T::from_f64_lossy(cfg.beta))?;
    let total = tape.add(weighted_g, weighted_l)?;
    Ok(LossGraph {
        global,
        local,
        total,
        global_logits: g.logits,
        regions,
        crops,
        gates,
    })
}

fn parts<T: Scalar>(tape: &Tape<T>, graph: &LossGraph) -> LossParts {
    let v = |x: Var| tape.value(x).data()[0].as_f64();
    LossParts {
        global: v(graph.global),
        local: v(graph.local),
        total: v(graph.total),
    }
}

/// Loss of a batch without gradients. With `crops` the local branch uses
/// those rectangles instead of fresh proposals.
pub fn compute_loss<T: Scalar>(model: &Model<T>, batch: &[Sample], crops: Option<&[PixelRect]>) -> Result<LossParts> {
    let mut tape = Tape::new();
    let vars = model.params.map(|_, t| tape.constant(t.clone()));
    let graph = build_loss(&mut tape, &vars, model, batch, crops)?;
    Ok(parts(&tape, &graph))
}

/// Loss, gradient of the total with respect to every encoder parameter, and
/// the crops that were used.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[Sample],
    crops: Option<&[PixelRect]>,
) -> Result<(LossParts, EncoderParams<Tensor<T>>, Vec<PixelRect>)> {
    let pass = Backward::run(model, batch, crops)?;
    let (loss, crops) = (pass.loss, pass.graph.crops.clone());
    Ok((loss, pass.into_grads(&model.params)?, crops))
}

struct Backward<T> {
    tape: Tape<T>,
    vars: EncoderParams<Var>,
    graph: LossGraph,
    loss: LossParts,
}

impl<T: Scalar> Backward<T> {
    fn run(model: &Model<T>, batch: &[Sample], crops: Option<&[PixelRect]>) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = model.params.map(|_, t| tape.param(t.clone()));
        let graph = build_loss(&mut tape, &vars, model, batch, crops)?;
        let loss = parts(&tape, &graph);
        tape.backward(graph.total)?;
        Ok(Self { tape, vars, graph, loss })
    }

    fn into_grads(mut self, params: &EncoderParams<Tensor<T>>) -> Result<EncoderParams<Tensor<T>>> {
        let grads = self
            .vars
            .slots()
            .into_iter()
            .zip(params.slots())
            .map(|(&v, p)| self.tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        EncoderParams::from_slots(&params.map(|_, _| ()), grads)
    }
}

/// One SGD step on `α·Loss_g + β·Loss_l` over the batch.
pub fn train_step<T: Scalar>(model: &mut Model<T>, batch: &[Sample], opt: &mut OptimizerState<T>) -> Result<StepReport> {
    let pass = Backward::run(model, batch, None)?;
    let logits = pass.tape.value(pass.graph.global_logits).clone();
    let classes = model.cfg.num_classes;
    let correct = batch
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(&logits.data()[i * classes..(i + 1) * classes]) == s.label)
        .count();
    let (loss, regions, crops, gates) = (
        pass.loss,
        pass.graph.regions.clone(),
        pass.graph.crops.clone(),
        pass.graph.gates.clone(),
    );
    let grads = pass.into_grads(&model.params)?;
    let grad_refs = grads.slots();
    let mut slots = model.params.slots_mut();
    let lr = opt.step(&mut slots, &grad_refs)?;
    Ok(StepReport {
        loss,
        regions,
        crops,
        gates,
        lr,
        correct,
    })
}

/// Loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    /// Stop once accuracy on the training set reaches this.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 300,
            batch_size: 16,
            base_lr: 0.01,
            warmup_steps: 50,
            momentum: 0.9,
            stop_at_train_acc: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if let Some(t) = self.stop_at_train_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("stop_at_train_acc", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size.max(1))
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_total: f64,
    /// Running accuracy of the global logits over the epoch.
    pub train_acc: f64,
    /// Mean IoU of proposals against planted glyphs, when known.
    pub mean_iou: Option<f64>,
}

/// Owns a model and its optimizer for a multi-epoch run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    pub options: TrainOptions,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, options: TrainOptions, num_samples: usize) -> Result<Self> {
        options.validate()?;
        model.cfg.validate()?;
        if num_samples == 0 {
            return Err(Error::Input("no training samples".into()));
        }
        let schedule = WarmupCosine {
            base_lr: options.base_lr,
            warmup_steps: options.warmup_steps,
            total_steps: options.epochs * options.steps_per_epoch(num_samples),
        };
        let opt = OptimizerState::new(schedule, options.momentum, model.params.slots())?;
        let rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5e_ed0f_0d3e);
        Ok(Self {
            model,
            opt,
            options,
            epoch: 0,
            rng,
        })
    }

    /// One pass over `samples` in a seeded shuffled order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut lg, mut ll, mut lt) = (0.0, 0.0, 0.0);
        let (mut correct, mut iou_sum, mut iou_n) = (0, 0.0, 0);
        let mut steps = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(self.options.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let report = train_step(&mut self.model, &batch, &mut self.opt)?;
            let w = batch.len() as f64;
            lg += report.loss.global * w;
            ll += report.loss.local * w;
            lt += report.loss.total * w;
            correct += report.correct;
            for (s, r) in batch.iter().zip(&report.regions) {
                if let Some(g) = s.glyph_box {
                    iou_sum += r.iou(&g);
                    iou_n += 1;
                }
            }
            lr = report.lr;
            steps += 1;
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps,
            lr,
            loss_global: lg / n,
            loss_local: ll / n,
            loss_total: lt / n,
            train_acc: correct as f64 / n,
            mean_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        };
        log::info!(
            "epoch {} loss {:.4} (g {:.4}, l {:.4}) acc {:.3} lr {:.4}",
            metrics.epoch,
            metrics.loss_total,
            metrics.loss_global,
            metrics.loss_local,
            metrics.train_acc,
            metrics.lr
        );
        Ok(metrics)
    }

    /// Runs the configured epochs, or fewer once the training set is
    /// classified well enough. `on_epoch` sees every epoch's metrics.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.options.epochs {
            let m = self.run_epoch(samples)?;
            on_epoch(&m)?;
            let running = m.train_acc;
            history.push(m);
            if let Some(target) = self.options.stop_at_train_acc {
                if running >= target && evaluate(&self.model, samples)?.acc_global >= target {
                    log::info!("training accuracy reached {target} after {} epochs", self.epoch);
                    break;
                }
            }
        }
        Ok(history)
    }
}
