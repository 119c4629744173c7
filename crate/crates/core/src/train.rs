//! SGD training with warmup + cosine learning rate, and dataset evaluation.

use crate::augment::{mixup, mosaic};
use crate::boxes::{coco_thresholds, mean_average_precision, nms, Detection, MapReport};
use crate::data::Sample;
use crate::error::{cfg_err, Error, Result};
use crate::loss::{detection_loss, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::autograd::Graph;
use crate::targets::{assign_targets, decode};
use crate::tensor::{concat, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mosaic_prob: f64,
    pub mixup_prob: f64,
    pub mixup_beta: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            base_lr: 0.01,
            lr_min: 1e-4,
            warmup_steps: 100,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: Some(10.0),
            mosaic_prob: 0.5,
            mixup_prob: 0.15,
            mixup_beta: 8.0,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(cfg_err!("epochs, batch_size and warmup_steps must be positive"));
        }
        if !(self.base_lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.base_lr) {
            return Err(cfg_err!("need 0 < lr_min ≤ base_lr, got {} and {}", self.lr_min, self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(cfg_err!("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        for (name, p) in [("mosaic_prob", self.mosaic_prob), ("mixup_prob", self.mixup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(cfg_err!("{name} {p} outside [0, 1]"));
            }
        }
        let w = &self.loss;
        if [w.coord, w.obj, w.noobj, w.cls].iter().any(|&v| !(v >= 0.0)) {
            return Err(cfg_err!("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    /// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay
    /// reaching `lr_min` at step `total_steps − 1`.
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * (step + 1) as f64 / w as f64;
        }
        let last = total_steps.saturating_sub(1);
        if last <= w || step >= last {
            return self.lr_min;
        }
        let t = (step - w) as f64 / (last - w) as f64;
        self.lr_min + (self.base_lr - self.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    /// Per-image means over the epoch.
    pub loss: LossBreakdown,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub wall_ms: f64,
}

impl EpochMetrics {
    /// The record with timing removed, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        Self { wall_ms: 0.0, ..*self }
    }
}

fn batch_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    let s = samples[0].size();
    let parts: Vec<Tensor<f32>> = samples.iter().map(|x| x.image.reshape(&[1, 3, s, s])).collect::<Result<_>>()?;
    concat(&parts.iter().collect::<Vec<_>>(), 0)
}

fn augmented(data: &[Sample], idx: usize, sched: &TrainSchedule, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut s = if rng.gen_bool(sched.mosaic_prob) {
        let others: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..data.len()));
        mosaic([&data[idx], &data[others[0]], &data[others[1]], &data[others[2]]], rng.gen())?
    } else {
        data[idx].clone()
    };
    if rng.gen_bool(sched.mixup_prob) {
        let other = &data[rng.gen_range(0..data.len())];
        s = mixup(&s, other, sched.mixup_beta, rng.gen())?;
    }
    Ok(s)
}

/// Trains `model` in place. `on_epoch` sees every epoch's metrics and the
/// model after that epoch.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    sched: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    sched.validate()?;
    if data.is_empty() {
        return Err(cfg_err!("training set is empty"));
    }
    let cfg = *model.config();
    let steps_per_epoch = sched.steps_per_epoch(data.len());
    let total = steps_per_epoch * sched.epochs;
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let decays: Vec<bool> = model.params().iter().map(|(_, t)| t.rank() > 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| augmented(data, i, sched, &mut rng)).collect::<Result<_>>()?;
            let images = batch_images(&batch)?;
            let labels: Vec<_> = batch.iter().map(|s| s.labels.clone()).collect();
            let targets = assign_targets::<f32>(&labels, cfg.num_classes, cfg.input_size);
            let n = batch.len() as f64;

            let (values, mut grads) = {
                let mut g = Graph::new();
                let p = model.params().bind(&mut g, true);
                let x = g.constant(images);
                let preds = model.forward(&mut g, &p, x)?;
                let l = detection_loss(&mut g, &preds, &targets, &sched.loss, cfg.input_size)?;
                let values = l.values(&g);
                if !values.total.is_finite() {
                    return Err(Error::Contract(format!("loss became {} at step {step} (epoch {epoch})", values.total)));
                }
                let mean = g.scale(l.total, 1.0 / n)?;
                g.backward(mean)?;
                let grads: Vec<Vec<f32>> = p.iter().map(|&v| g.take_grad(v).expect("parameter gradient")).collect();
                (values, grads)
            };

            if let Some(clip) = sched.grad_clip {
                let norm = grads.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Contract(format!("gradient norm became {norm} at step {step} (epoch {epoch})")));
                }
                if norm > clip {
                    let k = (clip / norm) as f32;
                    grads.iter_mut().flatten().for_each(|v| *v *= k);
                }
            }
            lr = sched.lr(step, total);
            let (lr32, mu, wd) = (lr as f32, sched.momentum as f32, sched.weight_decay as f32);
            for (((t, grad), vel), &decay) in model.params_mut().tensors_mut().zip(&grads).zip(&mut velocity).zip(&decays) {
                for ((w, &gr), v) in t.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                    let gr = if decay { gr + wd * *w } else { gr };
                    *v = mu * *v + gr;
                    *w -= lr32 * *v;
                }
            }
            sums.total += values.total;
            sums.coord += values.coord;
            sums.obj += values.obj;
            sums.noobj += values.noobj;
            sums.cls += values.cls;
            step += 1;
        }
        let k = data.len() as f64;
        let loss = LossBreakdown { total: sums.total / k, coord: sums.coord / k, obj: sums.obj / k, noobj: sums.noobj / k, cls: sums.cls / k };
        let metrics = EpochMetrics { epoch, steps: step, loss, lr, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
        on_epoch(&metrics, model)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Post-processing thresholds for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { conf_thresh: 0.01, nms_iou: 0.5, batch_size: 16 }
    }
}

/// Decoded, suppressed detections per sample.
pub fn predict_dataset(model: &Model, data: &[Sample], settings: &EvalSettings) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(settings.batch_size.max(1)) {
        let preds = model.predict(&batch_images(chunk)?)?;
        for dets in decode(&preds, model.config().input_size, settings.conf_thresh) {
            out.push(nms(&dets, settings.nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &[Sample], settings: &EvalSettings) -> Result<MapReport> {
    let dets = predict_dataset(model, data, settings)?;
    let gts: Vec<_> = data.iter().map(|s| s.labels.clone()).collect();
    Ok(mean_average_precision(&dets, &gts, model.config().num_classes, &coco_thresholds()))
}
