//! Level-wise cross-entropy against the T-pyramid, fixed/adaptive loss
//! weighting, class weighting, SGD with polynomial decay, and metrics.

use crate::error::{QgnError, Result};
use crate::mask::Mask;
use crate::model::{ForwardPass, PropagationScheme, QgnModel};
use crate::pyramid::TPyramid;
use crate::sparse::{DenseTensor, Scalar, SparseActivation};

/// Per-level loss weights beta_l.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    /// beta_l = gamma^l, with beta_0 = 1.
    Fixed { gamma: f64 },
    /// Running average of the level loss: beta <- delta*beta + (1-delta)*L.
    Adaptive { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub mode: WeightMode,
    beta: Vec<f64>,
}

impl LossWeights {
    pub fn fixed(gamma: f64, levels: u8) -> Self {
        let beta = (0..=levels as usize).map(|l| gamma.powi(l as i32)).collect();
        Self { mode: WeightMode::Fixed { gamma }, beta }
    }

    /// Adaptive weighting, each beta initialized to 1.
    pub fn adaptive(delta: f64, levels: u8) -> Self {
        Self { mode: WeightMode::Adaptive { delta }, beta: vec![1.0; levels as usize + 1] }
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// EMA update from the current per-level losses. Weights are running
    /// statistics, never differentiated through.
    pub fn update_adaptive(&mut self, level_losses: &[f64]) -> Result<()> {
        let WeightMode::Adaptive { delta } = self.mode else {
            return Err(QgnError::Mode("adaptive update called in fixed mode".into()));
        };
        if level_losses.len() != self.beta.len() {
            return Err(QgnError::Shape("one loss per level required".into()));
        }
        for (b, &l) in self.beta.iter_mut().zip(level_losses) {
            *b = delta * *b + (1.0 - delta) * l;
        }
        Ok(())
    }
}

/// Weighted sum of the per-level losses using the current beta.
pub fn total_loss(level_losses: &[f64], lw: &LossWeights) -> Result<f64> {
    if level_losses.len() != lw.beta.len() {
        return Err(QgnError::Shape("one loss per level required".into()));
    }
    Ok(level_losses.iter().zip(&lw.beta).map(|(l, b)| l * b).sum())
}

/// Optimizer schedule and bookkeeping intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_power: f64,
    pub iters: u64,
    pub reweight_interval: u64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.02,
            decay_power: 0.9,
            iters: 2000,
            reweight_interval: 500,
            momentum: 0.0,
            seed: 0,
        }
    }
}

/// Polynomial decay: lr0 * (1 - i/i_max)^rho.
pub fn lr_at(cfg: &TrainConfig, i: u64) -> Result<f64> {
    if i > cfg.iters {
        return Err(QgnError::Bounds(format!("iteration {i} beyond {}", cfg.iters)));
    }
    Ok(cfg.lr0 * (1.0 - i as f64 / cfg.iters as f64).powf(cfg.decay_power))
}

/// Per-class loss weights in {1, 2}; index 0 is the composite class and
/// stays at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn ones(num_classes: u16) -> Self {
        Self { w: vec![1.0; num_classes as usize + 1] }
    }

    pub fn get(&self, class: u16) -> f64 {
        self.w[class as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

/// Classes strictly below the median IoU get weight 2. Even counts use
/// the lower median.
pub fn update_class_weights(per_class_iou: &[f64]) -> ClassWeights {
    let mut sorted: Vec<f64> = per_class_iou.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[(sorted.len() - 1) / 2];
    let mut w = vec![1.0];
    w.extend(per_class_iou.iter().map(|&iou| if iou < median { 2.0 } else { 1.0 }));
    ClassWeights { w }
}

fn softmax_f64<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = logits.iter().map(|&v| v.to_f64().unwrap()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean class-weighted cross-entropy over the active cells of one level.
/// Empty levels contribute zero.
pub fn level_loss<T: Scalar>(
    logits: &SparseActivation<T>,
    gt: &TPyramid,
    level: u8,
    cw: &ClassWeights,
) -> Result<f64> {
    Ok(level_loss_with_grad(logits, gt, level, cw)?.0)
}

/// Loss plus dLoss/dlogits for the same level (softmax cross-entropy
/// gradient, scaled by class weight / N).
pub fn level_loss_with_grad<T: Scalar>(
    logits: &SparseActivation<T>,
    gt: &TPyramid,
    level: u8,
    cw: &ClassWeights,
) -> Result<(f64, SparseActivation<T>)> {
    if level > gt.max_level() {
        return Err(QgnError::Shape(format!("gt pyramid has no level {level}")));
    }
    if logits.channels != gt.num_classes() as usize + 1 {
        return Err(QgnError::Shape(format!(
            "expected {} logit channels, got {}",
            gt.num_classes() + 1,
            logits.channels
        )));
    }
    let mut grad = SparseActivation::empty(logits.level, logits.width, logits.height, logits.channels);
    if logits.is_empty() {
        return Ok((0.0, grad));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    for (&(y, x), v) in &logits.sites {
        let target = gt.query(level, x, y)?;
        let weight = cw.get(target);
        let probs = softmax_f64(v);
        let p = probs[target as usize].max(f64::MIN_POSITIVE);
        loss += weight * -p.ln();
        let g: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, &pc)| {
                let delta = if c == target as usize { 1.0 } else { 0.0 };
                T::from_f64(weight * (pc - delta) / n).unwrap()
            })
            .collect();
        grad.sites.insert((y, x), g);
    }
    Ok((loss / n, grad))
}

/// Pixel accuracy, per-class IoU and mIoU over true/predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// `num_labels` label values 0..num_labels (include slot 0 when
    /// scoring level predictions with the composite class).
    pub fn new(num_labels: usize) -> Self {
        Self { num_labels, counts: vec![0; num_labels * num_labels] }
    }

    pub fn record(&mut self, truth: u16, pred: u16) {
        self.counts[(truth as usize) * self.num_labels + pred as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_labels)
            .map(|c| self.counts[c * self.num_labels + c])
            .sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// IoU per label: TP / (TP + FP + FN); labels absent from both truth
    /// and prediction give None.
    pub fn iou(&self, label: usize) -> Option<f64> {
        let tp = self.counts[label * self.num_labels + label];
        let fp: u64 = (0..self.num_labels)
            .filter(|&t| t != label)
            .map(|t| self.counts[t * self.num_labels + label])
            .sum();
        let fng: u64 = (0..self.num_labels)
            .filter(|&p| p != label)
            .map(|p| self.counts[label * self.num_labels + p])
            .sum();
        if tp + fp + fng == 0 {
            None
        } else {
            Some(tp as f64 / (tp + fp + fng) as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// IoU per dataset class 1..=k; classes absent from gt and pred are 0.
    pub per_class_iou: Vec<f64>,
    /// Mean over classes present in gt or pred.
    pub miou: f64,
}

/// Segmentation metrics between a predicted and a ground-truth mask.
pub fn metrics(pred: &Mask, gt: &Mask) -> Result<Metrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(QgnError::Shape("metrics dims mismatch".into()));
    }
    let k = gt.num_classes().max(pred.num_classes()) as usize;
    let mut cm = ConfusionMatrix::new(k + 1);
    for (&t, &p) in gt.data().iter().zip(pred.data()) {
        cm.record(t, p);
    }
    let mut per_class_iou = Vec::with_capacity(k);
    let mut present = Vec::new();
    for c in 1..=k {
        match cm.iou(c) {
            Some(iou) => {
                per_class_iou.push(iou);
                present.push(iou);
            }
            None => per_class_iou.push(0.0),
        }
    }
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Metrics { accuracy: cm.accuracy(), per_class_iou, miou })
}

/// Outcome of one optimization step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub total: f64,
    pub per_level: Vec<f64>,
}

/// Per-level losses and logit gradients for one forward pass, weighted
/// by beta. Losses are returned unweighted.
fn batch_level_grads<T: Scalar>(
    pass: &ForwardPass<T>,
    gt: &TPyramid,
    lw: &LossWeights,
    cw: &ClassWeights,
    batch_scale: f64,
) -> Result<(Vec<f64>, Vec<Option<SparseActivation<T>>>)> {
    let levels = pass.prediction.max_level as usize;
    let mut losses = Vec::with_capacity(levels + 1);
    let mut grads = Vec::with_capacity(levels + 1);
    for l in 0..=levels {
        let (loss, mut grad) =
            level_loss_with_grad(&pass.prediction.logits[l], gt, l as u8, cw)?;
        let scale = lw.beta()[l] * batch_scale;
        for v in grad.sites.values_mut() {
            for c in v.iter_mut() {
                *c = *c * T::from_f64(scale).unwrap();
            }
        }
        losses.push(loss);
        grads.push(Some(grad));
    }
    Ok((losses, grads))
}

/// One SGD step on a batch: forward under the scheme, level losses at
/// active cells, beta-weighted total, full backprop, parameter update,
/// then the adaptive beta update when applicable.
pub fn train_step(
    model: &mut QgnModel<f32>,
    batch: &[(DenseTensor<f32>, TPyramid)],
    scheme: PropagationScheme,
    lw: &mut LossWeights,
    cw: &ClassWeights,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<StepStats> {
    if scheme == PropagationScheme::Pc {
        return Err(QgnError::Config(
            "PC propagation is inference-only; train with all or gtc".into(),
        ));
    }
    if batch.is_empty() {
        return Err(QgnError::Input("empty batch".into()));
    }
    let levels = model.cfg.levels as usize;
    model.zero_grads();
    let batch_scale = 1.0 / batch.len() as f64;
    let mut per_level = vec![0.0; levels + 1];
    for (image, gt) in batch {
        let pass = model.forward(image, scheme, Some(gt))?;
        let (losses, grads) = batch_level_grads(&pass, gt, lw, cw, batch_scale)?;
        for (acc, l) in per_level.iter_mut().zip(&losses) {
            *acc += l * batch_scale;
        }
        model.backward(&pass, grads)?;
    }
    let total = total_loss(&per_level, lw)?;
    let lr = lr_at(cfg, iter)? as f32;
    sgd_update(model, lr, cfg.momentum as f32);
    if let WeightMode::Adaptive { .. } = lw.mode {
        lw.update_adaptive(&per_level)?;
    }
    Ok(StepStats { total, per_level })
}

fn sgd_update(model: &mut QgnModel<f32>, lr: f32, momentum: f32) {
    for p in model.param_layers_mut() {
        if momentum > 0.0 {
            if p.vw.is_empty() {
                p.vw = vec![0.0; p.w.len()];
                p.vb = vec![0.0; p.b.len()];
            }
            for ((w, g), v) in p.w.iter_mut().zip(&p.gw).zip(p.vw.iter_mut()) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
            for ((b, g), v) in p.b.iter_mut().zip(&p.gb).zip(p.vb.iter_mut()) {
                *v = momentum * *v + g;
                *b -= lr * *v;
            }
        } else {
            for (w, g) in p.w.iter_mut().zip(&p.gw) {
                *w -= lr * g;
            }
            for (b, g) in p.b.iter_mut().zip(&p.gb) {
                *b -= lr * g;
            }
        }
    }
}
