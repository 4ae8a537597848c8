use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Augment, PairSample, PairSource};
use super::loss::{assign_targets, cross_entropy, tracking_loss, LossWeights};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::error::{config_err, contract_err, Result};
use crate::harness::{decode_crop_box, iou};
use crate::model::{Model, Prediction};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    /// Steps at which both learning rates drop by a factor of 10.
    pub decay_steps: Vec<usize>,
    pub seed: u64,
    /// Probe IoU is measured every `probe_every` steps (0: first and last only).
    pub probe_every: usize,
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_head: 2e-3,
            lr_backbone: 2e-3,
            weight_decay: 1e-4,
            batch: 8,
            steps: 900,
            decay_steps: vec![720],
            seed: 0,
            probe_every: 50,
            grad_clip: 10.0,
            loss: LossWeights::default(),
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_head > 0.0 && self.lr_backbone >= 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if self.lr_backbone > self.lr_head {
            return Err(config_err!("backbone rate {} exceeds head rate {}", self.lr_backbone, self.lr_head));
        }
        if self.batch == 0 {
            return Err(config_err!("batch must be at least 1"));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(config_err!("grad_clip must be positive and weight_decay non-negative"));
        }
        self.loss.validate()
    }

    /// Multiplier on the base rates at `step`: `0.1^k` after `k` decays.
    pub fn lr_factor(&self, step: usize) -> f64 {
        0.1f64.powi(self.decay_steps.iter().filter(|&&d| d <= step).count() as i32)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err!("train config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_giou: f64,
    pub loss_l1: f64,
    pub loss_total: f64,
    /// Head learning rate in effect for this step.
    pub lr: f64,
    /// Latest probe IoU (carried forward between probes).
    pub probe_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss_cls,loss_giou,loss_l1,loss_total,lr,probe_iou";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:e},{:.6}",
                r.step, r.loss_cls, r.loss_giou, r.loss_l1, r.loss_total, r.lr, r.probe_iou
            )
            .expect("write to string");
        }
        s
    }
}

/// Batch-mean loss parts of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Owns the optimizer state; the only mutator of the model's weights.
pub struct Trainer<F: Float> {
    pub model: Model<F>,
    pub config: TrainConfig,
    opt: AdamW,
    head: Vec<bool>,
    step: usize,
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("classifier.")
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() }, model.store());
        let head = model.store().iter().map(|(_, n, _)| is_head(n)).collect();
        Ok(Self { model, config, opt, head, step: 0 })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    fn rates(&self) -> Vec<f64> {
        let f = self.config.lr_factor(self.step);
        self.head
            .iter()
            .map(|&h| f * if h { self.config.lr_head } else { self.config.lr_backbone })
            .collect()
    }

    fn apply(&mut self, mut grads: Vec<Option<Tensor<F>>>) -> Result<f64> {
        let norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = self.rates();
        self.opt.step(self.model.store_mut(), &grads, &lr)?;
        self.step += 1;
        Ok(norm)
    }

    /// Per-sample graphs with gradients averaged over the batch.
    pub fn train_step(&mut self, batch: &[PairSample<F>]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let scale = F::of(1.0 / batch.len() as f64);
        let n = self.model.config().score_size();
        let mut acc: Vec<Option<Tensor<F>>> = vec![None; self.model.store().len()];
        let mut stats = StepStats::default();
        for p in batch {
            let targets = assign_targets::<F>(&p.gt, (n, n), &p.meta)?;
            let mut g = Graph::new();
            let z = g.constant(p.template.clone());
            let x = g.constant(p.search.clone());
            let (cls, reg) = self.model.forward_graph(&mut g, z, x)?;
            let loss = tracking_loss(&mut g, cls, reg, &targets, &self.config.loss)?;
            g.backward(loss.total)?;
            stats.cls += g.value(loss.cls).item().as_f64();
            stats.giou += g.value(loss.giou).item().as_f64();
            stats.l1 += g.value(loss.l1).item().as_f64();
            stats.total += g.value(loss.total).item().as_f64();
            accumulate(&mut acc, g.param_grads(self.model.store()), scale);
        }
        let k = batch.len() as f64;
        stats.cls /= k;
        stats.giou /= k;
        stats.l1 /= k;
        stats.total /= k;
        stats.grad_norm = self.apply(acc)?;
        Ok(stats)
    }

    /// Softmax cross-entropy step for a classifier model; returns the mean loss.
    pub fn classification_step(&mut self, images: &[Tensor<F>], labels: &[usize]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(contract_err!("{} images for {} labels", images.len(), labels.len()));
        }
        let scale = F::of(1.0 / images.len() as f64);
        let mut acc: Vec<Option<Tensor<F>>> = vec![None; self.model.store().len()];
        let mut total = 0.0;
        for (img, &label) in images.iter().zip(labels) {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let logits = self.model.classify_graph(&mut g, x)?;
            let loss = cross_entropy(&mut g, logits, label)?;
            g.backward(loss)?;
            total += g.value(loss).item().as_f64();
            accumulate(&mut acc, g.param_grads(self.model.store()), scale);
        }
        self.apply(acc)?;
        Ok(total / images.len() as f64)
    }
}

fn accumulate<F: Float>(acc: &mut [Option<Tensor<F>>], grads: Vec<Option<Tensor<F>>>, scale: F) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v * scale),
            None => *a = Some(g.map(|v| v * scale)),
        }
    }
}

/// Mean IoU (in crop coordinates) of decoded predictions on `probe`.
pub fn probe_iou<F: Float>(model: &Model<F>, probe: &[PairSample<F>]) -> Result<f64> {
    if probe.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in probe {
        let pred: Prediction<F> = model.forward(&p.template, &p.search)?;
        let b = decode_crop_box(&pred, model.config().search_size)?;
        sum += iou(&b, &p.gt);
    }
    Ok(sum / probe.len() as f64)
}

/// Runs `tc.steps` optimization steps on batches drawn from `source`,
/// logging losses, the head learning rate and the probe IoU per step.
pub fn train<F: Float>(
    model: Model<F>,
    source: &mut dyn PairSource<F>,
    tc: &TrainConfig,
    probe: &[PairSample<F>],
) -> Result<(Model<F>, TrainLog)> {
    let mut trainer = Trainer::new(model, tc.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = TrainLog::default();
    let mut probe_value = probe_iou(&trainer.model, probe)?;
    for step in 0..tc.steps {
        let batch = (0..tc.batch).map(|_| source.next_pair(&mut rng)).collect::<Result<Vec<_>>>()?;
        let lr = tc.lr_head * tc.lr_factor(step);
        let s = trainer.train_step(&batch)?;
        let last = step + 1 == tc.steps;
        if last || (tc.probe_every > 0 && (step + 1) % tc.probe_every == 0) {
            probe_value = probe_iou(&trainer.model, probe)?;
        }
        log.rows.push(LogRow {
            step,
            loss_cls: s.cls,
            loss_giou: s.giou,
            loss_l1: s.l1,
            loss_total: s.total,
            lr,
            probe_iou: probe_value,
        });
    }
    Ok((trainer.model, log))
}
