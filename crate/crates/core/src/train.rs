//! SGD training loop and the hold-out driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig};
use crate::dataset::{images_to_tensor, split, AnnotatedImage, SplitPlan};
use crate::detector::{build, forward_graph, DetectorConfig, DetectorWeights};
use crate::evalmetrics::{evaluate, EvalOptions, EvalReport};
use crate::losses::{assign_targets_with_ratio, total_loss_graph, LossBreakdown, LossConfig};
use crate::ndtensor::Graph;
use crate::{Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `lr · final_fraction` over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub final_lr_fraction: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this value.
    pub grad_clip_norm: Option<f64>,
    /// Seeds weight initialisation and batch shuffling.
    pub seed: u64,
    /// Fraction of subjects used for training in each hold-out round.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 2,
            lr: 0.01,
            weight_decay: 5e-5,
            momentum: 0.937,
            lr_schedule: LrSchedule::Constant,
            final_lr_fraction: 0.01,
            grad_clip_norm: Some(10.0),
            seed: 0,
            train_fraction: 0.8,
            split_seed: 0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("{} must be a non-negative number", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", format!("{} is not in [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("train.final_lr_fraction", "must be in [0, 1]"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip_norm", "must be positive"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train.train_fraction", "must be in (0, 1)"));
        }
        self.augment.validate()?;
        self.loss.validate()
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                let f = self.final_lr_fraction + (1.0 - self.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.lr * f
            }
        }
    }
}

/// SGD with a per-parameter momentum buffer:
/// `v ← m·v + g + wd·w` (no decay on biases), `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, weights: &mut DetectorWeights, grads: &BTreeMap<String, Vec<f32>>, lr: f64, momentum: f64, weight_decay: f64) {
        for (name, t) in weights.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            sgd_update(t.data_mut(), g, v, lr, momentum, if name.ends_with(".bias") { 0.0 } else { weight_decay });
        }
    }
}

/// One SGD update of a single parameter tensor.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = m * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

/// Shuffled mini-batches over the training subjects' slices. Refuses to
/// yield any image of a test subject.
pub struct BatchIterator<'a> {
    corpus: &'a [AnnotatedImage],
    plan: &'a SplitPlan,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(corpus: &'a [AnnotatedImage], plan: &'a SplitPlan, batch_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order = plan.train_indices(corpus);
        order.shuffle(rng);
        BatchIterator { corpus, plan, order, batch_size, pos: 0 }
    }

    /// Builds an iterator over an explicit order, for inspecting the guard.
    pub fn from_order(corpus: &'a [AnnotatedImage], plan: &'a SplitPlan, order: Vec<usize>, batch_size: usize) -> Self {
        BatchIterator { corpus, plan, order, batch_size, pos: 0 }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        for &i in &batch {
            let s = &self.corpus[i].subject_id;
            if self.plan.test_subjects.contains(s) || !self.plan.train_subjects.contains(s) {
                return Some(Err(Error::Leakage(format!("image {i} of subject {s} is not a training image of round {}", self.plan.round_id))));
            }
        }
        Some(Ok(batch))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Boxes dropped by mosaic clipping.
    pub clipped_box_warnings: usize,
    /// Ground-truth boxes that no anchor accepted.
    pub unassigned_boxes: usize,
    /// Epochs whose loss exceeded the maximum of the preceding ten.
    pub non_decreasing_windows: usize,
    pub final_eval: Option<EvalReport>,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    /// `epoch,box_loss,obj_loss,cls_loss,total,seconds`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,box_loss,obj_loss,cls_loss,total,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.3}", e.epoch, e.box_loss, e.obj_loss, e.cls_loss, e.total, e.seconds);
        }
        s
    }
}

/// One forward/backward pass over a batch; returns the loss and the
/// gradient of every parameter.
pub fn loss_and_gradients(
    weights: &DetectorWeights,
    batch: &[&AnnotatedImage],
    lcfg: &LossConfig,
    exec: Exec,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f32>>, usize)> {
    let cfg = weights.config();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images)?;
    let gt: Vec<_> = batch.iter().map(|s| s.boxes.clone()).collect();
    let assignment = assign_targets_with_ratio(&gt, cfg, lcfg.anchor_ratio);
    let mut g = Graph::with_exec(exec);
    let params = weights.register(&mut g, true);
    let input = g.constant(x);
    let (heads, _) = forward_graph(&mut g, cfg, &params, input, &[])?;
    let (loss, breakdown) = total_loss_graph(&mut g, &heads, &assignment, cfg, lcfg)?;
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|(k, &v)| (k.clone(), g.grad(v).map(<[f32]>::to_vec).unwrap_or_default()))
        .collect();
    Ok((breakdown, grads, assignment.unassigned.len()))
}

fn clip_gradients(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) {
    let norm = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
}

/// Trains from a fresh initialisation on the split's training subjects.
pub fn train_round(
    corpus: &[AnnotatedImage],
    plan: &SplitPlan,
    dcfg: &DetectorConfig,
    tcfg: &TrainConfig,
) -> Result<(DetectorWeights, TrainLog)> {
    train_round_with(corpus, plan, dcfg, tcfg, &mut |_| {})
}

pub fn train_round_with(
    corpus: &[AnnotatedImage],
    plan: &SplitPlan,
    dcfg: &DetectorConfig,
    tcfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(DetectorWeights, TrainLog)> {
    tcfg.validate()?;
    plan.check_disjoint()?;
    let train = plan.train_indices(corpus);
    if train.is_empty() {
        return Err(Error::Dataset { record: format!("round {}", plan.round_id), detail: "training split is empty".into() });
    }
    let mut weights = build(dcfg, tcfg.seed)?;
    let mut sgd = Sgd::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5EED_5A1E);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tcfg.augment.seed);
    let steps_per_epoch = train.len().div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        let t0 = Instant::now();
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for batch in BatchIterator::new(corpus, plan, tcfg.batch_size, &mut shuffle_rng) {
            let batch = batch?;
            let samples: Vec<AnnotatedImage> = batch
                .iter()
                .map(|&i| {
                    let (s, w) = augment_sample(corpus, i, &train, dcfg.input_size, &tcfg.augment, &mut aug_rng);
                    log.clipped_box_warnings += w;
                    s
                })
                .collect();
            let refs: Vec<&AnnotatedImage> = samples.iter().collect();
            let (b, mut grads, unassigned) = loss_and_gradients(&weights, &refs, &tcfg.loss, tcfg.exec)?;
            log.unassigned_boxes += unassigned;
            let finite = b.total.is_finite() && grads.values().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(Error::Diverged { epoch, step: steps + 1, detail: format!("loss {:?}", b) });
            }
            if let Some(c) = tcfg.grad_clip_norm {
                clip_gradients(&mut grads, c);
            }
            sgd.step(&mut weights, &grads, tcfg.lr_at(step, total_steps), tcfg.momentum, tcfg.weight_decay);
            step += 1;
            steps += 1;
            for (s, v) in sums.iter_mut().zip([b.box_loss, b.obj_loss, b.cls_loss, b.total]) {
                *s += v;
            }
        }
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            steps,
            box_loss: sums[0] / n,
            obj_loss: sums[1] / n,
            cls_loss: sums[2] / n,
            total: sums[3] / n,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let window = log.epochs.iter().rev().take(10).map(|e| e.total).fold(f64::NEG_INFINITY, f64::max);
        if log.epochs.len() >= 10 && entry.total > window {
            log.non_decreasing_windows += 1;
        }
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((weights, log))
}

/// Outcome of one hold-out round.
#[derive(Clone, Debug)]
pub struct RoundResult {
    pub plan: SplitPlan,
    pub weights: DetectorWeights,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Splits, trains and evaluates `rounds` times. Rounds are independent and
/// run in parallel under `Exec::Parallel`; each round's own loops then run
/// sequentially so results do not depend on the scheduling.
pub fn holdout(
    corpus: &[AnnotatedImage],
    rounds: usize,
    dcfg: &DetectorConfig,
    tcfg: &TrainConfig,
    eval: &EvalOptions,
) -> Result<Vec<RoundResult>> {
    holdout_with(corpus, rounds, dcfg, tcfg, eval, &|_, _| {})
}

pub fn holdout_with(
    corpus: &[AnnotatedImage],
    rounds: usize,
    dcfg: &DetectorConfig,
    tcfg: &TrainConfig,
    eval: &EvalOptions,
    on_epoch: &(dyn Fn(usize, &EpochLog) + Sync),
) -> Result<Vec<RoundResult>> {
    tcfg.validate()?;
    let plans = split(corpus, tcfg.train_fraction, rounds, tcfg.split_seed)?;
    let inner = TrainConfig { exec: if rounds > 1 { Exec::Sequential } else { tcfg.exec }, ..tcfg.clone() };
    let outer = if rounds > 1 { tcfg.exec } else { Exec::Sequential };
    let results = outer.map_slice(&plans, |plan| -> Result<RoundResult> {
        let (weights, mut log) =
            train_round_with(corpus, plan, dcfg, &inner, &mut |e| on_epoch(plan.round_id, e))?;
        let test = plan.test_indices(corpus);
        let report = evaluate(&weights, corpus, &test, eval, inner.exec)?;
        log.final_eval = Some(report.clone());
        Ok(RoundResult { plan: plan.clone(), weights, log, report })
    });
    results.into_iter().collect()
}
