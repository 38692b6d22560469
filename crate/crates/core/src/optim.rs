//! Mini-batch training with SGD or Adam, mask-aware updates and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, nll_sum, Gradients, Mode, Network, Params, BN_MOMENTUM};
use crate::pruning::Mask;
use crate::rng::{self, stream};

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 35,
            early_stop_patience: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| {
            Err(Error::Config {
                field: format!("train.{field}"),
                detail,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", format!("{} outside [0, 1)", self.adam_beta1));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", format!("{} outside [0, 1)", self.adam_beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("{} must be positive", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive".into());
        }
        Ok(())
    }
}

fn check_finite(grads: &Gradients) -> Result<()> {
    for (slot, values) in grads.iter() {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                layer: slot.layer,
                role: slot.role.name(),
            });
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`; masked entries are forced to zero.
pub fn sgd_step(theta: &mut Params, grads: &Gradients, mask: Option<&Mask>, lr: f64) -> Result<()> {
    theta.ensure_congruent(grads, "gradient")?;
    check_finite(grads)?;
    theta.axpy(-lr, grads);
    if let Some(m) = mask {
        m.apply(theta)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        AdamState {
            m: Params::zeros(like.layout()),
            v: Params::zeros(like.layout()),
            step: 0,
        }
    }

    /// Clears the moments of pruned coordinates.
    pub fn zero_masked(&mut self, mask: &Mask) -> Result<()> {
        mask.apply(&mut self.m)?;
        mask.apply(&mut self.v)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    theta: &mut Params,
    grads: &Gradients,
    mask: Option<&Mask>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    theta.ensure_congruent(grads, "gradient")?;
    theta.ensure_congruent(&state.m, "adam state")?;
    check_finite(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for slot in 0..theta.slot_count() {
        let g = grads.get(slot);
        let m = state.m.get_mut(slot);
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(slot);
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(slot), state.v.get(slot));
        for ((w, mi), vi) in theta.get_mut(slot).iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    if let Some(mask) = mask {
        mask.apply(theta)?;
        state.zero_masked(mask)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    /// Same numbers, ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.train_loss) == bits(&other.train_loss)
            && bits(&self.val_loss) == bits(&other.val_loss)
            && bits(&self.val_accuracy) == bits(&other.val_accuracy)
            && self.best_epoch == other.best_epoch
    }
}

/// Eval-mode mean loss and accuracy over a dataset.
pub fn evaluate(net: &Network, mask: Option<&Mask>, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.source().into()));
    }
    let mut effective = net.theta().clone();
    if let Some(m) = mask {
        m.apply(&mut effective)?;
    }
    let classes = net.classes();
    let row = data.images().row_len();
    if data.example_shape() != net.arch().input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "dataset examples {:?} vs network input {:?}",
            data.example_shape(),
            net.arch().input_shape()
        )));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    let images = data.images().data();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = net.eval_logits_with(&effective, &images[start * row..end * row], end - start);
        let labels = &data.labels()[start..end];
        total = nll_sum(&logits, classes, labels, total);
        correct += logits
            .chunks_exact(classes)
            .zip(labels)
            .filter(|(l, &y)| argmax(l) == y)
            .count();
    }
    Ok((total / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains and returns the best-validation-loss snapshot.
pub fn train(
    net: &Network,
    mask: Option<&Mask>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    train_with_progress(net, mask, train_set, val_set, config, &mut |_| {})
}

pub fn train_with_progress(
    net: &Network,
    mask: Option<&Mask>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let started = Instant::now();
    let mut net = net.clone();
    if let Some(m) = mask {
        m.apply(net.theta_mut())?;
    }
    let mut adam = AdamState::new(net.theta());
    let adam_cfg = AdamConfig::from(config);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0usize;
    let mut step = 0u64;
    let n = train_set.len();
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream_rng(config.seed, stream::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train_set.gather(batch);
            let mut dropout = rng::stream_rng(config.seed, stream::DROPOUT, step);
            let (loss, grads, stats) = net.backward_with_stats(mask, &x, &y, Mode::Train, &mut dropout)?;
            match config.optimizer {
                OptimizerKind::Sgd => sgd_step(net.theta_mut(), &grads, mask, config.learning_rate)?,
                OptimizerKind::Adam => adam_step(net.theta_mut(), &grads, mask, &mut adam, &adam_cfg)?,
            }
            net.update_running_stats(&stats, BN_MOMENTUM);
            total += loss * batch.len() as f64;
            step += 1;
        }
        if let Some(m) = mask {
            debug_assert!(m.preserves_zeros(net.theta()));
        }
        let (val_loss, val_accuracy) = evaluate(&net, mask, val_set)?;
        let stats = EpochStats {
            epoch,
            train_loss: total / n as f64,
            val_loss,
            val_accuracy,
        };
        report.train_loss.push(stats.train_loss);
        report.val_loss.push(val_loss);
        report.val_accuracy.push(val_accuracy);
        on_epoch(&stats);
        let improved = match &best {
            None => true,
            Some((b, _)) => val_loss < *b,
        };
        if improved {
            best = Some((val_loss, net.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            break;
        }
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, report))
}
