//! Softmax, sparse categorical cross-entropy, SGD with momentum, and the
//! epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{argmax_row, confusion, report, ClassReport};
use crate::resnet::{Mode, Network};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub width_mult: f64,
    /// Optional per-class loss weights; None mirrors the unweighted loss.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            width_mult: 1.0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArg(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be >= 1".into()));
        }
        if !(self.width_mult > 0.0) {
            return Err(Error::InvalidArg(format!(
                "width multiplier must be > 0, got {}",
                self.width_mult
            )));
        }
        Ok(())
    }
}

/// Row-wise softmax with max-subtraction: f(s_i) = e^{s_i} / Σ_j e^{s_j}.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "softmax expects rank 2, got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| v.to_f64().is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mut m = row[0].to_f64();
        for &v in row.iter().skip(1) {
            let v = v.to_f64();
            if v > m {
                m = v;
            }
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64() - m).exp();
        }
        for &v in row {
            out.push(T::from_f64((v.to_f64() - m).exp() / denom));
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Mean over the batch of −log p(label), with the probability clamped below
/// at 1e−12 before the log.
pub fn scce_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if probs.rank() != 2 {
        return Err(Error::Shape(format!(
            "scce_loss expects rank 2, got {:?}",
            probs.shape()
        )));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let mut acc = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArg(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let p = probs.data()[r * c + label].to_f64().max(1e-12);
        acc += -p.ln();
    }
    Ok(acc / n as f64)
}

/// One momentum-SGD update: v ← μv + g + λθ; θ ← θ − ηv.
pub fn sgd_step(
    param: &mut Tensor<f64>,
    grad: &Tensor<f64>,
    velocity: &mut Tensor<f64>,
    cfg: &TrainConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "sgd_step misaligned: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (mu, lam, eta) = (cfg.momentum, cfg.weight_decay, cfg.learning_rate);
    let p = param.data_mut();
    let v = velocity.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        v[i] = mu * v[i] + g[i] + lam * p[i];
        p[i] -= eta * v[i];
    }
    Ok(())
}

/// An in-memory labeled image set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be rank 4, got {:?}",
                images.shape()
            )));
        }
        if images.extent(0) != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.extent(0),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the given rows into a batch tensor plus its labels.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let per = self.images.len() / self.images.extent(0);
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArg(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,val_macro_f1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_accuracy, e.val_macro_f1
            ));
        }
        out
    }
}

/// Batched inference over a dataset: per-class report plus the raw
/// predictions (argmax of the logits, ties to the lowest class).
pub fn evaluate(net: &Network, set: &Dataset, batch_size: usize) -> Result<(ClassReport, Vec<usize>)> {
    if set.is_empty() {
        return Err(Error::InvalidArg("empty evaluation dataset".into()));
    }
    let classes = net.arch.class_count;
    let mut preds = Vec::with_capacity(set.len());
    let mut at = 0;
    while at < set.len() {
        let hi = (at + batch_size.max(1)).min(set.len());
        let idx: Vec<usize> = (at..hi).collect();
        let (images, _) = set.select(&idx)?;
        let trace = net.forward(&images, false, Mode::Infer)?;
        for r in 0..idx.len() {
            preds.push(argmax_row(&trace.logits.data()[r * classes..(r + 1) * classes]));
        }
        at = hi;
    }
    let m = confusion(&set.labels, &preds, classes)?;
    Ok((report(&m)?, preds))
}

/// Runs the full training loop: seeded shuffling, train-mode forward on a
/// tape, backward, momentum-SGD updates, and a validation pass per epoch.
/// `on_epoch` fires after each epoch with that epoch's stats.
pub fn train<F: FnMut(&EpochStats)>(
    net: &mut Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArg("empty training dataset".into()));
    }
    let classes = net.arch.class_count;
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArg(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if let Some(w) = &cfg.class_weights {
        if w.len() != classes {
            return Err(Error::InvalidArg(format!(
                "{} class weights for {classes} classes",
                w.len()
            )));
        }
    }

    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut velocity: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = train_set.select(chunk)?;
            let mut tape = Tape::new();
            let x = tape.leaf(images);
            let fwd = net.forward_taped(&mut tape, x, Mode::Train, false)?;
            let loss_id =
                tape.softmax_scce_weighted(fwd.logits, &labels, cfg.class_weights.as_deref())?;
            let loss = tape.value(loss_id).data()[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;

            let grads = tape.backward(loss_id, &Tensor::scalar(1.0))?.param_grads()?;
            for (name, grad) in &grads {
                let param = net
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::InvalidArg(format!("no parameter {name:?}")))?;
                let vel = velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(param.shape().to_vec()).expect("zeros"));
                sgd_step(param, grad, vel, cfg)?;
            }
            net.update_bn_state(&fwd.batch_stats)?;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let (val_accuracy, val_macro_f1) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (rep, _) = evaluate(net, val_set, cfg.batch_size)?;
            (rep.accuracy, rep.macro_f1)
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            val_accuracy,
            val_macro_f1,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}
