//! Gradient-based backbone training: float pre-training and
//! quantization-aware training with the straight-through estimator.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{ste_backward, tape_backward, tape_forward, GradMap, Tape};

use crate::backbone::BackboneModel;
use crate::error::{QfxError, Result};
use crate::io::ImageDataset;
use crate::rng::Rng;
use crate::tensor::{self, QuantConfig, Tensor};
use std::collections::BTreeMap;

/// Training mode: plain float, or QAT with fake quantization in the loop.
#[derive(Debug, Clone, Copy)]
pub enum TrainMode {
    Float,
    Qat(QuantConfig),
}

impl TrainMode {
    fn quant_config(&self) -> Option<&QuantConfig> {
        match self {
            TrainMode::Float => None,
            TrainMode::Qat(qc) if qc.enabled => Some(qc),
            TrainMode::Qat(_) => None,
        }
    }
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            mode: TrainMode::Float,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(QfxError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(QfxError::Config(
                "learning_rate, momentum, weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Linear classifier over base classes, used only during pre-training and
/// discarded afterwards.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

const HEAD_INIT_STREAM: u64 = 0xCAFE_0001;

impl LinearHead {
    pub fn init(classes: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::substream(seed, HEAD_INIT_STREAM);
        let std = (1.0 / feature_dim as f64).sqrt();
        let data = (0..classes * feature_dim)
            .map(|_| std * rng.next_normal())
            .collect();
        LinearHead {
            weight: Tensor::from_vec(&[classes, feature_dim], data).expect("len consistent"),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        tensor::linear(features, &self.weight, Some(&self.bias))
    }
}

/// One loss-history entry; the history has epochs x batches entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: BackboneModel,
    pub head: LinearHead,
    pub history: Vec<TrainRecord>,
}

/// Softmax cross-entropy: returns (mean loss, dL/dlogits, batch accuracy).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, f64)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "cross_entropy".into(),
                detail: format!("expected [batch, classes], got {other:?}"),
            })
        }
    };
    if labels.len() != n {
        return Err(QfxError::ShapeMismatch {
            op: "cross_entropy".into(),
            detail: format!("{} labels for batch of {n}", labels.len()),
        });
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut d_logits = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = &logits.data()[i * k..][..k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - max).exp();
        }
        let label = labels[i];
        if label >= k {
            return Err(QfxError::Config(format!("label {label} >= classes {k}")));
        }
        loss += -(row[label] - max - z.ln());
        // NaN-tolerant argmax: divergence is reported via the loss value.
        let mut pred = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (idx, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                pred = idx;
            }
        }
        if pred == label {
            correct += 1;
        }
        for j in 0..k {
            let p = (row[j] - max).exp() / z;
            d_logits.data_mut()[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, d_logits, correct as f64 / n as f64))
}

/// SGD with momentum (PyTorch convention): g += wd*theta; v = mu*v + g;
/// theta -= lr*v.
struct Sgd {
    velocity: BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: BTreeMap::new(),
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &GradMap) {
        for (name, grad) in grads {
            let theta = params.get_mut(name).expect("grad for unknown parameter");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (td, vd, gd) = (theta.data_mut(), v.data_mut(), grad.data());
            for i in 0..gd.len() {
                let g = gd[i] + self.weight_decay * td[i];
                vd[i] = self.momentum * vd[i] + g;
                td[i] -= self.lr * vd[i];
            }
        }
    }
}

/// Train the backbone plus a linear head with SGD on softmax cross-entropy.
/// In QAT mode the forward runs fake-quantized and gradients flow through the
/// clipped straight-through estimator. Returns the trained model, the head,
/// and the loss history (one record per batch).
pub fn train(
    model: &BackboneModel,
    head: LinearHead,
    data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(QfxError::Dataset("training dataset is empty".into()));
    }
    if head.weight.shape()[0] != data.meta.classes {
        return Err(QfxError::ShapeMismatch {
            op: "train".into(),
            detail: format!(
                "head classes {} != dataset classes {}",
                head.weight.shape()[0],
                data.meta.classes
            ),
        });
    }
    let qc = cfg.mode.quant_config();
    let mut model = model.clone();
    let mut head = head;
    let mut sgd = Sgd::new(cfg);
    let mut history = Vec::new();

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::substream(cfg.seed, 0x5BAF_F1E0 ^ epoch as u64);
        rng.shuffle(&mut order);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let input = data.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let tape = tape_forward(&model, &input, qc)?;
            let logits = head.logits(&tape.features)?;
            let (loss, d_logits, acc) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(QfxError::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }

            let (d_head_w, d_head_b, d_features) =
                head_backward(&head, &tape.features, &d_logits);

            let mut grads = tape_backward(&tape, &d_features)?;
            grads.insert("head.weight".into(), d_head_w);
            grads.insert("head.bias".into(), d_head_b);

            // The optimizer sees backbone and head as one parameter map.
            let mut params = std::mem::take(&mut model.weights);
            params.insert("head.weight".into(), head.weight.clone());
            params.insert("head.bias".into(), head.bias.clone());
            sgd.step(&mut params, &grads);
            head.weight = params.remove("head.weight").expect("present");
            head.bias = params.remove("head.bias").expect("present");
            model.weights = params;

            update_running_stats(&mut model, &tape, 0.1);

            history.push(TrainRecord {
                epoch,
                batch: batch_idx,
                loss,
                train_acc: acc,
            });
        }
    }
    Ok(TrainOutcome { model, head, history })
}

/// Head backward: dW = dlogits^T . features, db = column sums,
/// dfeatures = dlogits . W.
fn head_backward(
    head: &LinearHead,
    features: &Tensor,
    d_logits: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, k) = (d_logits.shape()[0], d_logits.shape()[1]);
    let d = head.weight.shape()[1];
    let mut d_w = Tensor::zeros(head.weight.shape());
    let mut d_b = Tensor::zeros(&[k]);
    let mut d_features = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let frow = &features.data()[i * d..][..d];
        let dfrow = &mut d_features.data_mut()[i * d..][..d];
        for j in 0..k {
            let g = d_logits.data()[i * k + j];
            if g == 0.0 {
                continue;
            }
            d_b.data_mut()[j] += g;
            let wrow = &head.weight.data()[j * d..][..d];
            let dwrow = &mut d_w.data_mut()[j * d..][..d];
            for idx in 0..d {
                dwrow[idx] += g * frow[idx];
                dfrow[idx] += g * wrow[idx];
            }
        }
    }
    (d_w, d_b, d_features)
}

/// Fold batch statistics into running mean/var with the given momentum.
fn update_running_stats(model: &mut BackboneModel, tape: &Tape, momentum: f64) {
    for (name, batch_mean, batch_var) in &tape.bn_batch_stats {
        for (suffix, batch) in [("mean", batch_mean), ("var", batch_var)] {
            let key = format!("{name}.{suffix}");
            if let Some(running) = model.weights.get_mut(&key) {
                for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}
