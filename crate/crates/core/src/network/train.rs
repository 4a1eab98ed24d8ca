use std::fmt;
use std::str::FromStr;

use super::{argmax_rows, Model, NetError, Param};
use crate::capsule_ops::{margin_loss, reconstruction_loss, RECONSTRUCTION_SCALE};
use crate::data_io::{batches, one_hot, sequential_batches, Batch, Dataset};
use crate::tensor::{Tape, Tensor, Var};

/// Sub-seed derivation: every random stream is the root seed plus a fixed
/// role offset, so runs are reproducible from one number.
pub mod seeds {
    const ROLE_STRIDE: u64 = 1 << 32;

    /// Parameter initialization.
    pub fn init(root: u64) -> u64 {
        root.wrapping_add(ROLE_STRIDE)
    }

    /// Shuffle order and augmentation shifts for one epoch.
    pub fn epoch(root: u64, epoch: usize) -> u64 {
        root.wrapping_add(2 * ROLE_STRIDE).wrapping_add(epoch as u64)
    }

    /// Synthetic data and random routing instances.
    pub fn data(root: u64) -> u64 {
        root.wrapping_add(3 * ROLE_STRIDE)
    }
}

/// Which capsule the decoder sees when reconstructing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MaskSource {
    /// The true label; always used for the training loss.
    #[default]
    TrueLabel,
    /// The predicted class, for reconstruction without labels.
    Predicted,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::TrueLabel => "true_label",
            MaskSource::Predicted => "predicted",
        })
    }
}

impl FromStr for MaskSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "true_label" => Ok(MaskSource::TrueLabel),
            "predicted" => Ok(MaskSource::Predicted),
            other => Err(format!("unknown mask source `{other}` (expected true_label or predicted)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Largest random translation applied to training images, in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            learning_rate: 0.001,
            lr_decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_shift: 2,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Learning rate during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let values = param.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

struct BatchOutcome<'t> {
    loss: Var<'t>,
    lengths: Tensor,
}

fn batch_loss<'t>(model: &Model, params: &[Var<'t>], tape: &'t Tape, batch: &Batch, step: u64) -> Result<BatchOutcome<'t>, NetError> {
    let size = batch.labels.len();
    let images = tape.constant(batch.images.clone());
    let out = model.forward(params, images, false)?;
    let lengths = (*out.lengths.value()).clone();
    ensure_finite("digit capsule lengths", &lengths, step)?;
    let labels = one_hot(&batch.labels, model.arch.num_classes);
    let decoded = model.decode(params, out.digit_caps, &labels)?;
    let target = tape.constant(batch.images.clone().reshaped(&[size, model.arch.pixels()])?);
    let margin = margin_loss(out.lengths, &labels)?;
    let recon = reconstruction_loss(decoded, target)?;
    let loss = margin.add(recon.scale(RECONSTRUCTION_SCALE))?;
    ensure_finite("loss", &loss.value(), step)?;
    Ok(BatchOutcome { loss, lengths })
}

fn ensure_finite(name: &str, t: &Tensor, step: u64) -> Result<(), NetError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NetError::NonFinite {
            tensor: name.to_string(),
            step,
        })
    }
}

fn correct(lengths: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(lengths).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let adam = Adam::new(model.params(), config.beta1, config.beta2, config.epsilon);
        Trainer { model, config, adam }
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps() as u64
    }

    /// Total loss `margin + 0.0005 * reconstruction` on one batch, then one
    /// Adam update. Returns pre-update loss and accuracy.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats, NetError> {
        let step = self.steps();
        let tape = Tape::new();
        let params = self.model.bind(&tape, true);
        let outcome = batch_loss(&self.model, &params, &tape, batch, step)?;
        outcome.loss.backward()?;
        let mut grads = Vec::with_capacity(params.len());
        for (var, param) in params.iter().zip(self.model.params()) {
            let grad = var.grad().unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            ensure_finite(&format!("gradient of {}", param.name), &grad, step)?;
            grads.push(grad);
        }
        let loss = outcome.loss.value().item();
        let accuracy = correct(&outcome.lengths, &batch.labels) as f64 / batch.labels.len() as f64;
        drop(params);
        drop(tape);
        self.adam.update(self.model.params_mut(), &grads, lr);
        Ok(StepStats {
            loss,
            accuracy,
            samples: batch.labels.len(),
        })
    }

    /// One pass over `dataset` with the epoch's learning rate, shuffle and
    /// augmentation. Returns sample-weighted mean loss and accuracy.
    pub fn train_epoch(&mut self, dataset: &Dataset, epoch: usize) -> Result<StepStats, NetError> {
        if dataset.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        let lr = self.config.lr_at(epoch);
        let seed = seeds::epoch(self.config.seed, epoch);
        let (mut loss, mut hits, mut seen) = (0.0, 0.0, 0);
        for batch in batches(dataset, self.config.batch_size, seed, self.config.max_shift) {
            let stats = self.train_step(&batch, lr)?;
            loss += stats.loss * stats.samples as f64;
            hits += stats.accuracy * stats.samples as f64;
            seen += stats.samples;
        }
        Ok(StepStats {
            loss: loss / seen as f64,
            accuracy: hits / seen as f64,
            samples: seen,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

/// Accuracy, mean total loss and confusion matrix, in dataset order with no
/// augmentation and no parameter updates.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Evaluation, NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let classes = model.arch.num_classes;
    let mut confusion = vec![vec![0; classes]; classes];
    let mut loss = 0.0;
    for batch in sequential_batches(dataset, batch_size) {
        let tape = Tape::new();
        let params = model.bind(&tape, false);
        let outcome = batch_loss(model, &params, &tape, &batch, 0)?;
        loss += outcome.loss.value().item() * batch.labels.len() as f64;
        for (&label, predicted) in batch.labels.iter().zip(argmax_rows(&outcome.lengths)) {
            confusion[label][predicted] += 1;
        }
    }
    let hits: usize = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(Evaluation {
        accuracy: hits as f64 / dataset.len() as f64,
        mean_loss: loss / dataset.len() as f64,
        confusion,
        samples: dataset.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synthetic_dataset;
    use crate::network::ArchConfig;
    use crate::routing::RoutingConfig;

    #[test]
    fn learning_rate_schedule() {
        let config = TrainConfig::default();
        assert_eq!(config.lr_at(0), 0.001);
        assert!((config.lr_at(2) - 0.0009025).abs() < 1e-12);
        for e in 0..20 {
            assert!((config.lr_at(e) - 0.001 * 0.95f64.powi(e as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first step is lr * g / (|g| + eps)
        let mut params = vec![Param {
            name: "p".into(),
            value: Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
        }];
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        adam.update(&mut params, &[Tensor::new(&[2], vec![0.5, -2.0]).unwrap()], 0.01);
        let v = params[0].value.data();
        assert!((v[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((v[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn seeds_are_distinct_per_role() {
        assert_ne!(seeds::init(1), seeds::epoch(1, 0));
        assert_ne!(seeds::epoch(1, 0), seeds::epoch(1, 1));
        assert_ne!(seeds::data(1), seeds::init(1));
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            stem_channels: 8,
            primary_types: 4,
            decoder_hidden: (16, 32),
            ..ArchConfig::default()
        }
    }

    #[test]
    fn evaluate_is_pure_and_counts_add_up() {
        let data = synthetic_dataset(3, 40, 10).unwrap();
        let model = Model::new(small_arch(), RoutingConfig::alg1(), 2).unwrap();
        let a = evaluate(&model, &data, 16).unwrap();
        let b = evaluate(&model, &data, 16).unwrap();
        assert_eq!(a, b);
        let counts = data.class_counts();
        for (k, row) in a.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), counts[k]);
        }
        assert_eq!(model, Model::new(small_arch(), RoutingConfig::alg1(), 2).unwrap());
    }

    #[test]
    fn training_reduces_loss() {
        let data = synthetic_dataset(5, 16, 4).unwrap();
        let arch = ArchConfig {
            num_classes: 4,
            ..small_arch()
        };
        let config = TrainConfig {
            max_shift: 0,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(Model::new(arch, RoutingConfig::alg3(), 1).unwrap(), config);
        let first = trainer.train_epoch(&data, 0).unwrap().loss;
        let mut last = first;
        for _ in 0..10 {
            last = trainer.train_epoch(&data, 0).unwrap().loss;
        }
        assert!(last < first, "loss {first} -> {last}");
        assert_eq!(trainer.steps(), 11);
    }
}
