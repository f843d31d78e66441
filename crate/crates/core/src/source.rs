//! Supervised pretraining of the source model and plain evaluation helpers.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::losses::replay_loss;
use crate::math::Matrix;
use crate::nn::{Activation, NetworkArch, ParamSet, Upstream};
use crate::optim::{AdamConfig, OptimizerState};
use crate::relation::{build_intrinsic_graph, ClassRelationGraph, IntrinsicGraphSource};
use crate::rng::{purpose, SeedKey};
use crate::stream::LabeledData;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Epochs always run.
    pub epochs: usize,
    /// Further epochs allowed while the held-out accuracy is below the floor.
    pub max_epochs: usize,
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: alloc::vec![32, 32],
            activation: Activation::Tanh,
            adam: AdamConfig::with_lr(1e-3),
            batch_size: 64,
            epochs: 30,
            max_epochs: 200,
            accuracy_floor: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub arch: NetworkArch,
    pub params: ParamSet,
    pub epochs: usize,
    pub heldout_accuracy: f64,
}

impl SourceModel {
    /// Source-side intrinsic graph. Prototype mode reads the model's features
    /// of the labeled source data.
    pub fn intrinsic_graph(&self, source: IntrinsicGraphSource, data: &LabeledData) -> Result<ClassRelationGraph> {
        let trace = self.arch.forward(&self.params, &data.features)?;
        build_intrinsic_graph(source, &self.arch, &self.params, Some((trace.features(), &data.labels)))
    }
}

/// Minibatch Adam on cross-entropy until the held-out accuracy floor is met.
pub fn pretrain(
    train: &LabeledData,
    heldout: &LabeledData,
    classes: usize,
    config: &PretrainConfig,
    key: SeedKey,
) -> Result<SourceModel> {
    if train.is_empty() {
        return Err(Error::Config("empty source training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("pretraining batch size must be positive".into()));
    }
    let arch = NetworkArch::new(train.features.cols(), config.hidden.clone(), classes, config.activation)?;
    let mut params = arch.init_params(key);
    let mut opt = OptimizerState::new(config.adam, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut acc = 0.0;
    let mut epoch = 0;
    while epoch < config.max_epochs.max(config.epochs) {
        order.sort_unstable();
        order.shuffle(&mut key.derive(purpose::PRETRAIN_SHUFFLE, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let x = Matrix::from_rows(train.features.cols(), chunk.iter().map(|&i| train.features.row(i)))?;
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let trace = arch.forward(&params, &x)?;
            let loss = replay_loss(&y, trace.probs())?;
            let grads = arch.backward(&params, &trace, &Upstream::logits_only(loss.logits))?;
            opt.adam_step(&mut params, &grads)?;
        }
        epoch += 1;
        if epoch >= config.epochs {
            acc = accuracy(&arch, &params, heldout)?;
            if acc >= config.accuracy_floor {
                return Ok(SourceModel {
                    arch,
                    params,
                    epochs: epoch,
                    heldout_accuracy: acc,
                });
            }
        }
    }
    Err(Error::PretrainFailed {
        accuracy: acc,
        floor: config.accuracy_floor,
    })
}

/// Argmax predictions for every row.
pub fn predict(arch: &NetworkArch, params: &ParamSet, features: &Matrix) -> Result<Vec<usize>> {
    Ok(arch.forward(params, features)?.predictions())
}

/// Fraction of rows classified correctly; zero for empty data.
pub fn accuracy(arch: &NetworkArch, params: &ParamSet, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(arch, params, &data.features)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}
