//! Losses, SGD with Nesterov momentum, plateau scheduling and the training
//! loops (standard, sparse-γ, masked fine-tuning).

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{BlockGradient, ParamGradients};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{Block, Network, BN_MOMENTUM};
use crate::pruning::WeightMask;
use crate::tensor::{argmax, axpy, Matrix};

/// Minimum decrease of the epoch loss that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    /// λ of the L2 penalty on linear weights.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            scheduler_factor: 0.1,
            scheduler_patience: 3,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return fail("scheduler_factor must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// `λ/2 · Σ w²` over linear weights.
    L2(f64),
    /// The L2 term plus `λ_γ · Σ |γ|` over every batch-norm scale.
    L2PlusGammaL1 { l2: f64, gamma: f64 },
}

impl Regularizer {
    fn l2(self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L2(l) | Regularizer::L2PlusGammaL1 { l2: l, .. } => l,
        }
    }

    fn gamma(self) -> f64 {
        match self {
            Regularizer::L2PlusGammaL1 { gamma, .. } => gamma,
            _ => 0.0,
        }
    }

    /// Value of the penalty term for `net`.
    pub fn value(self, net: &Network) -> f64 {
        let (l2, gamma) = (self.l2(), self.gamma());
        let mut total = 0.0;
        for block in net.blocks() {
            match block {
                Block::Linear(l) if l2 != 0.0 => {
                    total += 0.5 * l2 * l.weights.as_slice().iter().map(|w| w * w).sum::<f64>();
                }
                Block::BatchNorm(bn) if gamma != 0.0 => {
                    total += gamma * bn.gamma.iter().map(|g| g.abs()).sum::<f64>();
                }
                _ => {}
            }
        }
        total
    }

    /// Adds the penalty's (sub)gradient to `grads`; the subgradient of |γ|
    /// at 0 is 0.
    pub fn add_gradient(self, net: &Network, grads: &mut ParamGradients) {
        let (l2, gamma) = (self.l2(), self.gamma());
        for (g, block) in grads.blocks.iter_mut().zip(net.blocks()) {
            match (g, block) {
                (BlockGradient::Linear { weights, .. }, Block::Linear(l)) if l2 != 0.0 => {
                    axpy(l2, l.weights.as_slice(), weights.as_mut_slice());
                }
                (BlockGradient::BatchNorm { gamma: dg, .. }, Block::BatchNorm(bn))
                    if gamma != 0.0 =>
                {
                    for (d, v) in dg.iter_mut().zip(bn.gamma.iter()) {
                        if *v != 0.0 {
                            *d += gamma * v.signum();
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

/// Mean softmax cross-entropy (eval mode) plus the regularizer.
pub fn loss(net: &Network, inputs: &Matrix, labels: &[usize], reg: Regularizer) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(net.batch_loss(inputs, labels)? + reg.value(net))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamGradients,
    pub learning_rate: f64,
    pub best_loss: f64,
    pub scheduler_bad_epochs: usize,
    pub stop_bad_epochs: usize,
    pub stop: bool,
}

impl OptimizerState {
    pub fn new(net: &Network, hp: &HyperParams) -> Self {
        Self {
            velocity: ParamGradients::zeros_like(net),
            learning_rate: hp.learning_rate,
            best_loss: f64::INFINITY,
            scheduler_bad_epochs: 0,
            stop_bad_epochs: 0,
            stop: false,
        }
    }
}

fn nesterov(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *t -= lr * (g + momentum * *v);
    }
}

/// One Nesterov update of every parameter: `v ← μv + g; θ ← θ − lr·(g + μv)`.
pub fn sgd_step(
    net: &mut Network,
    grads: &ParamGradients,
    state: &mut OptimizerState,
    momentum: f64,
) -> Result<()> {
    if !grads.is_congruent(net) || !state.velocity.is_congruent(net) {
        return Err(Error::Structure("gradient shapes do not match the network".into()));
    }
    let lr = state.learning_rate;
    for ((block, g), v) in net
        .blocks_mut()
        .iter_mut()
        .zip(&grads.blocks)
        .zip(state.velocity.blocks.iter_mut())
    {
        match (block, g, v) {
            (
                Block::Linear(l),
                BlockGradient::Linear { weights, bias },
                BlockGradient::Linear {
                    weights: vw,
                    bias: vb,
                },
            ) => {
                nesterov(l.weights.as_mut_slice(), weights.as_slice(), vw.as_mut_slice(), lr, momentum);
                nesterov(&mut l.bias, bias, vb, lr, momentum);
            }
            (
                Block::BatchNorm(bn),
                BlockGradient::BatchNorm { gamma, beta },
                BlockGradient::BatchNorm {
                    gamma: vg,
                    beta: vbeta,
                },
            ) => {
                nesterov(&mut bn.gamma, gamma, vg, lr, momentum);
                nesterov(&mut bn.beta, beta, vbeta, lr, momentum);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Plateau scheduling and early stopping on the mean epoch loss.
///
/// The learning rate is multiplied by `scheduler_factor` once the loss has
/// failed to improve for more than `scheduler_patience` consecutive epochs;
/// `stop` is raised after `early_stop_patience` non-improving epochs.
pub fn scheduler_step(state: &mut OptimizerState, epoch_loss: f64, hp: &HyperParams) {
    if epoch_loss < state.best_loss - IMPROVEMENT_THRESHOLD {
        state.best_loss = epoch_loss;
        state.scheduler_bad_epochs = 0;
        state.stop_bad_epochs = 0;
        return;
    }
    state.scheduler_bad_epochs += 1;
    state.stop_bad_epochs += 1;
    if state.scheduler_bad_epochs > hp.scheduler_patience {
        state.learning_rate *= hp.scheduler_factor;
        state.scheduler_bad_epochs = 0;
    }
    if state.stop_bad_epochs >= hp.early_stop_patience {
        state.stop = true;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub learning_rates: Vec<f64>,
    pub epochs_run: usize,
    pub wall_time: Duration,
    pub test_accuracy: Option<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,loss,lr\n");
        for (i, (loss, lr)) in self.epoch_losses.iter().zip(&self.learning_rates).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, loss, lr));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Fraction of `ds` classified correctly (eval mode).
pub fn accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(1000) {
        let (x, y) = ds.gather(chunk);
        let out = net.forward_batch(&x)?;
        correct += out
            .iter_rows()
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn run(
    mut net: Network,
    ds: &Dataset,
    hp: &HyperParams,
    reg: Regularizer,
    mask: Option<&WeightMask>,
) -> Result<(Network, TrainReport)> {
    hp.validate()?;
    if ds.dim() != net.input_dim() {
        return Err(Error::Dimension {
            context: "dataset width",
            expected: net.input_dim(),
            found: ds.dim(),
        });
    }
    if let Some(mask) = mask {
        mask.check(&net)?;
        mask.apply(&mut net);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut state = OptimizerState::new(&net, hp);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        learning_rates: Vec::new(),
        epochs_run: 0,
        wall_time: Duration::ZERO,
        test_accuracy: None,
    };
    for epoch in 0..hp.max_epochs {
        let lr = state.learning_rate;
        let mut total = 0.0;
        for batch in shuffled_batches(ds.len(), hp.batch_size, &mut rng) {
            let (x, y) = ds.gather(&batch);
            let (data_loss, mut grads, stats) = net.backward_batch(&x, &y)?;
            total += (data_loss + reg.value(&net)) * batch.len() as f64;
            reg.add_gradient(&net, &mut grads);
            sgd_step(&mut net, &grads, &mut state, hp.momentum)?;
            net.update_running_stats(&stats, BN_MOMENTUM)?;
            if let Some(mask) = mask {
                mask.apply(&mut net);
            }
        }
        let epoch_loss = total / ds.len().max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tracing::debug!(epoch = epoch + 1, loss = epoch_loss, lr, "epoch finished");
        report.epoch_losses.push(epoch_loss);
        report.learning_rates.push(lr);
        report.epochs_run += 1;
        scheduler_step(&mut state, epoch_loss, hp);
        if state.stop {
            break;
        }
    }
    report.wall_time = start.elapsed();
    Ok((net, report))
}

/// Mini-batch training with batch-norm in train mode; deterministic given
/// `hp.seed`.
pub fn train(
    net: Network,
    ds: &Dataset,
    hp: &HyperParams,
    reg: Regularizer,
) -> Result<(Network, TrainReport)> {
    run(net, ds, hp, reg, None)
}

/// Retraining with the standard L2 loss and a fresh optimizer; weights
/// covered by `mask` are forced back to zero after every step.
pub fn fine_tune(
    net: Network,
    ds: &Dataset,
    hp: &HyperParams,
    mask: Option<&WeightMask>,
) -> Result<(Network, TrainReport)> {
    run(net, ds, hp, Regularizer::L2(hp.weight_decay), mask)
}
