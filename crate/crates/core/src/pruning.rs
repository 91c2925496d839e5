//! Neuron pruning driven by batch-norm scales and magnitude weight pruning.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Block, Network};
use crate::tensor::Vector;
use crate::training::{self, HyperParams, Regularizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub rho_np: f64,
    pub rho_wp: f64,
    pub lambda_gamma: f64,
}

/// Named sparsity presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSet {
    Set1,
    Set2,
    Set3,
}

impl ParamSet {
    pub const ALL: [ParamSet; 3] = [ParamSet::Set1, ParamSet::Set2, ParamSet::Set3];

    pub fn name(self) -> &'static str {
        match self {
            ParamSet::Set1 => "SET1",
            ParamSet::Set2 => "SET2",
            ParamSet::Set3 => "SET3",
        }
    }

    /// The preset for a given architecture; SET1's neuron rate depends on
    /// the width of the network.
    pub fn config(self, arch: crate::network::Architecture) -> PruneConfig {
        use crate::network::Architecture;
        match self {
            ParamSet::Set1 => PruneConfig {
                rho_np: match arch {
                    Architecture::Net1 => 0.75,
                    Architecture::Net2 => 0.8,
                },
                rho_wp: 0.9,
                lambda_gamma: 1e-1,
            },
            ParamSet::Set2 => PruneConfig { rho_np: 0.5, rho_wp: 0.7, lambda_gamma: 1e-4 },
            ParamSet::Set3 => PruneConfig { rho_np: 0.25, rho_wp: 0.5, lambda_gamma: 0.5e-4 },
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho_np", self.rho_np), ("rho_wp", self.rho_wp)] {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {rho}")));
            }
        }
        if !(self.lambda_gamma >= 0.0) {
            return Err(Error::Config("lambda_gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Np,
    Wp,
}

/// Number of elements to prune out of `len`.
pub fn prune_count(len: usize, rho: f64, mode: PruneMode) -> Result<usize> {
    if len == 0 {
        return Err(Error::Config("cannot prune an empty list".into()));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("sparsity rate must lie in [0, 1), got {rho}")));
    }
    // Guard against products such as 0.57 * 100 landing just below an integer.
    let base = (rho * len as f64 + 1e-9).floor() as usize;
    let k = match mode {
        PruneMode::Np => base + 1,
        PruneMode::Wp => base,
    };
    Ok(k.min(len - 1))
}

/// Indices of the `k` smallest magnitudes, ties broken by index, where
/// `k = prune_count(values.len(), rho, mode)`.
pub fn select_prune_count(values: &[f64], rho: f64, mode: PruneMode) -> Result<Vec<usize>> {
    let k = prune_count(values.len(), rho, mode)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Per-hidden-layer keep flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    pub keep: Vec<Vec<bool>>,
}

impl NeuronMask {
    pub fn pruned(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }
}

/// Flat indices of zeroed entries, one list per linear layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMask {
    pub zeroed: Vec<Vec<usize>>,
}

impl WeightMask {
    pub fn pruned(&self) -> usize {
        self.zeroed.iter().map(Vec::len).sum()
    }

    pub fn check(&self, net: &Network) -> Result<()> {
        let sizes: Vec<usize> = net.linear_layers().map(|l| l.weights.as_slice().len()).collect();
        let fits = sizes.len() == self.zeroed.len()
            && sizes
                .iter()
                .zip(&self.zeroed)
                .all(|(&n, idx)| idx.iter().all(|&i| i < n));
        if fits {
            Ok(())
        } else {
            Err(Error::Structure("weight mask does not match the network".into()))
        }
    }

    /// Zeroes every masked weight. Call `check` first.
    pub fn apply(&self, net: &mut Network) {
        let linears = net.blocks_mut().iter_mut().filter_map(|b| match b {
            Block::Linear(l) => Some(l),
            _ => None,
        });
        for (layer, idx) in linears.zip(&self.zeroed) {
            let w = layer.weights.as_mut_slice();
            for &i in idx {
                w[i] = 0.0;
            }
        }
    }
}

/// Positions of the (Linear, BatchNorm) pairs that make up hidden layers.
fn hidden_layers(net: &Network) -> Result<Vec<(usize, usize)>> {
    let blocks = net.blocks();
    let mut pairs = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        if matches!(b, Block::BatchNorm(_)) {
            pairs.push((i - 1, i));
        }
    }
    let linear_count = blocks.iter().filter(|b| matches!(b, Block::Linear(_))).count();
    if pairs.is_empty() || pairs.len() + 1 != linear_count {
        return Err(Error::Structure(
            "neuron pruning needs a batch-norm layer after every hidden linear layer".into(),
        ));
    }
    Ok(pairs)
}

/// Removes the neurons whose batch-norm scale is among the globally smallest
/// in magnitude.
pub fn prune_neurons(net: &Network, rho: f64) -> Result<(Network, NeuronMask)> {
    let layers = hidden_layers(net)?;
    let blocks = net.blocks();
    let gammas: Vec<f64> = layers
        .iter()
        .flat_map(|&(_, bn)| match &blocks[bn] {
            Block::BatchNorm(b) => b.gamma.to_vec(),
            _ => unreachable!(),
        })
        .collect();
    let selected = select_prune_count(&gammas, rho, PruneMode::Np)?;
    let mut keep: Vec<Vec<bool>> = layers
        .iter()
        .map(|&(_, bn)| match &blocks[bn] {
            Block::BatchNorm(b) => vec![true; b.len()],
            _ => unreachable!(),
        })
        .collect();
    let mut offsets = Vec::with_capacity(keep.len());
    let mut acc = 0;
    for k in &keep {
        offsets.push(acc);
        acc += k.len();
    }
    for idx in selected {
        let layer = offsets.partition_point(|&o| o <= idx) - 1;
        keep[layer][idx - offsets[layer]] = false;
    }
    let mask = NeuronMask { keep };
    Ok((apply_neuron_mask(net, &mask)?, mask))
}

/// Structural surgery: drops every neuron flagged in `mask` along with its
/// incoming row, bias, batch-norm entries and outgoing column.
pub fn apply_neuron_mask(net: &Network, mask: &NeuronMask) -> Result<Network> {
    let layers = hidden_layers(net)?;
    if layers.len() != mask.keep.len() {
        return Err(Error::Structure("neuron mask does not match the network".into()));
    }
    let mut blocks = net.blocks().to_vec();
    for (h, (&(lin, bn), keep)) in layers.iter().zip(&mask.keep).enumerate() {
        let kept: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
        if kept.is_empty() {
            return Err(Error::DegeneratePruning { layer: h });
        }
        let Block::Linear(l) = &mut blocks[lin] else { unreachable!() };
        if l.out_dim() != keep.len() {
            return Err(Error::Structure("neuron mask does not match the network".into()));
        }
        l.weights = l.weights.select_rows(&kept);
        l.bias = Vector::from(kept.iter().map(|&i| l.bias[i]).collect::<Vec<_>>());
        let Block::BatchNorm(b) = &mut blocks[bn] else { unreachable!() };
        let pick = |v: &Vector| Vector::from(kept.iter().map(|&i| v[i]).collect::<Vec<_>>());
        b.gamma = pick(&b.gamma);
        b.beta = pick(&b.beta);
        b.running_mean = pick(&b.running_mean);
        b.running_var = pick(&b.running_var);
        let next = blocks[bn..]
            .iter()
            .position(|b| matches!(b, Block::Linear(_)))
            .map(|p| p + bn)
            .ok_or_else(|| Error::Structure("hidden layer without a following linear layer".into()))?;
        let Block::Linear(n) = &mut blocks[next] else { unreachable!() };
        n.weights = n.weights.select_cols(&kept);
    }
    Network::new(net.input_dim(), blocks)
}

/// Zeroes the globally smallest linear weights in magnitude.
pub fn prune_weights(net: &Network, rho: f64) -> Result<(Network, WeightMask)> {
    let all: Vec<f64> = net
        .linear_layers()
        .flat_map(|l| l.weights.as_slice().iter().copied())
        .collect();
    let selected = select_prune_count(&all, rho, PruneMode::Wp)?;
    let sizes: Vec<usize> = net.linear_layers().map(|l| l.weights.as_slice().len()).collect();
    let mut zeroed = vec![Vec::new(); sizes.len()];
    let (mut layer, mut start) = (0, 0);
    for idx in selected {
        while idx >= start + sizes[layer] {
            start += sizes[layer];
            layer += 1;
        }
        zeroed[layer].push(idx - start);
    }
    let mask = WeightMask { zeroed };
    let mut pruned = net.clone();
    mask.apply(&mut pruned);
    Ok((pruned, mask))
}

/// Training with the γ-L1 penalty added to the standard loss.
pub fn sparse_train(
    net: Network,
    ds: &Dataset,
    config: &PruneConfig,
    hp: &HyperParams,
) -> Result<Network> {
    config.validate()?;
    let reg = Regularizer::L2PlusGammaL1 { l2: hp.weight_decay, gamma: config.lambda_gamma };
    Ok(training::train(net, ds, hp, reg)?.0)
}

/// Sparse training, neuron removal, then fine-tuning.
pub fn neuron_pruning(
    net: Network,
    ds: &Dataset,
    config: &PruneConfig,
    hp: &HyperParams,
) -> Result<Network> {
    let sparse = sparse_train(net, ds, config, hp)?;
    let (pruned, _) = prune_neurons(&sparse, config.rho_np)?;
    Ok(training::fine_tune(pruned, ds, hp, None)?.0)
}

/// Standard training, magnitude pruning, then fine-tuning under the mask.
pub fn weight_pruning(
    net: Network,
    ds: &Dataset,
    config: &PruneConfig,
    hp: &HyperParams,
) -> Result<Network> {
    config.validate()?;
    let trained = training::train(net, ds, hp, Regularizer::L2(hp.weight_decay))?.0;
    let (pruned, mask) = prune_weights(&trained, config.rho_wp)?;
    Ok(training::fine_tune(pruned, ds, hp, Some(&mask))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub variant: String,
    pub rho: f64,
    pub neurons_before: usize,
    pub neurons_after: usize,
    pub weights_before: usize,
    pub weights_after: usize,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str =
        "variant,rho,neurons_before,neurons_after,weights_before,weights_after";

    pub fn new(variant: impl Into<String>, rho: f64, before: &Network, after: &Network) -> Self {
        let (b, a) = (before.param_counts(), after.param_counts());
        Self {
            variant: variant.into(),
            rho,
            neurons_before: b.hidden_neurons,
            neurons_after: a.hidden_neurons,
            weights_before: b.nonzero_weights,
            weights_after: a.nonzero_weights,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant,
            self.rho,
            self.neurons_before,
            self.neurons_after,
            self.weights_before,
            self.weights_after
        )
    }
}
