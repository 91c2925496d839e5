//! Fully-connected ReLU networks with optional batch normalization.
//!
//! A [`Network`] is an ordered list of [`Block`]s. Hidden layers are
//! `Linear → BatchNorm → ReLU` in trained (canonical) form and
//! `Linear → ReLU` once batch normalization has been fused away; the last
//! block is always a bare `Linear` producing the class scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Matrix, Vector};

/// Default batch-norm epsilon.
pub const BN_EPSILON: f64 = 1e-5;

/// Momentum of the running-statistics update in train mode.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vector,
}

impl LinearLayer {
    pub fn new(weights: Matrix, bias: Vector) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Dimension {
                context: "linear bias",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        let mut y = self.weights.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(self.bias.iter()) {
            *yi += bi;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vector,
    pub beta: Vector,
    pub running_mean: Vector,
    /// Running variance; the normalizer is `sqrt(running_var + epsilon)`.
    pub running_var: Vector,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(
        gamma: Vector,
        beta: Vector,
        running_mean: Vector,
        running_var: Vector,
        epsilon: f64,
    ) -> Result<Self> {
        let n = gamma.len();
        for (name, v) in [("beta", &beta), ("mean", &running_mean), ("var", &running_var)] {
            if v.len() != n {
                return Err(Error::Structure(format!(
                    "batchnorm {name} has length {}, gamma has {n}",
                    v.len()
                )));
            }
        }
        if running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::Structure("batchnorm variance is negative".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Structure(format!("batchnorm epsilon {epsilon} is not positive")));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        })
    }

    /// γ = 1, β = 0, μ = 0, σ = 1.
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: Vector::filled(n, 1.0),
            beta: Vector::zeros(n),
            running_mean: Vector::zeros(n),
            running_var: Vector::filled(n, 1.0),
            epsilon: BN_EPSILON,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Per-feature `γ / sqrt(var + ε)` for the given variance.
    pub(crate) fn scale(&self, var: &[f64]) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(var)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect()
    }

    fn apply(&self, x: &[f64], mean: &[f64], var: &[f64]) -> Vector {
        let scale = self.scale(var);
        x.iter()
            .zip(mean)
            .zip(scale.iter().zip(self.beta.iter()))
            .map(|((xi, mi), (s, b))| s * (xi - mi) + b)
            .collect::<Vec<_>>()
            .into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Relu,
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Linear(_) => "linear",
            Block::BatchNorm(_) => "batchnorm",
            Block::Relu => "relu",
        }
    }
}

/// Batch mean and (biased) variance for every batch-norm block, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub layers: Vec<FeatureStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of samples the statistics were computed from.
    pub count: usize,
}

/// How batch-norm blocks normalize during a single-sample pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Running statistics.
    Eval,
    /// Externally supplied batch statistics, treated as constants.
    Train(&'a BatchStats),
}

/// The two benchmark architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// 784-64-32-16-10
    Net1,
    /// 784-128-64-32-10
    Net2,
}

impl Architecture {
    pub fn widths(self) -> &'static [usize] {
        match self {
            Architecture::Net1 => &[784, 64, 32, 16, 10],
            Architecture::Net2 => &[784, 128, 64, 32, 10],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Net1 => "NET1",
            Architecture::Net2 => "NET2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub hidden_neurons: usize,
    pub nonzero_weights: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    blocks: Vec<Block>,
}

impl Network {
    /// Validates dimension chaining and the layer pattern: every non-final
    /// `Linear` is followed by an optional `BatchNorm` and then a `ReLU`, and
    /// the network ends in a `Linear`.
    pub fn new(input_dim: usize, blocks: Vec<Block>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Structure("input dimension is zero".into()));
        }
        let mut width = input_dim;
        let mut prev: Option<&Block> = None;
        for (i, block) in blocks.iter().enumerate() {
            match block {
                Block::Linear(l) => {
                    if l.in_dim() != width {
                        return Err(Error::Dimension {
                            context: "linear block input",
                            expected: width,
                            found: l.in_dim(),
                        });
                    }
                    if l.out_dim() == 0 {
                        return Err(Error::Structure(format!("block {i} has no outputs")));
                    }
                    if matches!(prev, Some(Block::Linear(_)) | Some(Block::BatchNorm(_))) {
                        return Err(Error::Structure(format!(
                            "block {i}: linear must follow a relu or the input"
                        )));
                    }
                    width = l.out_dim();
                }
                Block::BatchNorm(bn) => {
                    if !matches!(prev, Some(Block::Linear(_))) {
                        return Err(Error::Structure(format!(
                            "block {i}: batchnorm not preceded by linear"
                        )));
                    }
                    if bn.len() != width {
                        return Err(Error::Dimension {
                            context: "batchnorm width",
                            expected: width,
                            found: bn.len(),
                        });
                    }
                }
                Block::Relu => {
                    if !matches!(prev, Some(Block::Linear(_)) | Some(Block::BatchNorm(_))) {
                        return Err(Error::Structure(format!(
                            "block {i}: relu must follow linear or batchnorm"
                        )));
                    }
                }
            }
            prev = Some(block);
        }
        if !matches!(prev, Some(Block::Linear(_))) {
            return Err(Error::Structure("the final block must be linear".into()));
        }
        Ok(Self { input_dim, blocks })
    }

    /// Canonical `Linear → BatchNorm → ReLU` network with Glorot-uniform
    /// weights, zero biases, γ = 1 and β = 0.
    pub fn initialize<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Structure("need at least input and output widths".into()));
        }
        let mut blocks = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            blocks.push(Block::Linear(LinearLayer::new(
                Matrix::new(fan_out, fan_in, data)?,
                Vector::zeros(fan_out),
            )?));
            if i + 2 < widths.len() {
                blocks.push(Block::BatchNorm(BatchNormLayer::identity(fan_out)));
                blocks.push(Block::Relu);
            }
        }
        Self::new(widths[0], blocks)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        match self.blocks.last() {
            Some(Block::Linear(l)) => l.out_dim(),
            _ => unreachable!("validated: last block is linear"),
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Mutable access to parameter values. Shapes must not change; use
    /// [`Network::new`] to build a differently shaped network.
    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Linear(l) => Some(l),
            _ => None,
        })
    }

    pub fn batchnorm_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.blocks.iter().filter_map(|b| match b {
            Block::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn has_batchnorm(&self) -> bool {
        self.batchnorm_layers().next().is_some()
    }

    /// Widths from input to output, e.g. `[784, 64, 32, 16, 10]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.linear_layers().map(LinearLayer::out_dim))
            .collect()
    }

    /// Eval-mode forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.forward_with(x, Mode::Eval)
    }

    pub fn forward_with(&self, x: &[f64], mode: Mode<'_>) -> Result<Vector> {
        self.forward_trace(x, mode, |_, _| {})
    }

    /// Forward pass calling `visit(block_index, output)` after every block.
    pub fn forward_trace(
        &self,
        x: &[f64],
        mode: Mode<'_>,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<Vector> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let stats = match mode {
            Mode::Eval => None,
            Mode::Train(stats) => {
                let n_bn = self.batchnorm_layers().count();
                if stats.layers.len() != n_bn {
                    return Err(Error::Dimension {
                        context: "batch statistics",
                        expected: n_bn,
                        found: stats.layers.len(),
                    });
                }
                Some(stats)
            }
        };
        let mut h = Vector::from(x.to_vec());
        let mut bn_index = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block::Linear(l) => l.apply(&h)?,
                Block::BatchNorm(bn) => {
                    let out = match stats {
                        None => bn.apply(&h, &bn.running_mean, &bn.running_var),
                        Some(s) => {
                            let f = &s.layers[bn_index];
                            if f.mean.len() != bn.len() || f.var.len() != bn.len() {
                                return Err(Error::Dimension {
                                    context: "batch statistics width",
                                    expected: bn.len(),
                                    found: f.mean.len(),
                                });
                            }
                            bn.apply(&h, &f.mean, &f.var)
                        }
                    };
                    bn_index += 1;
                    out
                }
                Block::Relu => h.iter().map(|v| v.max(0.0)).collect::<Vec<_>>().into(),
            };
            visit(i, &h);
        }
        Ok(h)
    }

    /// Predicted class: the lowest index attaining the maximum score.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Hidden neurons are the rows of every linear layer except the output
    /// layer; weights count strictly nonzero entries of all linear weight
    /// matrices (biases excluded).
    pub fn param_counts(&self) -> ParamCounts {
        let linears: Vec<&LinearLayer> = self.linear_layers().collect();
        let hidden_neurons = linears[..linears.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .sum();
        let nonzero_weights = linears.iter().map(|l| l.weights.count_nonzero()).sum();
        ParamCounts {
            hidden_neurons,
            nonzero_weights,
        }
    }

    /// Folds every batch-norm block into the linear block before it:
    /// `W' = diag(s)·W`, `b' = s ⊙ (b − μ) + β` with `s = γ / sqrt(σ + ε)`.
    pub fn fuse_batchnorm(&self) -> Result<Network> {
        let mut fused: Vec<Block> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match block {
                Block::BatchNorm(bn) => {
                    let Some(Block::Linear(linear)) = fused.last_mut() else {
                        return Err(Error::Structure(
                            "batchnorm not preceded by linear".into(),
                        ));
                    };
                    let scale = bn.scale(&bn.running_var);
                    for (i, s) in scale.iter().enumerate() {
                        linear.weights.row_mut(i).iter_mut().for_each(|w| *w *= s);
                        linear.bias[i] =
                            s * (linear.bias[i] - bn.running_mean[i]) + bn.beta[i];
                    }
                }
                other => fused.push(other.clone()),
            }
        }
        Network::new(self.input_dim, fused)
    }

    /// True when the network holds only `Linear` and `ReLU` blocks.
    pub fn is_fused(&self) -> bool {
        !self.has_batchnorm()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn linear(rows: &[&[f64]], bias: &[f64]) -> Block {
        Block::Linear(
            LinearLayer::new(Matrix::from_rows(rows).unwrap(), bias.to_vec().into()).unwrap(),
        )
    }

    #[test]
    fn identity_linear_is_identity() {
        let net = Network::new(2, vec![linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0])]).unwrap();
        assert_eq!(net.forward(&[3.0, -4.0]).unwrap().as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        // Linear([[1]], [-5]) → ReLU, with an identity read-out appended so
        // the network ends in a linear block.
        let net = Network::new(
            1,
            vec![linear(&[&[1.0]], &[-5.0]), Block::Relu, linear(&[&[1.0]], &[0.0])],
        )
        .unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap().as_slice(), &[0.0]);
        assert_eq!(net.forward(&[7.0]).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(matches!(
            Network::new(1, vec![Block::BatchNorm(BatchNormLayer::identity(1)), linear(&[&[1.0]], &[0.0])]),
            Err(Error::Structure(_))
        ));
        assert!(Network::new(1, vec![linear(&[&[1.0]], &[0.0]), Block::Relu]).is_err());
        assert!(Network::new(2, vec![linear(&[&[1.0]], &[0.0])]).is_err());
        assert!(Network::new(1, vec![linear(&[&[1.0]], &[0.0]), linear(&[&[1.0]], &[0.0])]).is_err());
        assert!(BatchNormLayer::new(
            vec![1.0].into(),
            vec![0.0].into(),
            vec![0.0].into(),
            vec![-1.0].into(),
            1e-5
        )
        .is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = Network::initialize(&[3, 2, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        assert!(net.classify(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn identity_batchnorm_fuses_to_the_same_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::initialize(&[2, 3, 2], &mut rng).unwrap();
        for block in net.blocks_mut() {
            if let Block::BatchNorm(bn) = block {
                bn.running_var = Vector::filled(bn.len(), 1.0 - bn.epsilon);
            }
        }
        let fused = net.fuse_batchnorm().unwrap();
        let before: Vec<_> = net.linear_layers().collect();
        let after: Vec<_> = fused.linear_layers().collect();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                assert!((x - y).abs() <= 1e-15);
            }
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(fused.blocks().len(), net.blocks().len() - 1);
    }

    #[test]
    fn fusion_scalar_example() {
        // γ=2, σ=3, ε=1, μ=1, β=0, W=[[5]], b=0 → scale 1, W'=[[5]], b'=-1
        let bn = BatchNormLayer::new(
            vec![2.0].into(),
            vec![0.0].into(),
            vec![1.0].into(),
            vec![3.0].into(),
            1.0,
        )
        .unwrap();
        let net = Network::new(
            1,
            vec![
                linear(&[&[5.0]], &[0.0]),
                Block::BatchNorm(bn),
                Block::Relu,
                linear(&[&[1.0]], &[0.0]),
            ],
        )
        .unwrap();
        let fused = net.fuse_batchnorm().unwrap();
        let first = fused.linear_layers().next().unwrap();
        assert_eq!(first.weights.as_slice(), &[5.0]);
        assert_eq!(first.bias.as_slice(), &[-1.0]);
        assert!(fused.is_fused());
    }

    #[test]
    fn param_counts_of_benchmark_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net1 = Network::initialize(Architecture::Net1.widths(), &mut rng).unwrap();
        assert_eq!(
            net1.param_counts(),
            ParamCounts {
                hidden_neurons: 112,
                nonzero_weights: 784 * 64 + 64 * 32 + 32 * 16 + 16 * 10
            }
        );
        assert_eq!(net1.param_counts().nonzero_weights, 52896);
        let net2 = Network::initialize(Architecture::Net2.widths(), &mut rng).unwrap();
        assert_eq!(net2.param_counts().hidden_neurons, 224);
        assert_eq!(net2.param_counts().nonzero_weights, 110912);
        let fused = net1.fuse_batchnorm().unwrap();
        assert_eq!(fused.param_counts().hidden_neurons, 112);
    }

    #[test]
    fn zero_matrix_contributes_no_weights() {
        let net = Network::new(
            2,
            vec![
                linear(&[&[0.0, 0.0], &[0.0, 0.0]], &[1.0, 1.0]),
                Block::Relu,
                linear(&[&[1.0, 2.0]], &[0.0]),
            ],
        )
        .unwrap();
        assert_eq!(net.param_counts().nonzero_weights, 2);
        assert_eq!(net.param_counts().hidden_neurons, 2);
    }
}
