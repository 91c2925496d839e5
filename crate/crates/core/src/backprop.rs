//! Batched forward/backward passes and softmax cross-entropy.
//!
//! Train mode normalizes with the statistics of the batch itself and
//! differentiates through them; eval mode (and externally fixed statistics)
//! treat the normalization as a constant affine map.

use crate::error::{Error, Result};
use crate::network::{BatchStats, Block, FeatureStats, Mode, Network};
use crate::tensor::{gemm, Matrix, Transpose, Vector};

/// Gradient of one block's learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockGradient {
    Linear { weights: Matrix, bias: Vector },
    BatchNorm { gamma: Vector, beta: Vector },
    Relu,
}

/// Parameter gradients, one entry per network block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub blocks: Vec<BlockGradient>,
}

impl ParamGradients {
    /// All-zero gradients shaped like `net`.
    pub fn zeros_like(net: &Network) -> Self {
        let blocks = net
            .blocks()
            .iter()
            .map(|b| match b {
                Block::Linear(l) => BlockGradient::Linear {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: Vector::zeros(l.out_dim()),
                },
                Block::BatchNorm(bn) => BlockGradient::BatchNorm {
                    gamma: Vector::zeros(bn.len()),
                    beta: Vector::zeros(bn.len()),
                },
                Block::Relu => BlockGradient::Relu,
            })
            .collect();
        Self { blocks }
    }

    /// True when every entry lines up with a parameter of `net`.
    pub fn is_congruent(&self, net: &Network) -> bool {
        self.blocks.len() == net.blocks().len()
            && self.blocks.iter().zip(net.blocks()).all(|(g, b)| match (g, b) {
                (BlockGradient::Linear { weights, bias }, Block::Linear(l)) => {
                    weights.rows() == l.out_dim()
                        && weights.cols() == l.in_dim()
                        && bias.len() == l.out_dim()
                }
                (BlockGradient::BatchNorm { gamma, beta }, Block::BatchNorm(bn)) => {
                    gamma.len() == bn.len() && beta.len() == bn.len()
                }
                (BlockGradient::Relu, Block::Relu) => true,
                _ => false,
            })
    }
}

/// Parameter gradients plus the gradient with respect to the input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: ParamGradients,
    pub input_gradient: Vector,
}

/// `-ln softmax(logits)[label]`, computed with a shifted log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Clone, Copy)]
enum Norm<'a> {
    Running,
    Batch,
    Fixed(&'a BatchStats),
}

struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    coupled: bool,
}

struct Trace {
    /// Input to every block, followed by the network output.
    activations: Vec<Matrix>,
    bn: Vec<Option<BnCache>>,
    stats: Vec<FeatureStats>,
}

fn check_labels(net: &Network, labels: &[usize]) -> Result<()> {
    let classes = net.output_dim();
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

fn forward_trace(net: &Network, inputs: &Matrix, norm: Norm<'_>) -> Result<Trace> {
    if inputs.cols() != net.input_dim() {
        return Err(Error::Dimension {
            context: "batch input",
            expected: net.input_dim(),
            found: inputs.cols(),
        });
    }
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut activations = vec![inputs.clone()];
    let mut bn_caches = Vec::with_capacity(net.blocks().len());
    let mut stats = Vec::new();
    let mut bn_index = 0;
    for block in net.blocks() {
        let h = activations.last().expect("seeded with the input");
        let (out, cache) = match block {
            Block::Linear(l) => {
                let mut out = Matrix::zeros(n, l.out_dim());
                gemm(1.0, h, Transpose::No, &l.weights, Transpose::Yes, 0.0, &mut out)?;
                for i in 0..n {
                    for (o, b) in out.row_mut(i).iter_mut().zip(l.bias.iter()) {
                        *o += b;
                    }
                }
                (out, None)
            }
            Block::BatchNorm(bn) => {
                let width = bn.len();
                let (mean, var, coupled) = match norm {
                    Norm::Running => (bn.running_mean.to_vec(), bn.running_var.to_vec(), false),
                    Norm::Fixed(s) => {
                        let f = s.layers.get(bn_index).ok_or(Error::Dimension {
                            context: "batch statistics",
                            expected: bn_index + 1,
                            found: s.layers.len(),
                        })?;
                        if f.mean.len() != width || f.var.len() != width {
                            return Err(Error::Dimension {
                                context: "batch statistics width",
                                expected: width,
                                found: f.mean.len(),
                            });
                        }
                        (f.mean.clone(), f.var.clone(), false)
                    }
                    Norm::Batch => {
                        let mut mean = vec![0.0; width];
                        for row in h.iter_rows() {
                            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; width];
                        for row in h.iter_rows() {
                            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                                *s += (v - m) * (v - m);
                            }
                        }
                        var.iter_mut().for_each(|s| *s /= n as f64);
                        (mean, var, true)
                    }
                };
                let inv_std: Vec<f64> =
                    var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
                let mut xhat = Matrix::zeros(n, width);
                let mut out = Matrix::zeros(n, width);
                for i in 0..n {
                    let src = h.row(i);
                    for j in 0..width {
                        let xh = (src[j] - mean[j]) * inv_std[j];
                        xhat[(i, j)] = xh;
                        out[(i, j)] = bn.gamma[j] * xh + bn.beta[j];
                    }
                }
                if coupled {
                    stats.push(FeatureStats {
                        mean,
                        var,
                        count: n,
                    });
                }
                bn_index += 1;
                (
                    out,
                    Some(BnCache {
                        xhat,
                        inv_std,
                        coupled,
                    }),
                )
            }
            Block::Relu => {
                let mut out = h.clone();
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                (out, None)
            }
        };
        activations.push(out);
        bn_caches.push(cache);
    }
    Ok(Trace {
        activations,
        bn: bn_caches,
        stats,
    })
}

/// Mean softmax cross-entropy of `logits` and `d loss / d logits`.
fn loss_and_seed(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut seed = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.iter_rows().zip(labels).enumerate() {
        loss += softmax_cross_entropy(row, label);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let grad = seed.row_mut(i);
        for (g, e) in grad.iter_mut().zip(&exps) {
            *g = e / total / n;
        }
        grad[label] -= 1.0 / n;
    }
    (loss / n, seed)
}

fn backward_trace(
    net: &Network,
    trace: &Trace,
    labels: &[usize],
    want_input_grad: bool,
) -> Result<(f64, ParamGradients, Option<Matrix>)> {
    let n = labels.len();
    let (loss, mut delta) = loss_and_seed(trace.activations.last().expect("output"), labels);
    let mut grads = Vec::with_capacity(net.blocks().len());
    for (idx, block) in net.blocks().iter().enumerate().rev() {
        let input = &trace.activations[idx];
        let need_dx = idx > 0 || want_input_grad;
        match block {
            Block::Linear(l) => {
                let mut dw = Matrix::zeros(l.out_dim(), l.in_dim());
                gemm(1.0, &delta, Transpose::Yes, input, Transpose::No, 0.0, &mut dw)?;
                let mut db = Vector::zeros(l.out_dim());
                for row in delta.iter_rows() {
                    db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
                if need_dx {
                    let mut dx = Matrix::zeros(n, l.in_dim());
                    gemm(1.0, &delta, Transpose::No, &l.weights, Transpose::No, 0.0, &mut dx)?;
                    delta = dx;
                }
                grads.push(BlockGradient::Linear {
                    weights: dw,
                    bias: db,
                });
            }
            Block::BatchNorm(bn) => {
                let cache = trace.bn[idx].as_ref().expect("batchnorm cache");
                let width = bn.len();
                let mut dgamma = Vector::zeros(width);
                let mut dbeta = Vector::zeros(width);
                for (drow, xrow) in delta.iter_rows().zip(cache.xhat.iter_rows()) {
                    for j in 0..width {
                        dgamma[j] += drow[j] * xrow[j];
                        dbeta[j] += drow[j];
                    }
                }
                if need_dx {
                    let mut dx = Matrix::zeros(n, width);
                    if cache.coupled {
                        // dx = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂⊙x̂)), dx̂ = δ·γ
                        let nf = n as f64;
                        for j in 0..width {
                            let g = bn.gamma[j];
                            let sum_dxhat = dbeta[j] * g;
                            let sum_dxhat_xhat = dgamma[j] * g;
                            for i in 0..n {
                                let dxhat = delta[(i, j)] * g;
                                dx[(i, j)] = cache.inv_std[j] / nf
                                    * (nf * dxhat - sum_dxhat - cache.xhat[(i, j)] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..width {
                                dx[(i, j)] = delta[(i, j)] * bn.gamma[j] * cache.inv_std[j];
                            }
                        }
                    }
                    delta = dx;
                }
                grads.push(BlockGradient::BatchNorm {
                    gamma: dgamma,
                    beta: dbeta,
                });
            }
            Block::Relu => {
                let out = &trace.activations[idx + 1];
                for (d, o) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                grads.push(BlockGradient::Relu);
            }
        }
    }
    grads.reverse();
    let input_grad = want_input_grad.then_some(delta);
    Ok((loss, ParamGradients { blocks: grads }, input_grad))
}

impl Network {
    /// Single-sample cross-entropy loss and gradients with respect to every
    /// parameter and the input. Batch-norm statistics (running or supplied)
    /// are constants here.
    pub fn backward(&self, x: &[f64], label: usize, mode: Mode<'_>) -> Result<(f64, GradientSet)> {
        check_labels(self, &[label])?;
        let inputs = Matrix::new(1, x.len(), x.to_vec())?;
        let norm = match mode {
            Mode::Eval => Norm::Running,
            Mode::Train(stats) => Norm::Fixed(stats),
        };
        let trace = forward_trace(self, &inputs, norm)?;
        let (loss, params, dx) = backward_trace(self, &trace, &[label], true)?;
        let input_gradient = dx.expect("requested").as_slice().to_vec().into();
        Ok((
            loss,
            GradientSet {
                params,
                input_gradient,
            },
        ))
    }

    /// Mean cross-entropy over a batch in train mode, its parameter gradients
    /// (differentiating through the batch statistics), and the statistics
    /// used.
    pub fn backward_batch(
        &self,
        inputs: &Matrix,
        labels: &[usize],
    ) -> Result<(f64, ParamGradients, BatchStats)> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                context: "batch labels",
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        check_labels(self, labels)?;
        let trace = forward_trace(self, inputs, Norm::Batch)?;
        let (loss, params, _) = backward_trace(self, &trace, labels, false)?;
        Ok((loss, params, BatchStats { layers: trace.stats }))
    }

    /// Mean cross-entropy over a batch in eval mode.
    pub fn batch_loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                context: "batch labels",
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        check_labels(self, labels)?;
        let logits = self.forward_batch(inputs)?;
        let total: f64 = logits
            .iter_rows()
            .zip(labels)
            .map(|(row, &l)| softmax_cross_entropy(row, l))
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Eval-mode outputs for every row of `inputs`.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut trace = forward_trace(self, inputs, Norm::Running)?;
        Ok(trace.activations.pop().expect("output"))
    }

    /// Batch mean and biased variance seen by every batch-norm block.
    pub fn batch_stats(&self, inputs: &Matrix) -> Result<BatchStats> {
        Ok(BatchStats {
            layers: forward_trace(self, inputs, Norm::Batch)?.stats,
        })
    }

    /// Exponential moving average of the batch statistics into the running
    /// statistics (`r ← (1 − m)·r + m·s`, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) -> Result<()> {
        let mut layers = stats.layers.iter();
        for block in self.blocks_mut() {
            if let Block::BatchNorm(bn) = block {
                let s = layers.next().ok_or(Error::Dimension {
                    context: "batch statistics",
                    expected: 1,
                    found: 0,
                })?;
                let correction = if s.count > 1 {
                    s.count as f64 / (s.count - 1) as f64
                } else {
                    1.0
                };
                for j in 0..bn.len() {
                    bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * s.mean[j];
                    bn.running_var[j] =
                        (1.0 - momentum) * bn.running_var[j] + momentum * s.var[j] * correction;
                }
            }
        }
        Ok(())
    }
}
