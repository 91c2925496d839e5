//! Central-difference helpers shared by the gradient tests.

use pruneverify::backprop::BlockGradient;
use pruneverify::network::Mode;
use pruneverify::{Block, Matrix, Network};
use rand::Rng;

use super::{cross_entropy, eval};

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum Param {
    Weight(usize, usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
}

pub fn nudge(net: &Network, block: usize, p: Param, delta: f64) -> Network {
    let mut blocks = net.clone().into_blocks();
    match (&mut blocks[block], p) {
        (Block::Linear(l), Param::Weight(o, i)) => l.weights[(o, i)] += delta,
        (Block::Linear(l), Param::Bias(o)) => l.bias[o] += delta,
        (Block::BatchNorm(bn), Param::Gamma(i)) => bn.gamma[i] += delta,
        (Block::BatchNorm(bn), Param::Beta(i)) => bn.beta[i] += delta,
        _ => unreachable!(),
    }
    Network::new(net.input_dim(), blocks).unwrap()
}

/// Every learnable scalar with the analytic gradient reported for it.
pub fn analytic_entries(grads: &[BlockGradient]) -> Vec<(usize, Param, f64)> {
    let mut out = Vec::new();
    for (b, g) in grads.iter().enumerate() {
        match g {
            BlockGradient::Linear { weights, bias } => {
                for o in 0..weights.rows() {
                    for i in 0..weights.cols() {
                        out.push((b, Param::Weight(o, i), weights[(o, i)]));
                    }
                    out.push((b, Param::Bias(o), bias[o]));
                }
            }
            BlockGradient::BatchNorm { gamma, beta } => {
                for i in 0..gamma.len() {
                    out.push((b, Param::Gamma(i), gamma[i]));
                    out.push((b, Param::Beta(i), beta[i]));
                }
            }
            BlockGradient::Relu => {}
        }
    }
    out
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < 1e-7 || (analytic - numeric).abs() <= REL_TOL * scale
}

/// Mean cross-entropy with every batch-norm normalizing by the statistics
/// of the batch itself (biased variance).
pub fn train_mode_loss(net: &Network, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut acts: Vec<Vec<f64>> = inputs.to_vec();
    for block in net.blocks() {
        match block {
            Block::Linear(l) => {
                for a in acts.iter_mut() {
                    *a = (0..l.out_dim())
                        .map(|o| l.bias[o] + (0..l.in_dim()).map(|i| l.weights[(o, i)] * a[i]).sum::<f64>())
                        .collect();
                }
            }
            Block::BatchNorm(bn) => {
                let n = acts.len() as f64;
                for f in 0..bn.len() {
                    let mean = acts.iter().map(|a| a[f]).sum::<f64>() / n;
                    let var = acts.iter().map(|a| (a[f] - mean).powi(2)).sum::<f64>() / n;
                    for a in acts.iter_mut() {
                        a[f] = bn.gamma[f] * (a[f] - mean) / (var + bn.epsilon).sqrt() + bn.beta[f];
                    }
                }
            }
            Block::Relu => {
                for a in acts.iter_mut() {
                    a.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
    }
    acts.iter().zip(labels).map(|(a, &l)| cross_entropy(a, l)).sum::<f64>() / inputs.len() as f64
}

/// Checks every parameter of `net` (and the input gradient) in eval mode on
/// one sample and in train mode on a batch of five. Returns the number of
/// scalars compared and a description of each disagreement.
pub fn check_all<R: Rng>(net: &Network, rng: &mut R) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut checked = 0;

    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = rng.gen_range(0..net.output_dim());
    let (_, grads) = net.backward(&x, label, Mode::Eval).unwrap();
    for (b, p, a) in analytic_entries(&grads.params.blocks) {
        let plus = cross_entropy(&eval(&nudge(net, b, p, H), &x), label);
        let minus = cross_entropy(&eval(&nudge(net, b, p, -H), &x), label);
        let numeric = (plus - minus) / (2.0 * H);
        checked += 1;
        if !agrees(a, numeric) {
            failures.push(format!("eval block {b} {p:?}: {a} vs {numeric}"));
        }
    }
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += H;
        xm[i] -= H;
        let numeric = (cross_entropy(&eval(net, &xp), label) - cross_entropy(&eval(net, &xm), label)) / (2.0 * H);
        checked += 1;
        if !agrees(grads.input_gradient[i], numeric) {
            failures.push(format!("input {i}: {} vs {numeric}", grads.input_gradient[i]));
        }
    }

    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..net.output_dim())).collect();
    let (_, grads, _) = net.backward_batch(&Matrix::from_rows(&rows).unwrap(), &labels).unwrap();
    for (b, p, a) in analytic_entries(&grads.blocks) {
        let plus = train_mode_loss(&nudge(net, b, p, H), &rows, &labels);
        let minus = train_mode_loss(&nudge(net, b, p, -H), &rows, &labels);
        let numeric = (plus - minus) / (2.0 * H);
        checked += 1;
        if !agrees(a, numeric) {
            failures.push(format!("batch block {b} {p:?}: {a} vs {numeric}"));
        }
    }
    (checked, failures)
}
