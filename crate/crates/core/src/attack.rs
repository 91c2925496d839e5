//! Single-step gradient-sign attack, empirical robustness and benchmark
//! image selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{permutation, Dataset};
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::tensor::Vector;

/// Number of images the benchmark selector gathers.
pub const BENCHMARK_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub found: bool,
    pub adversarial: Option<Vector>,
    pub adversarial_class: Option<usize>,
}

/// `x' = clip(x + ε·sign(∂J/∂x))`; found iff `x'` is misclassified, which is
/// re-checked on the clipped point.
pub fn fgsm(net: &Network, x: &[f64], label: usize, epsilon: f64) -> Result<AttackResult> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let (_, grads) = net.backward(x, label, Mode::Eval)?;
    let adv: Vec<f64> = x
        .iter()
        .zip(grads.input_gradient.iter())
        .map(|(&xi, &g)| {
            let step = if g > 0.0 {
                epsilon
            } else if g < 0.0 {
                -epsilon
            } else {
                0.0
            };
            (xi + step).clamp(0.0, 1.0)
        })
        .collect();
    let class = net.classify(&adv)?;
    let found = class != label;
    Ok(AttackResult {
        found,
        adversarial: found.then(|| Vector::from(adv)),
        adversarial_class: found.then_some(class),
    })
}

fn sample(ds: &Dataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > ds.len() {
        return Err(Error::Config(format!(
            "sample of {count} requested from {} images",
            ds.len()
        )));
    }
    let mut order = permutation(ds.len(), seed);
    order.truncate(count);
    Ok(order)
}

/// Fraction of `sample_count` seeded test images that are classified
/// correctly and survive the attack.
pub fn robustness(
    net: &Network,
    ds: &Dataset,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    let indices = sample(ds, sample_count, seed)?;
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut robust = 0usize;
    for &i in &indices {
        let x = ds.image(i);
        let label = ds.labels[i];
        if net.classify(x)? == label && !fgsm(net, x, label, epsilon)?.found {
            robust += 1;
        }
    }
    Ok(robust as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoundImage {
    pub index: usize,
    pub label: usize,
    /// Class reached by the attack on the baseline variant.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotFoundImage {
    pub index: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub epsilon: f64,
    pub found: Vec<FoundImage>,
    pub notfound: Vec<NotFoundImage>,
}

impl BenchmarkSet {
    pub fn len(&self) -> usize {
        self.found.len() + self.notfound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Scans seeded test images and keeps those that every variant classifies
/// correctly and on which the attack outcome agrees across variants, half
/// with a successful attack and half without. The first variant is
/// treated as the baseline.
pub fn select_benchmark(
    variants: &[&Network],
    ds: &Dataset,
    epsilon: f64,
    size: usize,
    seed: u64,
) -> Result<BenchmarkSet> {
    let Some(baseline) = variants.first() else {
        return Err(Error::Config("no networks to select a benchmark for".into()));
    };
    for v in variants {
        if v.input_dim() != baseline.input_dim() || v.output_dim() != baseline.output_dim() {
            return Err(Error::Dimension {
                context: "benchmark variants",
                expected: baseline.input_dim(),
                found: v.input_dim(),
            });
        }
    }
    let mut set = BenchmarkSet { epsilon, found: Vec::new(), notfound: Vec::new() };
    let want_found = size / 2;
    let want_notfound = size - want_found;
    'scan: for index in permutation(ds.len(), seed) {
        if set.found.len() == want_found && set.notfound.len() == want_notfound {
            break;
        }
        let x = ds.image(index);
        let label = ds.labels[index];
        let mut outcomes = Vec::with_capacity(variants.len());
        for v in variants {
            if v.classify(x)? != label {
                continue 'scan;
            }
            outcomes.push(fgsm(v, x, label, epsilon)?);
        }
        let found = outcomes[0].found;
        if outcomes.iter().any(|o| o.found != found) {
            continue;
        }
        match outcomes[0].adversarial_class {
            Some(target) if found => {
                if set.found.len() < want_found {
                    set.found.push(FoundImage { index, label, target });
                }
            }
            _ => {
                if set.notfound.len() < want_notfound {
                    set.notfound.push(NotFoundImage { index, label });
                }
            }
        }
    }
    if set.len() < size {
        tracing::warn!(found = set.len(), "fewer consistent benchmark images than requested");
    }
    Ok(set)
}
