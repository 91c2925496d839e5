//! Robustness queries over L∞ balls: bound propagation, an incomplete
//! certifier, a complete branch-and-bound verifier with LP leaves, and MILP
//! export.

pub mod bounds;
pub mod complete;
pub mod incomplete;
pub mod milp;
pub mod simplex;

use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Vector;

pub use bounds::{interval_propagate, symbolic_propagate, LayerBounds, Phase};
pub use complete::{verify_complete, CompleteOptions};
pub use incomplete::certify_incomplete;
pub use milp::{export_milp, MilpVariant};
pub use simplex::{simplex_solve, LinearProgram, LpOutcome};

/// Slack allowed when checking that a witness lies in its ball.
pub const WITNESS_SLACK: f64 = 1e-9;

/// Axis-aligned box of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension { context: "box bounds", expected: lower.len(), found: upper.len() });
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box bound"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Config("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[x̂ − ε, x̂ + ε]`, optionally intersected with `[0, 1]`.
    pub fn around(center: &[f64], epsilon: f64, clip: bool) -> Result<Self> {
        let (lower, upper) = center
            .iter()
            .map(|&c| {
                if clip {
                    ((c - epsilon).max(0.0), (c + epsilon).min(1.0))
                } else {
                    (c - epsilon, c + epsilon)
                }
            })
            .unzip();
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "class")]
pub enum QueryMode {
    Targeted(usize),
    Untargeted,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Targeted(_) => "targeted",
            QueryMode::Untargeted => "untargeted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub center: Vector,
    pub epsilon: f64,
    pub true_label: usize,
    pub mode: QueryMode,
    pub input_clip: bool,
}

impl Query {
    pub fn new(center: Vector, epsilon: f64, true_label: usize, mode: QueryMode) -> Result<Self> {
        let q = Self { center, epsilon, true_label, mode, input_clip: true };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.mode == QueryMode::Targeted(self.true_label) {
            return Err(Error::Config("target class equals the true label".into()));
        }
        Ok(())
    }

    fn check(&self, net: &Network) -> Result<()> {
        self.validate()?;
        if self.center.len() != net.input_dim() {
            return Err(Error::Dimension {
                context: "query center",
                expected: net.input_dim(),
                found: self.center.len(),
            });
        }
        let classes = net.output_dim();
        let target_ok = match self.mode {
            QueryMode::Targeted(k) => k < classes,
            QueryMode::Untargeted => true,
        };
        if self.true_label >= classes || !target_ok {
            return Err(Error::Label { label: self.true_label, classes });
        }
        Ok(())
    }

    pub fn input_box(&self) -> Result<InputBox> {
        InputBox::around(&self.center, self.epsilon, self.input_clip)
    }

    /// Classes an adversarial example may land in.
    pub fn targets(&self, classes: usize) -> Vec<usize> {
        match self.mode {
            QueryMode::Targeted(k) => vec![k],
            QueryMode::Untargeted => (0..classes).filter(|&c| c != self.true_label).collect(),
        }
    }

    /// Concrete check of a claimed counterexample.
    pub fn accepts_witness(&self, net: &Network, witness: &[f64], class: usize) -> bool {
        if witness.len() != self.center.len() {
            return false;
        }
        let in_ball = witness.iter().zip(self.center.iter()).all(|(&w, &c)| {
            (w - c).abs() <= self.epsilon + WITNESS_SLACK
                && (!self.input_clip || (-WITNESS_SLACK..=1.0 + WITNESS_SLACK).contains(&w))
        });
        let Ok(predicted) = net.classify(witness) else { return false };
        let class_ok = match self.mode {
            QueryMode::Targeted(k) => predicted == k,
            QueryMode::Untargeted => predicted != self.true_label,
        };
        in_ball && class_ok && predicted == class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Safe,
    Adversarial { witness: Vector, class: usize },
    Unknown,
    Timeout,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Safe => "safe",
            Verdict::Adversarial { .. } => "adversarial",
            Verdict::Unknown => "unknown",
            Verdict::Timeout => "timeout",
        }
    }

    /// Safe or Adversarial.
    pub fn is_decided(&self) -> bool {
        matches!(self, Verdict::Safe | Verdict::Adversarial { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyStats {
    pub nodes: u64,
    pub lp_calls: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    pub verdict: Verdict,
    pub stats: VerifyStats,
}

/// Header of the results file written by [`append_csv`].
pub const CSV_HEADER: &str = "query_id,mode,epsilon,verdict,time_ms,nodes,lp_calls";

pub fn csv_row(query_id: &str, query: &Query, result: &VerifyResult) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        query_id,
        query.mode.name(),
        query.epsilon,
        result.verdict.name(),
        result.stats.elapsed.as_millis(),
        result.stats.nodes,
        result.stats.lp_calls
    )
}

/// Appends rows to `path`, writing the header first if the file is new.
pub fn append_csv(path: impl AsRef<Path>, rows: &[String]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
