//! Branch-and-bound over ReLU phases with exact LP leaves.

use std::time::{Duration, Instant};

use crate::error::Result;
use crate::network::{Block, Mode, Network};
use crate::tensor::Vector;

use super::bounds::{difference_form, difference_upper, propagate_with_phases, symbolic_propagate, LayerBounds, Phase};
use super::simplex::{simplex_solve, LinearProgram, LpOutcome, Relation, Sense};
use super::{InputBox, Query, QueryMode, Verdict, VerifyResult, VerifyStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompleteOptions {
    /// Wall-clock budget shared by every subquery.
    pub timeout: Duration,
    /// Optional cap on explored nodes; exceeding it reports Timeout.
    pub max_nodes: Option<u64>,
    /// Cheap attacks on top of the exact search: signed-gradient steps
    /// before branching and a box-vertex probe at every node.
    pub falsify: bool,
}

impl Default for CompleteOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(600), max_nodes: None, falsify: false }
    }
}

impl CompleteOptions {
    pub fn with_timeout(timeout: Duration) -> Self {
        Self { timeout, ..Self::default() }
    }
}

enum Outcome {
    Unsat,
    Sat(Vec<f64>, usize),
    Unknown,
    Timeout,
}

struct Search<'a> {
    net: &'a Network,
    query: &'a Query,
    bx: InputBox,
    center_pre: Vec<Vec<f64>>,
    deadline: Instant,
    max_nodes: Option<u64>,
    falsify: bool,
    stats: VerifyStats,
}

/// Pre-activations of every hidden layer at `x`.
fn pre_activations(net: &Network, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut cur = x.to_vec();
    let blocks = net.blocks();
    for (i, block) in blocks.iter().enumerate() {
        match block {
            Block::Linear(l) => {
                cur = l.apply(&cur)?.into_inner();
                if i + 1 < blocks.len() {
                    out.push(cur.clone());
                }
            }
            Block::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
            Block::BatchNorm(_) => unreachable!(),
        }
    }
    Ok(out)
}

impl Search<'_> {
    fn out_of_budget(&self) -> bool {
        Instant::now() >= self.deadline || self.max_nodes.is_some_and(|m| self.stats.nodes >= m)
    }

    fn witness(&self, mut x: Vec<f64>) -> Option<(Vec<f64>, usize)> {
        self.bx.clamp(&mut x);
        let class = self.net.classify(&x).ok()?;
        self.query.accepts_witness(self.net, &x, class).then_some((x, class))
    }

    /// Signed-gradient steps from the center: descent on the cross-entropy
    /// of `target`, or ascent on the true label's when `target` is None.
    fn falsify(&self, target: Option<usize>) -> Result<Option<(Vec<f64>, usize)>> {
        let width = self.bx.lower.iter().zip(&self.bx.upper).map(|(l, u)| u - l).fold(0.0, f64::max);
        if width == 0.0 {
            return Ok(self.witness(self.query.center.to_vec()));
        }
        let step = width / 8.0;
        let (label, direction) = match target {
            Some(k) => (k, -1.0),
            None => (self.query.true_label, 1.0),
        };
        let mut x = self.query.center.to_vec();
        for _ in 0..30 {
            let (_, grads) = self.net.backward(&x, label, Mode::Eval)?;
            for (v, g) in x.iter_mut().zip(grads.input_gradient.iter()) {
                if *g != 0.0 {
                    *v += direction * step * g.signum();
                }
            }
            self.bx.clamp(&mut x);
            if let Some(w) = self.witness(x.clone()) {
                return Ok(Some(w));
            }
        }
        Ok(None)
    }

    fn targeted(&mut self, k: usize) -> Result<Outcome> {
        if self.out_of_budget() {
            return Ok(Outcome::Timeout);
        }
        let classes = self.net.output_dim();
        let hidden: Vec<usize> = self.center_pre.iter().map(Vec::len).collect();
        let mut stack = vec![hidden.iter().map(|&n| vec![Phase::Free; n]).collect::<Vec<_>>()];
        let mut unresolved = false;
        while let Some(phases) = stack.pop() {
            if self.out_of_budget() {
                return Ok(Outcome::Timeout);
            }
            self.stats.nodes += 1;
            let Some(bounds) = propagate_with_phases(self.net, &self.bx, Some(&phases))? else {
                continue;
            };
            let mut tightest = (f64::INFINITY, k);
            let mut refuted = false;
            for c in (0..classes).filter(|&c| c != k) {
                let ub = difference_upper(self.net, &bounds, &self.bx, k, c);
                if ub < 0.0 {
                    refuted = true;
                    break;
                }
                if ub < tightest.0 {
                    tightest = (ub, c);
                }
            }
            if refuted {
                continue;
            }
            if self.falsify {
                // the box vertex that is best for the tightest output constraint
                let (coeffs, _) = difference_form(self.net, &bounds, k, tightest.1);
                let vertex: Vec<f64> = coeffs
                    .iter()
                    .zip(self.bx.lower.iter().zip(&self.bx.upper))
                    .map(|(&c, (&l, &u))| if c > 0.0 { u } else { l })
                    .collect();
                if let Some((x, c)) = self.witness(vertex) {
                    return Ok(Outcome::Sat(x, c));
                }
            }

            let mut branch: Option<(usize, usize, f64)> = None;
            for (h, layer) in phases.iter().enumerate() {
                let pre = &bounds[2 * h];
                for (i, phase) in layer.iter().enumerate() {
                    let (l, u) = (pre.lower[i], pre.upper[i]);
                    if *phase == Phase::Free && l < 0.0 && u > 0.0 && branch.is_none_or(|b| u - l > b.2) {
                        branch = Some((h, i, u - l));
                    }
                }
            }
            match branch {
                Some((h, i, _)) => {
                    let first = if self.center_pre[h][i] >= 0.0 { Phase::Active } else { Phase::Inactive };
                    let second = if first == Phase::Active { Phase::Inactive } else { Phase::Active };
                    let mut other = phases.clone();
                    other[h][i] = second;
                    stack.push(other);
                    let mut preferred = phases;
                    preferred[h][i] = first;
                    stack.push(preferred);
                }
                None => {
                    self.stats.lp_calls += 1;
                    match self.solve_leaf(k, &phases, &bounds) {
                        Ok(Some(x)) => match self.witness(x) {
                            Some((x, c)) => return Ok(Outcome::Sat(x, c)),
                            None => unresolved = true,
                        },
                        Ok(None) => {}
                        Err(e) => {
                            tracing::debug!(error = %e, "leaf program failed");
                            unresolved = true;
                        }
                    }
                }
            }
        }
        Ok(if unresolved { Outcome::Unknown } else { Outcome::Unsat })
    }

    /// Maximizes the worst output margin of `k` over the leaf's linear
    /// region; returns the maximizer when that margin is nonnegative.
    fn solve_leaf(&self, k: usize, phases: &[Vec<Phase>], bounds: &[LayerBounds]) -> Result<Option<Vec<f64>>> {
        let d = self.net.input_dim();
        let t = d;
        let mut lp = LinearProgram::new(d + 1, Sense::Maximize);
        for i in 0..d {
            lp.set_bounds(i, self.bx.lower[i], self.bx.upper[i]);
        }
        let mut slack: f64 = 0.0;
        for c in (0..self.net.output_dim()).filter(|&c| c != k) {
            slack = slack.max(difference_upper(self.net, bounds, &self.bx, c, k));
            let (mut coeffs, constant) = difference_form(self.net, bounds, k, c);
            coeffs.push(-1.0);
            lp.add_constraint(coeffs, Relation::Ge, -constant)?;
        }
        lp.set_bounds(t, -(slack.max(0.0) + 1.0), 1.0);
        let mut objective = vec![0.0; d + 1];
        objective[t] = 1.0;
        lp.set_objective(objective)?;
        for (h, layer) in phases.iter().enumerate() {
            let forms = &bounds[2 * h].symbolic.as_ref().expect("symbolic bounds").lower;
            for (i, phase) in layer.iter().enumerate() {
                let relation = match phase {
                    Phase::Active => Relation::Ge,
                    Phase::Inactive => Relation::Le,
                    Phase::Free => continue,
                };
                let mut coeffs = forms.coeffs.row(i).to_vec();
                coeffs.push(0.0);
                lp.add_constraint(coeffs, relation, -forms.constants[i])?;
            }
        }
        match simplex_solve(&lp)? {
            LpOutcome::Optimal { mut x, value } if value >= 0.0 => {
                x.truncate(d);
                Ok(Some(x))
            }
            _ => Ok(None),
        }
    }
}

/// Decides the query exactly, up to the time budget.
pub fn verify_complete(net: &Network, query: &Query, options: &CompleteOptions) -> Result<VerifyResult> {
    let start = Instant::now();
    query.check(net)?;
    let bx = query.input_box()?;
    let center_pre = pre_activations(net, &bx.center())?;
    let mut search = Search {
        net,
        query,
        bx,
        center_pre,
        deadline: start + options.timeout,
        max_nodes: options.max_nodes,
        falsify: options.falsify,
        stats: VerifyStats::default(),
    };
    let root = symbolic_propagate(net, &search.bx)?;
    let j = query.true_label;
    let mut targets: Vec<(usize, f64)> = query
        .targets(net.output_dim())
        .into_iter()
        .map(|k| (k, difference_upper(net, &root, &search.bx, k, j)))
        .collect();
    targets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    targets.retain(|t| t.1 >= 0.0);

    if options.falsify && !targets.is_empty() {
        let mut attempts: Vec<Option<usize>> = targets.iter().map(|t| Some(t.0)).collect();
        if query.mode == QueryMode::Untargeted {
            attempts.insert(0, None);
        }
        for target in attempts {
            if let Some((x, class)) = search.falsify(target)? {
                search.stats.elapsed = start.elapsed();
                let verdict = Verdict::Adversarial { witness: Vector::from(x), class };
                return Ok(VerifyResult { verdict, stats: search.stats });
            }
        }
    }

    let mut unknown = false;
    let mut verdict = Verdict::Safe;
    for (k, _) in targets {
        match search.targeted(k)? {
            Outcome::Unsat => {}
            Outcome::Unknown => unknown = true,
            Outcome::Sat(x, class) => {
                verdict = Verdict::Adversarial { witness: Vector::from(x), class };
                break;
            }
            Outcome::Timeout => {
                verdict = Verdict::Timeout;
                break;
            }
        }
    }
    if verdict == Verdict::Safe && unknown {
        verdict = Verdict::Unknown;
    }
    search.stats.elapsed = start.elapsed();
    Ok(VerifyResult { verdict, stats: search.stats })
}
