//! Independent reference implementations used as test oracles. Nothing
//! here calls into the library's numeric code beyond reading parameters.

#![allow(dead_code)]

pub mod gradcheck;

use pruneverify::network::{BatchNormLayer, LinearLayer};
use pruneverify::verify::simplex::{Relation, Sense};
use pruneverify::verify::LinearProgram;
use pruneverify::{Block, Matrix, Network, Vector};
use rand::Rng;

pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn uniform_vector<R: Rng>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vector {
    Vector::from((0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
}

/// Linear→ReLU stack with a trailing Linear; weights uniform in ±scale.
pub fn random_fused<R: Rng>(rng: &mut R, widths: &[usize], scale: f64) -> Network {
    let mut blocks = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let w = uniform_matrix(rng, pair[1], pair[0], scale);
        let b = uniform_vector(rng, pair[1], -scale / 2.0, scale / 2.0);
        blocks.push(Block::Linear(LinearLayer::new(w, b).unwrap()));
        if i + 2 < widths.len() {
            blocks.push(Block::Relu);
        }
    }
    Network::new(widths[0], blocks).unwrap()
}

/// Linear→BatchNorm→ReLU stack with nontrivial batch-norm parameters.
pub fn random_with_batchnorm<R: Rng>(rng: &mut R, widths: &[usize]) -> Network {
    let mut blocks = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let w = uniform_matrix(rng, pair[1], pair[0], 1.0);
        let b = uniform_vector(rng, pair[1], -0.5, 0.5);
        blocks.push(Block::Linear(LinearLayer::new(w, b).unwrap()));
        if i + 2 < widths.len() {
            let n = pair[1];
            let bn = BatchNormLayer::new(
                uniform_vector(rng, n, 0.3, 2.0),
                uniform_vector(rng, n, -0.5, 0.5),
                uniform_vector(rng, n, -0.5, 0.5),
                uniform_vector(rng, n, 0.2, 3.0),
                1e-5,
            )
            .unwrap();
            blocks.push(Block::BatchNorm(bn));
            blocks.push(Block::Relu);
        }
    }
    Network::new(widths[0], blocks).unwrap()
}

/// Scalar-by-scalar evaluation; returns the output of every block.
pub fn trace(net: &Network, x: &[f64]) -> Vec<Vec<f64>> {
    let mut cur = x.to_vec();
    let mut out = Vec::new();
    for block in net.blocks() {
        cur = match block {
            Block::Linear(l) => (0..l.out_dim())
                .map(|o| {
                    let mut acc = l.bias[o];
                    for (i, v) in cur.iter().enumerate() {
                        acc += l.weights[(o, i)] * v;
                    }
                    acc
                })
                .collect(),
            Block::BatchNorm(bn) => cur
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    bn.gamma[i] * (v - bn.running_mean[i]) / (bn.running_var[i] + bn.epsilon).sqrt()
                        + bn.beta[i]
                })
                .collect(),
            Block::Relu => cur.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
        };
        out.push(cur.clone());
    }
    out
}

pub fn eval(net: &Network, x: &[f64]) -> Vec<f64> {
    trace(net, x).pop().unwrap()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    m + s.ln() - logits[label]
}

/// Interval image of a box through every block.
pub fn interval_trace(net: &Network, lo: &[f64], hi: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (mut l, mut u) = (lo.to_vec(), hi.to_vec());
    let mut out = Vec::new();
    for block in net.blocks() {
        match block {
            Block::Linear(layer) => {
                let mut nl = Vec::with_capacity(layer.out_dim());
                let mut nu = Vec::with_capacity(layer.out_dim());
                for o in 0..layer.out_dim() {
                    let (mut a, mut b) = (layer.bias[o], layer.bias[o]);
                    for i in 0..l.len() {
                        let w = layer.weights[(o, i)];
                        a += (w * l[i]).min(w * u[i]);
                        b += (w * l[i]).max(w * u[i]);
                    }
                    nl.push(a);
                    nu.push(b);
                }
                l = nl;
                u = nu;
            }
            Block::Relu => {
                l.iter_mut().for_each(|v| *v = v.max(0.0));
                u.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Block::BatchNorm(_) => panic!("oracle expects fused networks"),
        }
        out.push((l.clone(), u.clone()));
    }
    out
}

/// Points of the box: every vertex when the dimension is small, then
/// uniform samples.
pub fn box_samples<R: Rng>(rng: &mut R, lo: &[f64], hi: &[f64], count: usize) -> Vec<Vec<f64>> {
    let d = lo.len();
    let mut out = Vec::with_capacity(count);
    if d <= 10 {
        for mask in 0..(1usize << d) {
            if out.len() == count {
                break;
            }
            out.push((0..d).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect());
        }
    }
    while out.len() < count {
        out.push((0..d).map(|i| if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] }).collect());
    }
    out
}

/// A sample in the box whose predicted class is not `label` (or is
/// `target` when given).
pub fn falsify_by_sampling<R: Rng>(
    net: &Network,
    rng: &mut R,
    lo: &[f64],
    hi: &[f64],
    label: usize,
    target: Option<usize>,
    samples: usize,
) -> Option<Vec<f64>> {
    for x in box_samples(rng, lo, hi, samples) {
        let c = argmax(&eval(net, &x));
        let hit = match target {
            Some(t) => c == t,
            None => c != label,
        };
        if hit {
            return Some(x);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitVerdict {
    Safe,
    Adversarial,
    Undecided,
}

/// Recursively halves a 2-D box along its longer side. A cell is certified
/// when the interval bound of every rival logit stays below the true one;
/// a cell whose center or corners misclassify ends the search.
pub fn split_oracle_2d(net: &Network, lo: [f64; 2], hi: [f64; 2], label: usize, min_width: f64) -> SplitVerdict {
    let mut stack = vec![(lo, hi)];
    let mut undecided = false;
    while let Some((l, u)) = stack.pop() {
        let points = [
            [(l[0] + u[0]) / 2.0, (l[1] + u[1]) / 2.0],
            l,
            u,
            [l[0], u[1]],
            [u[0], l[1]],
        ];
        for p in points {
            if argmax(&eval(net, &p)) != label {
                return SplitVerdict::Adversarial;
            }
        }
        let (ol, ou) = interval_trace(net, &l, &u).pop().unwrap();
        if (0..ol.len()).filter(|&c| c != label).all(|c| ou[c] < ol[label]) {
            continue;
        }
        let axis = if u[0] - l[0] >= u[1] - l[1] { 0 } else { 1 };
        if u[axis] - l[axis] <= min_width {
            undecided = true;
            continue;
        }
        let mid = (l[axis] + u[axis]) / 2.0;
        let mut left_hi = u;
        left_hi[axis] = mid;
        let mut right_lo = l;
        right_lo[axis] = mid;
        stack.push((l, left_hi));
        stack.push((right_lo, u));
    }
    if undecided {
        SplitVerdict::Undecided
    } else {
        SplitVerdict::Safe
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// A bounded LP in inequality form: rows `coeffs · x (<=|=|>=) rhs` plus
/// finite variable bounds.
#[derive(Debug, Clone)]
pub struct SmallLp {
    pub objective: Vec<f64>,
    pub maximize: bool,
    /// (coefficients, relation: -1 for ≤, 0 for =, 1 for ≥, rhs)
    pub rows: Vec<(Vec<f64>, i8, f64)>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Best objective over all basic feasible points, or None when the
/// polytope is empty. Valid because every variable is bounded.
pub fn vertex_enumeration(lp: &SmallLp) -> Option<f64> {
    let n = lp.objective.len();
    let mut planes: Vec<(Vec<f64>, f64)> = lp.rows.iter().map(|(c, _, r)| (c.clone(), *r)).collect();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        planes.push((e.clone(), lp.lower[i]));
        planes.push((e, lp.upper[i]));
    }
    let feasible = |x: &[f64]| {
        let tol = 1e-7;
        lp.rows.iter().all(|(c, rel, r)| {
            let v: f64 = c.iter().zip(x).map(|(a, b)| a * b).sum();
            match rel {
                -1 => v <= r + tol,
                1 => v >= r - tol,
                _ => (v - r).abs() <= tol,
            }
        }) && x.iter().enumerate().all(|(i, v)| *v >= lp.lower[i] - tol && *v <= lp.upper[i] + tol)
    };
    let mut best: Option<f64> = None;
    for subset in combinations(planes.len(), n) {
        let a = subset.iter().map(|&i| planes[i].0.clone()).collect();
        let b = subset.iter().map(|&i| planes[i].1).collect();
        let Some(x) = solve_linear(a, b) else { continue };
        if !feasible(&x) {
            continue;
        }
        let v: f64 = lp.objective.iter().zip(&x).map(|(a, b)| a * b).sum();
        best = Some(match best {
            None => v,
            Some(b) if lp.maximize => b.max(v),
            Some(b) => b.min(v),
        });
    }
    best
}

/// Integer data, up to 6 bounded variables and 10 mixed rows.
pub fn random_small_lp<R: Rng>(rng: &mut R) -> SmallLp {
    let n = rng.gen_range(1..=6);
    let m = rng.gen_range(1..=10);
    let rows = (0..m)
        .map(|_| {
            let coeffs: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-3i32..=3) as f64 })
                .collect();
            let rel = [-1i8, -1, 1, 1, 0][rng.gen_range(0..5)];
            (coeffs, rel, rng.gen_range(-4i32..=6) as f64)
        })
        .collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-3i32..=0) as f64).collect();
    let upper = lower.iter().map(|l| l + rng.gen_range(1i32..=5) as f64).collect();
    SmallLp {
        objective: (0..n).map(|_| rng.gen_range(-5i32..=5) as f64).collect(),
        maximize: rng.gen_bool(0.5),
        rows,
        lower,
        upper,
    }
}

impl SmallLp {
    pub fn to_program(&self) -> LinearProgram {
        let n = self.objective.len();
        let mut p = LinearProgram::new(n, if self.maximize { Sense::Maximize } else { Sense::Minimize });
        p.set_objective(self.objective.clone()).unwrap();
        for (c, rel, rhs) in &self.rows {
            let relation = match rel {
                -1 => Relation::Le,
                1 => Relation::Ge,
                _ => Relation::Eq,
            };
            p.add_constraint(c.clone(), relation, *rhs).unwrap();
        }
        for i in 0..n {
            p.set_bounds(i, self.lower[i], self.upper[i]);
        }
        p
    }
}

/// Beale's example, which cycles under the textbook largest-coefficient rule.
pub fn beale() -> LinearProgram {
    let mut lp = LinearProgram::new(4, Sense::Minimize);
    lp.set_objective(vec![-0.75, 150.0, -0.02, 6.0]).unwrap();
    lp.add_constraint(vec![0.25, -60.0, -0.04, 9.0], Relation::Le, 0.0).unwrap();
    lp.add_constraint(vec![0.5, -90.0, -0.02, 3.0], Relation::Le, 0.0).unwrap();
    lp.add_constraint(vec![0.0, 0.0, 1.0, 0.0], Relation::Le, 1.0).unwrap();
    lp
}
