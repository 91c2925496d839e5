//! Dense-tableau primal simplex for bounded-variable linear programs.
//!
//! Every row `a·x (≤|=|≥) b` becomes `a·x − r = 0` with the row activity
//! `r` carrying the relation as a bound. Phase one drives one artificial
//! per row to zero; phase two optimizes the real objective. Pricing is
//! Dantzig's largest reduced cost, falling back to Bland's smallest-index
//! rule during long runs of degenerate pivots.

use crate::error::{Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Largest constraint violation accepted in a returned solution.
pub const SOLUTION_TOL: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;
const REINVERT_EVERY: usize = 50;
const SINGULAR_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coefficients: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub variables: usize,
    pub objective: Vec<f64>,
    pub sense: Sense,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// A program with zero objective and every variable in `[0, ∞)`.
    pub fn new(variables: usize, sense: Sense) -> Self {
        Self {
            variables,
            objective: vec![0.0; variables],
            sense,
            constraints: Vec::new(),
            lower: vec![0.0; variables],
            upper: vec![f64::INFINITY; variables],
        }
    }

    pub fn set_objective(&mut self, coefficients: Vec<f64>) -> Result<()> {
        self.check_len("objective", coefficients.len())?;
        self.objective = coefficients;
        Ok(())
    }

    pub fn add_constraint(&mut self, coefficients: Vec<f64>, relation: Relation, rhs: f64) -> Result<()> {
        self.check_len("constraint", coefficients.len())?;
        self.constraints.push(Constraint { coefficients, relation, rhs });
        Ok(())
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    fn check_len(&self, context: &'static str, found: usize) -> Result<()> {
        if found != self.variables {
            return Err(Error::Dimension { context, expected: self.variables, found });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_len("objective", self.objective.len())?;
        self.check_len("lower bounds", self.lower.len())?;
        self.check_len("upper bounds", self.upper.len())?;
        for c in &self.constraints {
            self.check_len("constraint", c.coefficients.len())?;
            if !c.rhs.is_finite() || c.coefficients.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("constraint"));
            }
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("objective"));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if l.is_nan() || u.is_nan() || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                return Err(Error::NonFinite("variable bound"));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        crate::tensor::dot(&self.objective, x)
    }

    /// Largest scaled violation of any bound or constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for ((&v, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(l - v).max(v - u);
        }
        for c in &self.constraints {
            let act = crate::tensor::dot(&c.coefficients, x);
            let scale = 1.0
                + c.rhs.abs().max(c.coefficients.iter().zip(x).map(|(a, v)| (a * v).abs()).fold(0.0, f64::max));
            let excess = match c.relation {
                Relation::Le => act - c.rhs,
                Relation::Ge => c.rhs - act,
                Relation::Eq => (act - c.rhs).abs(),
            };
            worst = worst.max(excess / scale);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pricing {
    /// Largest reduced cost, switching to Bland's rule while degenerate.
    Dantzig,
    /// Smallest eligible index throughout.
    Bland,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimplexOptions {
    pub pricing: Pricing,
    pub max_iterations: Option<usize>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { pricing: Pricing::Dantzig, max_iterations: None }
    }
}

pub fn simplex_solve(lp: &LinearProgram) -> Result<LpOutcome> {
    simplex_solve_with(lp, &SimplexOptions::default())
}

pub fn simplex_solve_with(lp: &LinearProgram, options: &SimplexOptions) -> Result<LpOutcome> {
    lp.validate()?;
    let mut t = Tableau::build(lp);
    let cap = options.max_iterations.unwrap_or(50_000 + 20 * (t.rows + t.cols));

    let mut phase_one = vec![0.0; t.cols];
    for i in 0..t.rows {
        phase_one[t.artificial(i)] = 1.0;
    }
    t.run(&phase_one, options.pricing, cap)?;
    let infeasibility: f64 = (0..t.rows).map(|i| t.x[t.artificial(i)]).sum();
    let rhs_scale = 1.0 + lp.constraints.iter().map(|c| c.rhs.abs()).fold(0.0, f64::max);
    if infeasibility > FEASIBILITY_TOL * rhs_scale {
        return Ok(LpOutcome::Infeasible);
    }
    for i in 0..t.rows {
        let a = t.artificial(i);
        t.upper[a] = 0.0;
        t.x[a] = t.x[a].min(0.0);
    }

    let sign = match lp.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut cost = vec![0.0; t.cols];
    for (c, &o) in cost.iter_mut().zip(&lp.objective) {
        *c = sign * o;
    }
    if t.run(&cost, options.pricing, cap)? == RunEnd::Unbounded {
        return Ok(LpOutcome::Unbounded);
    }
    t.reinvert()?;
    let mut x: Vec<f64> = t.x[..lp.variables].to_vec();
    for ((v, &l), &u) in x.iter_mut().zip(&lp.lower).zip(&lp.upper) {
        if *v < l && l - *v <= SOLUTION_TOL {
            *v = l;
        } else if *v > u && *v - u <= SOLUTION_TOL {
            *v = u;
        }
    }
    let violation = lp.max_violation(&x);
    if !(violation <= SOLUTION_TOL) {
        return Err(Error::Solver(format!("solution violates the program by {violation:e}")));
    }
    Ok(LpOutcome::Optimal { value: lp.objective_value(&x), x })
}

#[derive(Debug, PartialEq, Eq)]
enum RunEnd {
    Optimal,
    Unbounded,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// Structural variables.
    n: usize,
    /// Row-major `rows × cols`, always equal to `B⁻¹ A`.
    t: Vec<f64>,
    /// The original `[A | −I | diag(s)]`, kept for reinversion.
    a: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    x: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Tableau {
    fn artificial(&self, row: usize) -> usize {
        self.n + self.rows + row
    }

    fn build(lp: &LinearProgram) -> Self {
        let (n, m) = (lp.variables, lp.constraints.len());
        let cols = n + 2 * m;
        let mut lower = Vec::with_capacity(cols);
        let mut upper = Vec::with_capacity(cols);
        lower.extend_from_slice(&lp.lower);
        upper.extend_from_slice(&lp.upper);
        for c in &lp.constraints {
            let (l, u) = match c.relation {
                Relation::Le => (f64::NEG_INFINITY, c.rhs),
                Relation::Ge => (c.rhs, f64::INFINITY),
                Relation::Eq => (c.rhs, c.rhs),
            };
            lower.push(l);
            upper.push(u);
        }
        lower.extend(std::iter::repeat_n(0.0, m));
        upper.extend(std::iter::repeat_n(f64::INFINITY, m));

        let mut x = vec![0.0; cols];
        for j in 0..n {
            x[j] = if lower[j].is_finite() {
                lower[j]
            } else if upper[j].is_finite() {
                upper[j]
            } else {
                0.0
            };
        }
        let mut a = vec![0.0; m * cols];
        let mut t = vec![0.0; m * cols];
        for (i, c) in lp.constraints.iter().enumerate() {
            let act = crate::tensor::dot(&c.coefficients, &x[..n]);
            let r = act.clamp(lower[n + i], upper[n + i]);
            x[n + i] = r;
            let residual = act - r;
            let s = if residual > 0.0 { -1.0 } else { 1.0 };
            x[n + m + i] = residual.abs();
            let row = &mut a[i * cols..(i + 1) * cols];
            row[..n].copy_from_slice(&c.coefficients);
            row[n + i] = -1.0;
            row[n + m + i] = s;
            for (dst, src) in t[i * cols..(i + 1) * cols].iter_mut().zip(row.iter()) {
                *dst = src / s;
            }
        }
        let basis: Vec<usize> = (0..m).map(|i| n + m + i).collect();
        let mut is_basic = vec![false; cols];
        for &b in &basis {
            is_basic[b] = true;
        }
        Self { rows: m, cols, n, t, a, basis, is_basic, x, lower, upper }
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                let row = &self.t[i * self.cols..(i + 1) * self.cols];
                for (dj, &tij) in d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
        d
    }

    fn entering(&self, d: &[f64], bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..self.cols {
            if self.is_basic[j] || self.lower[j] == self.upper[j] {
                continue;
            }
            let dir = if d[j] < -COST_TOL && self.x[j] < self.upper[j] {
                1.0
            } else if d[j] > COST_TOL && self.x[j] > self.lower[j] {
                -1.0
            } else {
                continue;
            };
            if bland {
                return Some((j, dir));
            }
            if d[j].abs() > best_score {
                best_score = d[j].abs();
                best = Some((j, dir));
            }
        }
        best
    }

    fn run(&mut self, cost: &[f64], pricing: Pricing, cap: usize) -> Result<RunEnd> {
        let mut d = self.reduced_costs(cost);
        let mut streak = 0usize;
        let mut since_reinvert = 0usize;
        for _ in 0..cap {
            if since_reinvert >= REINVERT_EVERY {
                self.reinvert()?;
                d = self.reduced_costs(cost);
                since_reinvert = 0;
            }
            let bland = pricing == Pricing::Bland || streak >= DEGENERATE_STREAK;
            let Some((q, dir)) = self.entering(&d, bland) else {
                if since_reinvert == 0 {
                    return Ok(RunEnd::Optimal);
                }
                // confirm optimality on a freshly factored basis
                since_reinvert = REINVERT_EVERY;
                continue;
            };
            // ratio test
            let mut theta = if dir > 0.0 { self.upper[q] - self.x[q] } else { self.x[q] - self.lower[q] };
            let mut leave: Option<(usize, f64)> = None;
            let mut leave_pivot = 0.0;
            for i in 0..self.rows {
                let tiq = self.t[i * self.cols + q];
                if tiq.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                let rate = -dir * tiq;
                let (limit, bound) = if rate < 0.0 {
                    if self.lower[b] == f64::NEG_INFINITY {
                        continue;
                    }
                    (((self.x[b] - self.lower[b]) / -rate).max(0.0), self.lower[b])
                } else {
                    if self.upper[b] == f64::INFINITY {
                        continue;
                    }
                    (((self.upper[b] - self.x[b]) / rate).max(0.0), self.upper[b])
                };
                let better = match leave {
                    _ if limit < theta => true,
                    Some((r, _)) if limit == theta => {
                        if bland {
                            b < self.basis[r]
                        } else {
                            tiq.abs() > leave_pivot
                        }
                    }
                    _ => false,
                };
                if better {
                    theta = limit;
                    leave = Some((i, bound));
                    leave_pivot = tiq.abs();
                }
            }
            if theta == f64::INFINITY {
                return Ok(RunEnd::Unbounded);
            }
            streak = if theta <= 1e-12 { streak + 1 } else { 0 };
            let step = dir * theta;
            if step != 0.0 {
                self.x[q] += step;
                for i in 0..self.rows {
                    let tiq = self.t[i * self.cols + q];
                    if tiq != 0.0 {
                        self.x[self.basis[i]] -= step * tiq;
                    }
                }
            }
            match leave {
                None => {
                    self.x[q] = if dir > 0.0 { self.upper[q] } else { self.lower[q] };
                }
                Some((r, bound)) => {
                    let out = self.basis[r];
                    self.x[out] = bound;
                    self.pivot(r, q, &mut d);
                    since_reinvert += 1;
                }
            }
        }
        Err(Error::Solver(format!("simplex exceeded {cap} iterations")))
    }

    fn pivot(&mut self, r: usize, q: usize, d: &mut [f64]) {
        let cols = self.cols;
        let p = self.t[r * cols + q];
        let (before, rest) = self.t.split_at_mut(r * cols);
        let (pivot_row, after) = rest.split_at_mut(cols);
        for v in pivot_row.iter_mut() {
            *v /= p;
        }
        pivot_row[q] = 1.0;
        for row in before.chunks_exact_mut(cols).chain(after.chunks_exact_mut(cols)) {
            let f = row[q];
            if f != 0.0 {
                for (v, &pr) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pr;
                }
                row[q] = 0.0;
            }
        }
        let f = d[q];
        if f != 0.0 {
            for (v, &pr) in d.iter_mut().zip(pivot_row.iter()) {
                *v -= f * pr;
            }
            d[q] = 0.0;
        }
        self.is_basic[self.basis[r]] = false;
        self.is_basic[q] = true;
        self.basis[r] = q;
    }

    /// Rebuilds `B⁻¹A` and the basic values from the original rows,
    /// shedding the rounding accumulated by incremental pivots.
    fn reinvert(&mut self) -> Result<()> {
        let (m, cols) = (self.rows, self.cols);
        if m == 0 {
            return Ok(());
        }
        let w = m + cols + 1;
        let mut aug = vec![0.0; m * w];
        for i in 0..m {
            let row = &self.a[i * cols..(i + 1) * cols];
            let dst = &mut aug[i * w..(i + 1) * w];
            for (k, &col) in self.basis.iter().enumerate() {
                dst[k] = row[col];
            }
            dst[m..m + cols].copy_from_slice(row);
            dst[m + cols] = -row
                .iter()
                .zip(&self.x)
                .zip(&self.is_basic)
                .filter(|&((&r, _), &basic)| !basic && r != 0.0)
                .map(|((&r, &x), _)| r * x)
                .sum::<f64>();
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&i, &j| aug[i * w + col].abs().total_cmp(&aug[j * w + col].abs()))
                .expect("nonempty range");
            if aug[pivot * w + col].abs() < SINGULAR_TOL {
                return Err(Error::Solver("basis became singular".into()));
            }
            if pivot != col {
                for k in 0..w {
                    aug.swap(pivot * w + k, col * w + k);
                }
            }
            let p = aug[col * w + col];
            for v in &mut aug[col * w..(col + 1) * w] {
                *v /= p;
            }
            let (head, rest) = aug.split_at_mut(col * w);
            let (prow, tail) = rest.split_at_mut(w);
            for row in head.chunks_exact_mut(w).chain(tail.chunks_exact_mut(w)) {
                let f = row[col];
                if f != 0.0 {
                    for (v, &pv) in row.iter_mut().zip(prow.iter()) {
                        *v -= f * pv;
                    }
                }
            }
        }
        for i in 0..m {
            let src = &aug[i * w..(i + 1) * w];
            self.t[i * cols..(i + 1) * cols].copy_from_slice(&src[m..m + cols]);
            self.x[self.basis[i]] = src[m + cols];
        }
        for (i, &b) in self.basis.iter().enumerate() {
            for r in 0..m {
                self.t[r * cols + b] = if r == i { 1.0 } else { 0.0 };
            }
        }
        Ok(())
    }
}
