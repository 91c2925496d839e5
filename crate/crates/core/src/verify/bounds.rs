//! Interval and symbolic (affine) bound propagation over an input box.

use crate::error::{Error, Result};
use crate::network::{Block, LinearLayer, Network};
use crate::tensor::{gemm, Matrix, Transpose};

use super::InputBox;

/// Activation phase of one hidden ReLU inside a branch-and-bound node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Free,
    Active,
    Inactive,
}

/// Affine functions of the input, one per row: `coeffs · x + constants`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub coeffs: Matrix,
    pub constants: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self { coeffs: Matrix::identity(dim), constants: vec![0.0; dim] }
    }

    pub fn len(&self) -> usize {
        self.constants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constants.is_empty()
    }

    pub fn eval(&self, row: usize, x: &[f64]) -> f64 {
        crate::tensor::dot(self.coeffs.row(row), x) + self.constants[row]
    }

    fn zero_row(&mut self, row: usize) {
        self.coeffs.row_mut(row).fill(0.0);
        self.constants[row] = 0.0;
    }

    fn scale_row(&mut self, row: usize, factor: f64, shift: f64) {
        for c in self.coeffs.row_mut(row) {
            *c *= factor;
        }
        self.constants[row] = factor * (self.constants[row] + shift);
    }
}

/// Smallest value of `coeffs · x + constant` over the box.
pub fn min_over_box(coeffs: &[f64], constant: f64, bx: &InputBox) -> f64 {
    let mut acc = constant;
    for ((&c, &lo), &hi) in coeffs.iter().zip(&bx.lower).zip(&bx.upper) {
        acc += if c > 0.0 { c * lo } else { c * hi };
    }
    acc
}

/// Largest value of `coeffs · x + constant` over the box.
pub fn max_over_box(coeffs: &[f64], constant: f64, bx: &InputBox) -> f64 {
    let mut acc = constant;
    for ((&c, &lo), &hi) in coeffs.iter().zip(&bx.lower).zip(&bx.upper) {
        acc += if c > 0.0 { c * hi } else { c * lo };
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicBounds {
    pub lower: Affine,
    pub upper: Affine,
}

/// Bounds on the output of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub symbolic: Option<SymbolicBounds>,
}

impl LayerBounds {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn unstable(&self) -> usize {
        self.lower.iter().zip(&self.upper).filter(|(l, u)| **l < 0.0 && **u > 0.0).count()
    }
}

pub(crate) fn check_fused(net: &Network) -> Result<()> {
    if net.has_batchnorm() {
        return Err(Error::Structure(
            "verification needs a fused network (linear and relu blocks only)".into(),
        ));
    }
    Ok(())
}

fn check_box(net: &Network, bx: &InputBox) -> Result<()> {
    if bx.dim() != net.input_dim() {
        return Err(Error::Dimension {
            context: "input box",
            expected: net.input_dim(),
            found: bx.dim(),
        });
    }
    Ok(())
}

fn interval_linear(layer: &LinearLayer, lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = layer.bias.to_vec();
    let mut hi = layer.bias.to_vec();
    for (o, row) in layer.weights.iter_rows().enumerate() {
        for ((&w, &l), &u) in row.iter().zip(lower).zip(upper) {
            if w > 0.0 {
                lo[o] += w * l;
                hi[o] += w * u;
            } else if w < 0.0 {
                lo[o] += w * u;
                hi[o] += w * l;
            }
        }
    }
    (lo, hi)
}

/// Plain interval arithmetic; one entry per block of `net`.
pub fn interval_propagate(net: &Network, bx: &InputBox) -> Result<Vec<LayerBounds>> {
    check_fused(net)?;
    check_box(net, bx)?;
    let mut lower = bx.lower.clone();
    let mut upper = bx.upper.clone();
    let mut out = Vec::with_capacity(net.blocks().len());
    for block in net.blocks() {
        match block {
            Block::Linear(l) => (lower, upper) = interval_linear(l, &lower, &upper),
            Block::Relu => {
                lower.iter_mut().for_each(|v| *v = v.max(0.0));
                upper.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Block::BatchNorm(_) => unreachable!(),
        }
        out.push(LayerBounds { lower: lower.clone(), upper: upper.clone(), symbolic: None });
    }
    Ok(out)
}

fn split_signs(w: &Matrix) -> (Matrix, Matrix) {
    let mut pos = w.clone();
    let mut neg = w.clone();
    for (p, n) in pos.as_mut_slice().iter_mut().zip(neg.as_mut_slice()) {
        if *p < 0.0 {
            *p = 0.0;
        } else {
            *n = 0.0;
        }
    }
    (pos, neg)
}

/// Composes a linear layer with the affine bounds of its input.
fn compose_linear(layer: &LinearLayer, prev: Option<&SymbolicBounds>, dim: usize) -> Result<SymbolicBounds> {
    let Some(prev) = prev else {
        let forms = Affine { coeffs: layer.weights.clone(), constants: layer.bias.to_vec() };
        return Ok(SymbolicBounds { lower: forms.clone(), upper: forms });
    };
    let (rows, inner) = (layer.out_dim(), layer.in_dim());
    let mut lower = Affine { coeffs: Matrix::zeros(rows, dim), constants: layer.bias.to_vec() };
    let mut upper = lower.clone();
    let nnz = layer.weights.count_nonzero();
    if nnz * 3 < rows * inner {
        for (o, row) in layer.weights.iter_rows().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (src_lo, src_hi) = if w > 0.0 { (&prev.lower, &prev.upper) } else { (&prev.upper, &prev.lower) };
                crate::tensor::axpy(w, src_lo.coeffs.row(i), lower.coeffs.row_mut(o));
                crate::tensor::axpy(w, src_hi.coeffs.row(i), upper.coeffs.row_mut(o));
                lower.constants[o] += w * src_lo.constants[i];
                upper.constants[o] += w * src_hi.constants[i];
            }
        }
    } else {
        let (pos, neg) = split_signs(&layer.weights);
        gemm(1.0, &pos, Transpose::No, &prev.lower.coeffs, Transpose::No, 0.0, &mut lower.coeffs)?;
        gemm(1.0, &neg, Transpose::No, &prev.upper.coeffs, Transpose::No, 1.0, &mut lower.coeffs)?;
        gemm(1.0, &pos, Transpose::No, &prev.upper.coeffs, Transpose::No, 0.0, &mut upper.coeffs)?;
        gemm(1.0, &neg, Transpose::No, &prev.lower.coeffs, Transpose::No, 1.0, &mut upper.coeffs)?;
        for o in 0..rows {
            for i in 0..inner {
                let (p, n) = (pos[(o, i)], neg[(o, i)]);
                lower.constants[o] += p * prev.lower.constants[i] + n * prev.upper.constants[i];
                upper.constants[o] += p * prev.upper.constants[i] + n * prev.lower.constants[i];
            }
        }
    }
    Ok(SymbolicBounds { lower, upper })
}

/// Symbolic propagation under a phase assignment (one vector per hidden
/// layer, `None` meaning all free). Returns `None` when the assignment is
/// provably infeasible over the box.
pub(crate) fn propagate_with_phases(
    net: &Network,
    bx: &InputBox,
    phases: Option<&[Vec<Phase>]>,
) -> Result<Option<Vec<LayerBounds>>> {
    check_fused(net)?;
    check_box(net, bx)?;
    let dim = net.input_dim();
    let mut out: Vec<LayerBounds> = Vec::with_capacity(net.blocks().len());
    let mut hidden = 0usize;
    for (b, block) in net.blocks().iter().enumerate() {
        match block {
            Block::Linear(layer) => {
                let prev = out.last();
                let forms = compose_linear(layer, prev.and_then(|p| p.symbolic.as_ref()), dim)?;
                let (prev_lo, prev_hi) = match prev {
                    Some(p) => (&p.lower, &p.upper),
                    None => (&bx.lower, &bx.upper),
                };
                let (int_lo, int_hi) = interval_linear(layer, prev_lo, prev_hi);
                let mut lower = Vec::with_capacity(layer.out_dim());
                let mut upper = Vec::with_capacity(layer.out_dim());
                for o in 0..layer.out_dim() {
                    let l = min_over_box(forms.lower.coeffs.row(o), forms.lower.constants[o], bx).max(int_lo[o]);
                    let u = max_over_box(forms.upper.coeffs.row(o), forms.upper.constants[o], bx).min(int_hi[o]);
                    if l > u + 1e-9 * (1.0 + l.abs().max(u.abs())) {
                        return Ok(None);
                    }
                    lower.push(l.min(u));
                    upper.push(u.max(l));
                }
                out.push(LayerBounds { lower, upper, symbolic: Some(forms) });
            }
            Block::Relu => {
                let pre = &out[b - 1];
                let mut forms = pre.symbolic.clone().expect("linear blocks carry forms");
                let mut lower = pre.lower.clone();
                let mut upper = pre.upper.clone();
                for i in 0..lower.len() {
                    let phase = phases.map_or(Phase::Free, |p| p[hidden][i]);
                    let (l, u) = (lower[i], upper[i]);
                    let identity = match phase {
                        Phase::Active if u < 0.0 => return Ok(None),
                        Phase::Inactive if l > 0.0 => return Ok(None),
                        Phase::Active => true,
                        Phase::Inactive => false,
                        Phase::Free if l >= 0.0 => true,
                        Phase::Free if u <= 0.0 => false,
                        Phase::Free => {
                            let slope = u / (u - l);
                            forms.upper.scale_row(i, slope, -l);
                            if u < -l {
                                forms.lower.zero_row(i);
                            }
                            lower[i] = 0.0;
                            continue;
                        }
                    };
                    if identity {
                        lower[i] = l.max(0.0);
                    } else {
                        forms.lower.zero_row(i);
                        forms.upper.zero_row(i);
                        lower[i] = 0.0;
                        upper[i] = 0.0;
                    }
                }
                hidden += 1;
                out.push(LayerBounds { lower, upper, symbolic: Some(forms) });
            }
            Block::BatchNorm(_) => unreachable!(),
        }
    }
    Ok(Some(out))
}

/// Symbolic propagation with every ReLU free; one entry per block.
pub fn symbolic_propagate(net: &Network, bx: &InputBox) -> Result<Vec<LayerBounds>> {
    Ok(propagate_with_phases(net, bx, None)?.expect("an unconstrained box is never infeasible"))
}

/// Number of hidden pre-activations whose interval straddles zero.
pub fn unstable_relus(net: &Network, bounds: &[LayerBounds]) -> usize {
    net.blocks()
        .iter()
        .zip(bounds)
        .zip(net.blocks().iter().skip(1).map(Some).chain(std::iter::once(None)))
        .filter(|(_, next)| matches!(next, Some(Block::Relu)))
        .map(|((_, b), _)| b.unstable())
        .sum()
}

/// Upper bound of `y_a − y_b` over the box, from back-substituting the
/// difference of two output rows into the last hidden layer's bounds and
/// taking the tighter of that and the interval bound.
pub fn difference_upper(
    net: &Network,
    bounds: &[LayerBounds],
    bx: &InputBox,
    a: usize,
    b: usize,
) -> f64 {
    let blocks = net.blocks();
    let Some(Block::Linear(last)) = blocks.last() else { unreachable!() };
    if blocks.len() == 1 {
        let (coeffs, constant) = difference_form(net, bounds, a, b);
        return max_over_box(&coeffs, constant, bx);
    }
    let prev = &bounds[blocks.len() - 2];
    let mut interval = last.bias[a] - last.bias[b];
    for (i, (&l, &u)) in prev.lower.iter().zip(&prev.upper).enumerate() {
        let r = last.weights[(a, i)] - last.weights[(b, i)];
        interval += if r > 0.0 { r * u } else { r * l };
    }
    if prev.symbolic.is_none() {
        return interval;
    }
    let (coeffs, constant) = difference_form(net, bounds, a, b);
    max_over_box(&coeffs, constant, bx).min(interval)
}

/// Affine upper bound of `y_a − y_b` over the input, built from the last
/// hidden layer's forms.
pub(crate) fn difference_form(
    net: &Network,
    bounds: &[LayerBounds],
    a: usize,
    b: usize,
) -> (Vec<f64>, f64) {
    let blocks = net.blocks();
    let Some(Block::Linear(last)) = blocks.last() else { unreachable!() };
    let row: Vec<f64> = last.weights.row(a).iter().zip(last.weights.row(b)).map(|(x, y)| x - y).collect();
    let shift = last.bias[a] - last.bias[b];
    if blocks.len() == 1 {
        return (row, shift);
    }
    let forms = bounds[blocks.len() - 2].symbolic.as_ref().expect("symbolic bounds");
    let mut coeffs = vec![0.0; net.input_dim()];
    let mut constant = shift;
    for (i, &r) in row.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let src = if r > 0.0 { &forms.upper } else { &forms.lower };
        crate::tensor::axpy(r, src.coeffs.row(i), &mut coeffs);
        constant += r * src.constants[i];
    }
    (coeffs, constant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Vector;

    fn net(layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Network {
        let mut blocks = Vec::new();
        let input = layers[0].0[0].len();
        for (i, (w, b)) in layers.iter().enumerate() {
            if i > 0 {
                blocks.push(Block::Relu);
            }
            blocks.push(Block::Linear(
                LinearLayer::new(Matrix::from_rows(w).unwrap(), Vector::from(b.clone())).unwrap(),
            ));
        }
        Network::new(input, blocks).unwrap()
    }

    #[test]
    fn identity_and_relu_intervals() {
        let id = net(vec![(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])]);
        let bx = InputBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = interval_propagate(&id, &bx).unwrap();
        assert_eq!(b[0].lower, vec![0.0, 0.0]);
        assert_eq!(b[0].upper, vec![1.0, 1.0]);

        let shifted = net(vec![(vec![vec![3.0]], vec![-1.0]), (vec![vec![1.0]], vec![0.0])]);
        let bx = InputBox::new(vec![0.0], vec![1.0]).unwrap();
        let b = interval_propagate(&shifted, &bx).unwrap();
        assert_eq!((b[0].lower[0], b[0].upper[0]), (-1.0, 2.0));
        assert_eq!((b[1].lower[0], b[1].upper[0]), (0.0, 2.0));
    }

    #[test]
    fn unstable_relu_upper_relaxation() {
        // z = 2x − 1 over x ∈ [0, 1], so z ∈ [−1, 1]
        let n = net(vec![(vec![vec![2.0]], vec![-1.0]), (vec![vec![1.0]], vec![0.0])]);
        let bx = InputBox::new(vec![0.0], vec![1.0]).unwrap();
        let b = symbolic_propagate(&n, &bx).unwrap();
        let upper = &b[1].symbolic.as_ref().unwrap().upper;
        for (x, expected) in [(1.0, 1.0), (0.0, 0.0), (0.5, 0.5)] {
            assert!((upper.eval(0, &[x]) - expected).abs() < 1e-15);
        }
        // u = |l|, so the lower relaxation keeps the identity
        let lower = &b[1].symbolic.as_ref().unwrap().lower;
        assert!((lower.eval(0, &[0.25]) + 0.5).abs() < 1e-15);
        assert_eq!(unstable_relus(&n, &b), 1);
    }

    #[test]
    fn stable_network_is_exact() {
        let n = net(vec![
            (vec![vec![1.0, 2.0], vec![0.5, -1.0]], vec![1.0, 2.0]),
            (vec![vec![1.0, -1.0]], vec![0.0]),
        ]);
        let bx = InputBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = symbolic_propagate(&n, &bx).unwrap();
        // output = x0 + 2x1 + 1 − (0.5x0 − x1 + 2) = 0.5x0 + 3x1 − 1
        assert!((b[2].lower[0] + 1.0).abs() < 1e-12);
        assert!((b[2].upper[0] - 2.5).abs() < 1e-12);
        assert_eq!(unstable_relus(&n, &b), 0);
    }

    #[test]
    fn contradictory_phase_is_infeasible() {
        let n = net(vec![(vec![vec![1.0]], vec![1.0]), (vec![vec![1.0]], vec![0.0])]);
        let bx = InputBox::new(vec![0.0], vec![1.0]).unwrap();
        let phases = vec![vec![Phase::Inactive]];
        assert!(propagate_with_phases(&n, &bx, Some(&phases)).unwrap().is_none());
        let phases = vec![vec![Phase::Active]];
        assert!(propagate_with_phases(&n, &bx, Some(&phases)).unwrap().is_some());
    }

    #[test]
    fn batchnorm_networks_are_rejected() {
        use rand::SeedableRng;
        let n = Network::initialize(&[2, 3, 2], &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bx = InputBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(interval_propagate(&n, &bx), Err(Error::Structure(_))));
    }
}
