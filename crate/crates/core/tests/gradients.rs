mod common;

use common::gradcheck::{agrees, analytic_entries, nudge, train_mode_loss, H};
use common::{cross_entropy, eval, random_with_batchnorm};
use pruneverify::network::Mode;
use pruneverify::{Matrix, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nets() -> Vec<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    vec![random_with_batchnorm(&mut rng, &[4, 3, 2]), random_with_batchnorm(&mut rng, &[6, 5, 4, 3])]
}

#[test]
fn single_sample_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for net in nets() {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = rng.gen_range(0..net.output_dim());
        let (loss, grads) = net.backward(&x, label, Mode::Eval).unwrap();
        assert!((loss - cross_entropy(&eval(&net, &x), label)).abs() < 1e-12);

        let entries = analytic_entries(&grads.params.blocks);
        let mut failures = Vec::new();
        for &(b, p, a) in &entries {
            let plus = cross_entropy(&eval(&nudge(&net, b, p, H), &x), label);
            let minus = cross_entropy(&eval(&nudge(&net, b, p, -H), &x), label);
            let numeric = (plus - minus) / (2.0 * H);
            if !agrees(a, numeric) {
                failures.push((b, p, a, numeric));
            }
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += H;
            xm[i] -= H;
            let numeric = (cross_entropy(&eval(&net, &xp), label) - cross_entropy(&eval(&net, &xm), label)) / (2.0 * H);
            assert!(agrees(grads.input_gradient[i], numeric), "input {i}: {} vs {numeric}", grads.input_gradient[i]);
        }
        assert!(failures.is_empty(), "{} of {} parameters disagree: {failures:?}", failures.len(), entries.len());
    }
}

#[test]
fn batch_gradients_differentiate_through_batch_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for net in nets() {
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..net.output_dim())).collect();
        let inputs = Matrix::from_rows(&rows).unwrap();
        let (loss, grads, _) = net.backward_batch(&inputs, &labels).unwrap();
        assert!((loss - train_mode_loss(&net, &rows, &labels)).abs() < 1e-12);

        let entries = analytic_entries(&grads.blocks);
        let failures: Vec<_> = entries
            .iter()
            .filter(|&&(b, p, a)| {
                let plus = train_mode_loss(&nudge(&net, b, p, H), &rows, &labels);
                let minus = train_mode_loss(&nudge(&net, b, p, -H), &rows, &labels);
                !agrees(a, (plus - minus) / (2.0 * H))
            })
            .collect();
        assert!(failures.is_empty(), "{} of {} parameters disagree: {failures:?}", failures.len(), entries.len());
    }
}
