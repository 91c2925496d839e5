mod common;

use common::{eval, random_with_batchnorm};
use pruneverify::network::{BatchNormLayer, LinearLayer, BN_EPSILON};
use pruneverify::{Block, Matrix, Network, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fused_networks_agree_with_the_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for widths in [vec![2, 3, 2], vec![6, 5, 4, 3], vec![10, 8, 8, 8, 4]] {
        let net = random_with_batchnorm(&mut rng, &widths);
        let fused = net.fuse_batchnorm().unwrap();
        assert!(fused.is_fused() && !fused.has_batchnorm());
        assert_eq!(fused.param_counts(), net.param_counts());
        for _ in 0..1000 {
            let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(0.0..1.0)).collect();
            let reference = eval(&net, &x);
            let a = fused.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            assert!(a.max_abs_diff(&reference) <= 1e-9);
            assert!(b.max_abs_diff(&reference) <= 1e-12);
        }
    }
}

#[test]
fn unit_batchnorm_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w1 = common::uniform_matrix(&mut rng, 3, 2, 1.0);
    let b1 = common::uniform_vector(&mut rng, 3, -0.5, 0.5);
    let w2 = common::uniform_matrix(&mut rng, 2, 3, 1.0);
    let b2 = common::uniform_vector(&mut rng, 2, -0.5, 0.5);
    let bn = BatchNormLayer::new(
        Vector::filled(3, 1.0),
        Vector::zeros(3),
        Vector::zeros(3),
        Vector::filled(3, 1.0 - BN_EPSILON),
        BN_EPSILON,
    )
    .unwrap();
    let with_bn = Network::new(
        2,
        vec![
            Block::Linear(LinearLayer::new(w1.clone(), b1.clone()).unwrap()),
            Block::BatchNorm(bn),
            Block::Relu,
            Block::Linear(LinearLayer::new(w2.clone(), b2.clone()).unwrap()),
        ],
    )
    .unwrap();
    let without = Network::new(
        2,
        vec![
            Block::Linear(LinearLayer::new(w1, b1).unwrap()),
            Block::Relu,
            Block::Linear(LinearLayer::new(w2, b2).unwrap()),
        ],
    )
    .unwrap();
    for _ in 0..100 {
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        assert!(with_bn.forward(&x).unwrap().max_abs_diff(&eval(&without, &x)) < 1e-12);
    }
}

#[test]
fn fusing_twice_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fused = random_with_batchnorm(&mut rng, &[4, 3, 3, 2]).fuse_batchnorm().unwrap();
    assert_eq!(fused.fuse_batchnorm().unwrap(), fused);
    let m = Matrix::identity(2);
    let plain = Network::new(2, vec![Block::Linear(LinearLayer::new(m, Vector::zeros(2)).unwrap())]).unwrap();
    assert_eq!(plain.fuse_batchnorm().unwrap(), plain);
}
