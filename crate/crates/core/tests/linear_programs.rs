mod common;

use common::{beale, random_small_lp, vertex_enumeration};
use pruneverify::verify::simplex::{simplex_solve_with, Pricing, Relation, Sense, SimplexOptions};
use pruneverify::verify::{simplex_solve, LinearProgram, LpOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_programs_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut optimal, mut infeasible) = (0, 0);
    for _ in 0..200 {
        let lp = random_small_lp(&mut rng);
        let program = lp.to_program();
        let expected = vertex_enumeration(&lp);
        for pricing in [Pricing::Dantzig, Pricing::Bland] {
            let got = simplex_solve_with(&program, &SimplexOptions { pricing, max_iterations: None }).unwrap();
            match (got, expected) {
                (LpOutcome::Optimal { x, value }, Some(best)) => {
                    assert!((value - best).abs() <= 1e-6, "{value} vs {best} for {lp:?}");
                    assert!(program.max_violation(&x) <= 1e-8);
                }
                (LpOutcome::Infeasible, None) => {}
                (got, expected) => panic!("solver {got:?}, oracle {expected:?} for {lp:?}"),
            }
        }
        match expected {
            Some(_) => optimal += 1,
            None => infeasible += 1,
        }
    }
    assert!(optimal > 50 && infeasible > 5, "optimal {optimal}, infeasible {infeasible}");
}

#[test]
fn degenerate_cycling_fixture_terminates() {
    for pricing in [Pricing::Bland, Pricing::Dantzig] {
        let options = SimplexOptions { pricing, max_iterations: Some(10_000) };
        match simplex_solve_with(&beale(), &options).unwrap() {
            LpOutcome::Optimal { value, .. } => assert!((value + 0.05).abs() < 1e-9, "{value}"),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn unbounded_and_free_variables() {
    let mut lp = LinearProgram::new(2, Sense::Maximize);
    lp.set_objective(vec![1.0, 1.0]).unwrap();
    lp.add_constraint(vec![1.0, -1.0], Relation::Le, 1.0).unwrap();
    assert_eq!(simplex_solve(&lp).unwrap(), LpOutcome::Unbounded);

    let mut free = LinearProgram::new(1, Sense::Minimize);
    free.set_bounds(0, f64::NEG_INFINITY, f64::INFINITY);
    free.set_objective(vec![1.0]).unwrap();
    free.add_constraint(vec![1.0], Relation::Ge, -2.5).unwrap();
    match simplex_solve(&free).unwrap() {
        LpOutcome::Optimal { x, value } => assert!((value + 2.5).abs() < 1e-12 && (x[0] + 2.5).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
}
