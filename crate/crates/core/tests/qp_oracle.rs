mod common;

use ellipsoid_mpc::qp::{ActiveSetSolver, Qp};
use nalgebra::DVector;
use proptest::prelude::*;

fn random_qp() -> impl Strategy<Value = Qp> {
    (any::<u64>(), 1usize..=8, 1usize..=8)
        .prop_map(|(seed, n, m)| common::random_qp(&mut common::rng(seed), n, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_enumeration_oracle(qp in random_qp()) {
        let sol = ActiveSetSolver::default().solve(&qp, None, &[]).unwrap();
        let oracle = common::qp_enumeration_oracle(&qp);
        prop_assert!((&sol.x - &oracle).amax() <= 1e-8, "gap {}", (&sol.x - &oracle).amax());
    }

    #[test]
    fn solution_satisfies_kkt(qp in random_qp()) {
        let sol = ActiveSetSolver::default().solve(&qp, None, &[]).unwrap();
        let stationarity = &qp.hessian * &sol.x + &qp.gradient + qp.constraints.tr_mul(&sol.multipliers);
        prop_assert!(stationarity.amax() <= 1e-8, "stationarity {}", stationarity.amax());
        prop_assert!(qp.max_violation(&sol.x) <= 1e-9);
        let slack = &qp.bounds - &qp.constraints * &sol.x;
        for i in 0..qp.num_rows() {
            prop_assert!(sol.multipliers[i] >= -1e-10);
            prop_assert!((sol.multipliers[i] * slack[i]).abs() <= 1e-8);
        }
        prop_assert!((sol.objective - qp.objective(&sol.x)).abs() <= 1e-9 * (1.0 + sol.objective.abs()));
    }

    #[test]
    fn warm_start_reproduces_solution(qp in random_qp(), start_seed in any::<u64>()) {
        let solver = ActiveSetSolver::default();
        let cold = solver.solve(&qp, None, &[]).unwrap();
        let warm = solver.solve(&qp, Some(&cold.x), &cold.active_set).unwrap();
        prop_assert!((&warm.x - &cold.x).amax() <= 1e-8);
        prop_assert!(warm.iterations <= cold.iterations.max(1));

        // arbitrary, possibly infeasible start and a garbage working set
        let mut rng = common::rng(start_seed);
        let x0 = DVector::from_fn(qp.num_vars(), |_, _| rand::Rng::random_range(&mut rng, -10.0..10.0));
        let all: Vec<usize> = (0..qp.num_rows()).collect();
        let other = solver.solve(&qp, Some(&x0), &all).unwrap();
        prop_assert!((&other.x - &cold.x).amax() <= 1e-8);
    }
}
