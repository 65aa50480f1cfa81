use hjb_adp::oracle::{
    batch_cost, batch_lq_solve, build_batch_matrices, discretize, policy_error, riccati_solve, BatchLqProblem,
    BatchLqSolver, Discretization, DiscreteLti, LqOracle,
};
use hjb_adp::vehicle::{LinearDynamics, VehicleParams};
use hjb_adp::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> BatchLqProblem {
    let dim = 4;
    let raw = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    // spectral norm 0.99 keeps Ad^100 well scaled
    let ad = &raw * (0.99 / raw.clone().singular_values().max());
    let bd = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let qm = &g * g.transpose() * 0.5;
    let g2 = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let p = &g2 * g2.transpose() * 0.5;
    let sys = DiscreteLti { ad, bd, h: 0.01 };
    BatchLqProblem::new(&sys, qm, rng.random_range(0.1..3.0), p, n).unwrap()
}

fn tracking_problem(n: usize) -> BatchLqProblem {
    let dynm = LinearDynamics::new(&VehicleParams::default()).unwrap();
    let sys = discretize(&dynm, 0.005, Discretization::Zoh).unwrap();
    BatchLqProblem::tracking(&sys, 0.4, 280.0, n).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn simulate(p: &BatchLqProblem, x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut xk = DVector::from_column_slice(x);
    let mut out = Vec::with_capacity(x.len() * u.len());
    for &uk in u {
        xk = &p.ad * &xk + &p.bd * uk;
        out.extend(xk.iter().copied());
    }
    out
}

fn riccati_rollout_cost(p: &BatchLqProblem, x: &[f64]) -> (f64, Vec<f64>) {
    let gains = riccati_solve(p);
    let mut xk = DVector::from_column_slice(x);
    let mut cost = 0.0;
    let mut us = Vec::new();
    for (k, kk) in gains.iter().enumerate() {
        let u = -kk.dot(&xk);
        us.push(u);
        xk = &p.ad * &xk + &p.bd * u;
        let w = if k + 1 == p.n { &p.p } else { &p.qm };
        cost += p.rm * u * u + (xk.transpose() * w * &xk)[0];
    }
    (cost, us)
}

#[test]
fn batch_first_move_matches_riccati_on_tracking_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 10, 50, 100] {
        let p = tracking_problem(n);
        let solver = BatchLqSolver::new(&p).unwrap();
        let k0 = &riccati_solve(&p)[0];
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let u_batch = solver.solve(&x).unwrap()[0];
            let u_ric = -k0.dot(&DVector::from_column_slice(&x));
            assert!(
                (u_batch - u_ric).abs() <= 1e-8 * (1.0 + u_ric.abs()),
                "N={n}: batch {u_batch} vs riccati {u_ric}"
            );
        }
    }
}

#[test]
fn batch_first_move_matches_riccati_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [1, 10, 50, 100] {
        for _ in 0..5 {
            let p = random_problem(&mut rng, n);
            let solver = BatchLqSolver::new(&p).unwrap();
            let k0 = &riccati_solve(&p)[0];
            for _ in 0..20 {
                let x = random_state(&mut rng);
                let u_batch = solver.solve(&x).unwrap()[0];
                let u_ric = -k0.dot(&DVector::from_column_slice(&x));
                assert!((u_batch - u_ric).abs() <= 1e-8 * (1.0 + u_ric.abs()), "N={n}");
            }
        }
    }
}

#[test]
fn whole_sequence_matches_riccati_rollout() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in [3, 25] {
        let p = random_problem(&mut rng, n);
        let m = build_batch_matrices(&p);
        let x = random_state(&mut rng);
        let u = batch_lq_solve(&p, &x).unwrap();
        let (ric_cost, ric_u) = riccati_rollout_cost(&p, &x);
        for (a, b) in u.iter().zip(&ric_u) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
        let cost = batch_cost(&m, &x, &u);
        assert!((cost - ric_cost).abs() <= 1e-8 * (1.0 + ric_cost.abs()), "{cost} vs {ric_cost}");
    }
}

#[test]
fn one_step_scalar_hand_value() {
    let sys = DiscreteLti {
        ad: DMatrix::from_element(1, 1, 1.0),
        bd: DVector::from_element(1, 1.0),
        h: 1.0,
    };
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = BatchLqProblem::new(&sys, one.clone(), 1.0, one, 1).unwrap();
    assert!((batch_lq_solve(&p, &[1.0]).unwrap()[0] + 0.5).abs() < 1e-15);
    assert!((riccati_solve(&p)[0][0] - 0.5).abs() < 1e-15);
}

#[test]
fn zero_input_matrix_gives_zero_gains() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = random_problem(&mut rng, 8);
    p.bd.fill(0.0);
    assert!(riccati_solve(&p).iter().all(|k| k.iter().all(|&v| v == 0.0)));
}

#[test]
fn single_step_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p = random_problem(&mut rng, 1);
    let m = build_batch_matrices(&p);
    assert_eq!(m.s_bar.column(0).into_owned(), p.bd);
    assert_eq!(m.t_bar, p.ad);
    assert_eq!(m.q_bar, p.p);
    assert_eq!(m.r_bar[(0, 0)], p.rm);
}

#[test]
fn identity_dynamics_stack_is_lower_triangular_ones() {
    let bd = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    let sys = DiscreteLti {
        ad: DMatrix::identity(4, 4),
        bd: bd.clone(),
        h: 0.1,
    };
    let z = DMatrix::zeros(4, 4);
    let p = BatchLqProblem::new(&sys, z.clone(), 1.0, z, 2).unwrap();
    let m = build_batch_matrices(&p);
    assert_eq!(m.s_bar.view((0, 0), (4, 1)).into_owned(), bd.clone().into_owned());
    assert!(m.s_bar.view((0, 1), (4, 1)).iter().all(|&v| v == 0.0));
    assert_eq!(m.s_bar.view((4, 0), (4, 1)).into_owned(), bd.clone().into_owned());
    assert_eq!(m.s_bar.view((4, 1), (4, 1)).into_owned(), bd.into_owned());
}

#[test]
fn singular_hessian_is_a_conditioning_error() {
    let sys = DiscreteLti {
        ad: DMatrix::identity(4, 4),
        bd: DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        h: 0.1,
    };
    // only the terminal cost sees the inputs, through their sum: rank one
    let mut term = DMatrix::zeros(4, 4);
    term[(0, 0)] = 1e9;
    let p = BatchLqProblem::new(&sys, DMatrix::zeros(4, 4), 1e-6, term, 3).unwrap();
    assert!(matches!(BatchLqSolver::new(&p), Err(Error::Conditioning(_))));
}

#[test]
fn oracle_matches_remaining_horizon_solve() {
    let base = tracking_problem(100);
    let mut oracle = LqOracle::new(base.clone(), 0.5, 0.005).unwrap();
    let x = [0.5, -0.1, 0.2, 0.3];
    for t in [0.0, 0.1234, 0.4999] {
        let steps = ((0.5 - t) / 0.005_f64).round().max(1.0) as usize;
        let direct = batch_lq_solve(&base.with_horizon(steps), &x).unwrap()[0];
        assert!((oracle.control(&x, t).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn policy_error_of_oracle_is_zero_and_offset_is_scaled() {
    let mut oracle = LqOracle::new(tracking_problem(100), 0.5, 0.005).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let states: Vec<(Vec<f64>, f64)> = (0..50)
        .map(|_| (random_state(&mut rng), rng.random_range(0.0..0.5)))
        .collect();
    let exact = oracle.policy().unwrap();
    let rep = policy_error(&exact, &mut oracle, &states, 10.0).unwrap();
    assert_eq!(rep.mean_abs, 0.0);
    let range = rep.oracle_max - rep.oracle_min;
    let shifted = {
        let inner = oracle.policy().unwrap();
        move |x: &[f64], t: f64| hjb_adp::ocp::Policy::control(&inner, x, t) - 0.01
    };
    let rep = policy_error(&shifted, &mut oracle, &states, 10.0).unwrap();
    assert!((rep.mean_abs - 0.01 / range).abs() < 1e-12);
    assert!((rep.mean_signed + 0.01 / range).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_identity_matches_simulation(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, n);
        let m = build_batch_matrices(&p);
        let x = random_state(&mut rng);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stacked = &m.t_bar * DVector::from_column_slice(&x) + &m.s_bar * DVector::from_column_slice(&u);
        let direct = simulate(&p, &x, &u);
        for (a, b) in stacked.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn solution_is_homogeneous(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 20);
        let solver = BatchLqSolver::new(&p).unwrap();
        let x = random_state(&mut rng);
        let ax: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let u = solver.solve(&x).unwrap();
        let ua = solver.solve(&ax).unwrap();
        for (a, b) in ua.iter().zip(&u) {
            prop_assert!((a - alpha * b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_state_gives_zero_sequence(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 15);
        prop_assert!(batch_lq_solve(&p, &[0.0; 4]).unwrap().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn perturbations_increase_cost(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 10);
        let m = build_batch_matrices(&p);
        let x = random_state(&mut rng);
        let u = batch_lq_solve(&p, &x).unwrap();
        let j = batch_cost(&m, &x, &u);
        let du: Vec<f64> = (0..10).map(|_| rng.random_range(-1e-2..1e-2)).collect();
        let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
        prop_assert!(batch_cost(&m, &x, &up) > j);
    }

    #[test]
    fn euler_is_first_order_expansion(h in 1e-4f64..0.1) {
        let dynm = LinearDynamics::new(&VehicleParams::default()).unwrap();
        let e = discretize(&dynm, h, Discretization::Euler).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let id = if i == j { 1.0 } else { 0.0 };
                let ha = h * dynm.a[i][j];
                prop_assert!((e.ad[(i, j)] - id - ha).abs() <= 4.0 * f64::EPSILON * (1.0 + ha.abs()));
            }
        }
    }
}
