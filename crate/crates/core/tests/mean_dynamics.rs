use proptest::prelude::*;
use qnetopt::{
    constant_policy, expected_cost, extract_policy, integrate_mean, mean_dynamics_matrix,
    solve_costate_fh, BangBangPolicy, CostSpec, FhOptions, NetworkState, QueueNetwork,
};

fn two_queue() -> QueueNetwork {
    QueueNetwork::new(2, &[(0, 1.0), (1, 1.0)], &[(0, 1)], 1.0).unwrap()
}

fn costs(v: f64) -> CostSpec {
    CostSpec::new(vec![2.5, 1.0], vec![v], vec![0.0, 0.0], 10.0)
}

#[test]
fn constant_control_matches_matrix_exponential() {
    let net = QueueNetwork::new(
        3,
        &[(0, 0.7), (1, 1.3), (2, 2.0)],
        &[(0, 1), (0, 2), (1, 2)],
        1.5,
    )
    .unwrap();
    let x0 = [10.0, 4.0, 1.0];
    for u in [
        vec![0.0, 0.0, 0.0],
        vec![1.5, 0.0, 1.5],
        vec![1.5, 1.5, 1.5],
    ] {
        let policy = constant_policy(&u, 1.5, None).unwrap();
        let traj = integrate_mean(&net, &policy, &x0, 3.0, 1e-3).unwrap();
        let a = mean_dynamics_matrix(&net, &u);
        let exact = (a * 3.0).exp() * nalgebra::DVector::from_column_slice(&x0);
        for (m, e) in traj.final_mean().iter().zip(exact.iter()) {
            assert!((m - e).abs() <= 1e-9 * e.abs().max(1.0), "{m} vs {e}");
        }
    }
}

#[test]
fn optimal_policy_beats_every_single_switch_competitor() {
    let net = two_queue();
    let costs = costs(1.0);
    let x0 = [50.0, 0.0];
    let traj = solve_costate_fh(&net, &costs, FhOptions::default()).unwrap();
    let optimal = extract_policy(&traj, &costs, &net).unwrap();
    let t_star = optimal.controls()[0].switches()[0];
    let best = expected_cost(&net, &optimal, &costs, &x0, 10.0, 1e-3).unwrap();
    for initially_on in [true, false] {
        for j in 1..=100 {
            let switch = 10.0 * j as f64 / 101.0;
            let competitor =
                BangBangPolicy::new(1.0, Some(10.0), vec![(initially_on, vec![switch])]).unwrap();
            let cost = expected_cost(&net, &competitor, &costs, &x0, 10.0, 1e-3).unwrap();
            assert!(
                cost >= best - 1e-10 * best,
                "switch at {switch}: {cost} < {best}"
            );
            if !initially_on || (switch - t_star).abs() > 1.0 {
                assert!(cost > best, "switch at {switch} ties the optimum");
            }
        }
    }
}

#[test]
fn never_routing_is_optimal_when_routing_is_expensive() {
    let net = two_queue();
    let costs = costs(2.0);
    let x0 = [50.0, 0.0];
    let off = constant_policy(&[0.0], 1.0, Some(10.0)).unwrap();
    let best = expected_cost(&net, &off, &costs, &x0, 10.0, 1e-3).unwrap();
    for j in 1..=100 {
        let switch = 10.0 * j as f64 / 101.0;
        let p = BangBangPolicy::new(1.0, Some(10.0), vec![(true, vec![switch])]).unwrap();
        assert!(expected_cost(&net, &p, &costs, &x0, 10.0, 1e-3).unwrap() > best);
    }
}

#[derive(Debug, Clone)]
struct Case {
    net: QueueNetwork,
    costs: CostSpec,
    x0: Vec<u64>,
}

fn arb_case() -> impl Strategy<Value = Case> {
    (1usize..=3).prop_flat_map(|n| {
        (
            prop::collection::vec(0.3f64..3.0, n),
            prop::collection::vec(any::<bool>(), n * n),
            0.2f64..2.0,
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(0.0f64..3.0, n * n),
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(0u64..30, n),
            1.0f64..6.0,
        )
            .prop_map(
                move |(gammas, adjacency, u_max, q, v_all, c, x0, horizon)| {
                    let exits: Vec<(usize, f64)> = gammas.iter().copied().enumerate().collect();
                    let mut routes = Vec::new();
                    let mut v = Vec::new();
                    for i in 0..n {
                        for j in 0..n {
                            if i != j && adjacency[i * n + j] {
                                routes.push((i, j));
                                v.push(v_all[i * n + j]);
                            }
                        }
                    }
                    Case {
                        net: QueueNetwork::new(n, &exits, &routes, u_max).unwrap(),
                        costs: CostSpec::new(q, v, c, horizon),
                        x0,
                    }
                },
            )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn costate_value_equals_mean_cost(case in arb_case()) {
        let traj = solve_costate_fh(&case.net, &case.costs, FhOptions::default()).unwrap();
        let policy = extract_policy(&traj, &case.costs, &case.net).unwrap();
        let x0 = NetworkState::new(case.x0.clone());
        let value = traj.value_at(&x0, 0.0).unwrap();
        let cost = expected_cost(&case.net, &policy, &case.costs, &x0.to_f64(), case.costs.horizon, 1e-3).unwrap();
        prop_assert!((value - cost).abs() <= 1e-6 * value.abs().max(1.0), "{value} vs {cost}");
    }

    #[test]
    fn mean_is_linear_in_initial_state(case in arb_case(), scale in 0.1f64..10.0) {
        let traj = solve_costate_fh(&case.net, &case.costs, FhOptions::default()).unwrap();
        let policy = extract_policy(&traj, &case.costs, &case.net).unwrap();
        let n = case.net.n();
        let a: Vec<f64> = case.x0.iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| scale * x + y).collect();
        let t = case.costs.horizon;
        let ma = integrate_mean(&case.net, &policy, &a, t, 1e-2).unwrap();
        let mb = integrate_mean(&case.net, &policy, &b, t, 1e-2).unwrap();
        let mc = integrate_mean(&case.net, &policy, &combo, t, 1e-2).unwrap();
        for j in 0..mc.grid.len() {
            for i in 0..n {
                let expect = scale * ma.mu[j][i] + mb.mu[j][i];
                prop_assert!((mc.mu[j][i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }
    }
}
