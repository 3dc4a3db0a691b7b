use proptest::prelude::*;
use qnetopt::{NetworkState, QueueNetwork};

fn arb_network() -> impl Strategy<Value = QueueNetwork> {
    (1usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::option::of(0.1f64..5.0), n),
            prop::collection::vec(any::<bool>(), n * n),
            0.1f64..4.0,
        )
            .prop_map(move |(rates, adjacency, u_max)| {
                let exits: Vec<(usize, f64)> = rates
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| r.map(|r| (i, r)))
                    .collect();
                let routes: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter(|&(i, j)| i != j && adjacency[i * n + j])
                    .collect();
                QueueNetwork::new(n, &exits, &routes, u_max).unwrap()
            })
    })
}

fn arb_network_with_inputs() -> impl Strategy<Value = (QueueNetwork, Vec<u64>, Vec<u64>, Vec<f64>)>
{
    arb_network().prop_flat_map(|net| {
        let n = net.n();
        let m_u = net.m_u();
        let u_max = net.u_max();
        (
            Just(net),
            prop::collection::vec(0u64..50, n),
            prop::collection::vec(0u64..50, n),
            prop::collection::vec(0.0..=u_max, m_u),
        )
    })
}

proptest! {
    #[test]
    fn exit_columns_remove_one_customer(net in arb_network()) {
        let r_e = net.r_e();
        for j in 0..net.m_e() {
            let col: i32 = r_e.column(j).iter().sum();
            prop_assert_eq!(col, -1);
            prop_assert_eq!(r_e.column(j).iter().filter(|&&v| v != 0).count(), 1);
        }
    }

    #[test]
    fn routing_columns_conserve_customers(net in arb_network()) {
        let r_d = net.r_d();
        for k in 0..net.m_u() {
            let col: i32 = r_d.column(k).iter().sum();
            prop_assert_eq!(col, 0);
            prop_assert_eq!(r_d.column(k).iter().filter(|&&v| v != 0).count(), 2);
        }
    }

    #[test]
    fn exit_matrix_is_negative_selector_transpose(net in arb_network()) {
        let e = net.e().map(|v| -v);
        prop_assert_eq!(net.r_e(), &e.transpose());
    }

    #[test]
    fn routing_sources_match_selector(net in arb_network()) {
        let h = net.h();
        let r_d = net.r_d();
        for k in 0..net.m_u() {
            for i in 0..net.n() {
                prop_assert_eq!(r_d[(i, k)] == -1, h[(k, i)] == 1);
            }
        }
        for k in 0..net.m_u() {
            let row: i32 = h.row(k).iter().sum();
            prop_assert_eq!(row, 1);
        }
    }

    #[test]
    fn event_rates_are_linear_in_state(
        (net, a, b, u) in arb_network_with_inputs(),
    ) {
        let sum: Vec<u64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ra = net.event_rates(&NetworkState::new(a), &u).unwrap();
        let rb = net.event_rates(&NetworkState::new(b), &u).unwrap();
        let rs = net.event_rates(&NetworkState::new(sum), &u).unwrap();
        prop_assert_eq!(ra.len(), net.m_e() + net.m_u());
        for ((x, y), s) in ra.iter().zip(&rb).zip(&rs) {
            prop_assert!((x + y - s).abs() <= 1e-12 * s.abs().max(1.0));
            prop_assert!(*s >= 0.0);
        }
    }

    #[test]
    fn event_changes_follow_columns((net, x, _, _) in arb_network_with_inputs()) {
        let m_e = net.m_e();
        for j in 0..m_e + net.m_u() {
            let change = net.event_change(j);
            prop_assert!(change.iter().sum::<i64>() <= 0);
            let source = change.iter().position(|&d| d == -1).unwrap();
            if j >= m_e {
                prop_assert_eq!(source, net.routes()[j - m_e].from);
            }
            // An event is only possible from a state that can afford it.
            let rate = net.event_rates(&NetworkState::new(x.clone()), &vec![net.u_max(); net.m_u()]).unwrap()[j];
            prop_assert_eq!(rate > 0.0, x[source] > 0);
        }
    }

    #[test]
    fn reachability_matches_path_search(net in arb_network()) {
        let n = net.n();
        let mut reach = vec![false; n];
        for e in net.exits() {
            reach[e.queue] = true;
        }
        // Fixed-point iteration instead of a graph search.
        loop {
            let mut changed = false;
            for r in net.routes() {
                if reach[r.to] && !reach[r.from] {
                    reach[r.from] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let report = net.validate_reachability();
        let missing: Vec<usize> = (0..n).filter(|&i| !reach[i]).collect();
        prop_assert_eq!(report.ok, missing.is_empty());
        prop_assert_eq!(report.unreachable_queues, missing);
    }
}
