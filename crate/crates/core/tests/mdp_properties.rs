//! Solver and mapped-MDP invariants on random instances.

use proptest::prelude::*;

use rlvc::mdp::{
    bellman_backup, estimate_mapped_mdp, greedy_policy, solve_optimal_q, FiniteMdp, Interaction, PerceptId, QFunction,
};

/// Random MDP with up to 6 states and 3 actions; a row is `(reward, weights)`.
fn mdp_strategy() -> impl Strategy<Value = FiniteMdp> {
    (1usize..=6, 1usize..=3, prop_oneof![Just(0.5), Just(0.9), Just(0.99)]).prop_flat_map(|(n, m, gamma)| {
        let row = (-10.0f64..10.0, prop::collection::vec(0.0f64..1.0, n));
        (prop::collection::vec(row, n * m), prop::collection::vec(any::<bool>(), n)).prop_map(
            move |(rows, terminal)| {
                let mut mdp = FiniteMdp::new(n, m, gamma).unwrap();
                for (i, (r, w)) in rows.into_iter().enumerate() {
                    let total: f64 = w.iter().sum();
                    let dist: Vec<(usize, f64)> = if total > 0.0 {
                        w.iter().enumerate().map(|(j, x)| (j, x / total)).collect()
                    } else {
                        vec![(i / m, 1.0)]
                    };
                    mdp.set_transition(i / m, i % m, r, &dist).unwrap();
                }
                for (s, t) in terminal.into_iter().enumerate() {
                    if t && s > 0 {
                        mdp.set_terminal(s).unwrap();
                    }
                }
                mdp
            },
        )
    })
}

proptest! {
    #[test]
    fn solution_is_a_fixed_point(mdp in mdp_strategy()) {
        let q = solve_optimal_q(&mdp, 1e-9).unwrap();
        prop_assert!(bellman_backup(&q, &mdp).sup_distance(&q) <= 1e-9);
    }

    #[test]
    fn sweeps_contract(mdp in mdp_strategy()) {
        let g = mdp.discount();
        let mut prev = QFunction::zeros(mdp.n_states(), mdp.n_actions());
        let mut cur = bellman_backup(&prev, &mdp);
        for _ in 0..50 {
            let next = bellman_backup(&cur, &mdp);
            prop_assert!(next.sup_distance(&cur) <= g * cur.sup_distance(&prev) + 1e-9);
            prev = cur;
            cur = next;
        }
    }

    #[test]
    fn greedy_policy_ignores_a_constant_shift(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..8),
        c in -1e3f64..1e3,
    ) {
        let q = QFunction::from_rows(&rows);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        // a shift can only break exact float ties, so compare on rows without near-ties
        let clear = rows.iter().all(|r| {
            let mut s = r.clone();
            s.sort_by(f64::total_cmp);
            s[2] - s[1] > 1e-6
        });
        prop_assume!(clear);
        prop_assert_eq!(greedy_policy(&q), greedy_policy(&QFunction::from_rows(&shifted)));
    }

    #[test]
    fn mapped_counts_match_a_recount(
        steps in prop::collection::vec((0u32..12, 0usize..3, -5.0f64..5.0, 0u32..12, prop::bool::weighted(0.2)), 1..200),
        classes in prop::collection::vec(0usize..4, 12),
    ) {
        let interactions: Vec<Interaction> = steps
            .iter()
            .map(|&(s, a, r, s2, t)| Interaction { s: PerceptId(s), a, r, s_next: PerceptId(s2), terminal_next: t })
            .collect();
        let mapped = estimate_mapped_mdp(&interactions, |p| classes[p.index()], 4, 3, 0.9).unwrap();
        let mdp = mapped.mdp();
        for v in 0..4 {
            for a in 0..3 {
                let mine: Vec<&Interaction> =
                    interactions.iter().filter(|i| classes[i.s.index()] == v && i.a == a).collect();
                prop_assert_eq!(mapped.count(v, a), mine.len());
                if mine.is_empty() {
                    prop_assert_eq!(mdp.successors(v, a), &[(v, 1.0)][..]);
                    prop_assert_eq!(mdp.reward(v, a), 0.0);
                    continue;
                }
                let sum: f64 = mdp.successors(v, a).iter().map(|&(_, p)| p).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                let mean = mine.iter().map(|i| i.r).sum::<f64>() / mine.len() as f64;
                prop_assert!((mdp.reward(v, a) - mean).abs() < 1e-9);
                let to_sink = mine.iter().filter(|i| i.terminal_next).count() as f64 / mine.len() as f64;
                prop_assert!((mdp.probability(v, a, mapped.terminal_state()) - to_sink).abs() < 1e-12);
            }
        }
    }
}
