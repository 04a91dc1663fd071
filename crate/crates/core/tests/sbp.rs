mod common;

use common::{l1, random_tree, rng, solve_dense};
use popflow::sbp::{solve, solve_warm};
use popflow::{Epsilon, SbpConfig, SbpDomain, TreeModel};
use proptest::prelude::*;

fn config(eps: f64, domain: SbpDomain) -> SbpConfig {
    SbpConfig {
        eps: Epsilon::new(eps).unwrap(),
        tol: 1e-12,
        max_sweeps: 100_000,
        domain,
    }
}

fn arb_tree() -> impl Strategy<Value = (TreeModel, f64)> {
    (any::<u64>(), 1usize..=6, prop::sample::select(vec![0.5, 1.0, 2.0])).prop_map(|(seed, n, eps)| {
        let mut r = rng(seed);
        (random_tree(&mut r, n, &[2, 3, 4], 2.0), eps)
    })
}

#[test]
fn matches_dense_oracle_on_fixed_cases() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let model = random_tree(&mut r, 5, &[2, 3], 3.0);
        let sol = solve(&model, &config(1.0, SbpDomain::Linear)).unwrap();
        let oracle = solve_dense(&model, 1.0, 1e-14, 1_000_000);
        for (a, b) in sol.node_marginals.iter().zip(&oracle.node_marginals) {
            assert!(l1(a.as_slice(), b) <= 1e-9, "seed {seed}");
        }
        for (a, b) in sol.edge_flows.iter().zip(&oracle.edge_flows) {
            assert!(a.l1_diff(b) <= 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn linear_and_log_domains_agree() {
    for seed in 0..10 {
        let model = random_tree(&mut rng(100 + seed), 6, &[2, 3, 4], 5.0);
        let a = solve(&model, &config(0.5, SbpDomain::Linear)).unwrap();
        let b = solve(&model, &config(0.5, SbpDomain::Log)).unwrap();
        for (x, y) in a.edge_flows.iter().zip(&b.edge_flows) {
            assert!(x.l1_diff(y) <= 1e-9);
        }
    }
}

#[test]
fn small_eps_needs_log_domain() {
    let model = random_tree(&mut rng(3), 4, &[3], 40.0);
    let cfg = config(0.05, SbpDomain::Log);
    let sol = solve(&model, &cfg).unwrap();
    assert!(sol.constrained_residual(&model) <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constrained_marginals_and_flow_conservation((model, eps) in arb_tree()) {
        let cfg = SbpConfig { tol: 1e-10, ..config(eps, SbpDomain::Linear) };
        let sol = solve(&model, &cfg).unwrap();
        prop_assert!(sol.constrained_residual(&model) <= cfg.tol);
        for (e, flow) in model.edges().iter().zip(&sol.edge_flows) {
            prop_assert!(l1(&flow.row_sums(), sol.node_marginals[e.a].as_slice()) <= 10.0 * cfg.tol);
            prop_assert!(l1(&flow.col_sums(), sol.node_marginals[e.b].as_slice()) <= 10.0 * cfg.tol);
            prop_assert!(flow.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn oracle_equivalence((model, eps) in arb_tree()) {
        let sol = solve(&model, &config(eps, SbpDomain::Linear)).unwrap();
        let oracle = solve_dense(&model, eps, 1e-14, 1_000_000);
        for (a, b) in sol.node_marginals.iter().zip(&oracle.node_marginals) {
            prop_assert!(l1(a.as_slice(), b) <= 1e-8);
        }
        for (a, b) in sol.edge_flows.iter().zip(&oracle.edge_flows) {
            prop_assert!(a.l1_diff(b) <= 1e-8);
        }
    }

    #[test]
    fn residual_is_monotone((model, eps) in arb_tree()) {
        let sol = solve(&model, &config(eps, SbpDomain::Linear)).unwrap();
        for w in sol.residual_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", sol.residual_trace);
        }
    }

    #[test]
    fn edge_potential_scaling_is_invisible((model, eps) in arb_tree(), edge_pick in any::<usize>(), shift in -3.0f64..3.0) {
        prop_assume!(model.num_edges() > 0);
        let e = edge_pick % model.num_edges();
        let mut scaled = model.clone();
        // Multiplying the potential by exp(−shift/ε) adds `shift` to the cost.
        let cost = model.edges()[e].cost.map(|c| c + shift);
        scaled.set_edge_cost(e, cost);
        let cfg = config(eps, SbpDomain::Linear);
        let a = solve(&model, &cfg).unwrap();
        let b = solve(&scaled, &cfg).unwrap();
        for (x, y) in a.node_marginals.iter().zip(&b.node_marginals) {
            prop_assert!(l1(x.as_slice(), y.as_slice()) <= 1e-10);
        }
        for (x, y) in a.edge_flows.iter().zip(&b.edge_flows) {
            prop_assert!(x.l1_diff(y) <= 1e-10);
        }
    }

    #[test]
    fn warm_start_is_invisible((model, eps) in arb_tree(), seed in any::<u64>()) {
        let cfg = config(eps, SbpDomain::Linear);
        let cold = solve(&model, &cfg).unwrap();
        // Warm start from the solution of a perturbed problem.
        let mut other = model.clone();
        let mut r = rng(seed);
        for e in 0..model.num_edges() {
            let c = &model.edges()[e].cost;
            other.set_edge_cost(e, common::random_cost(&mut r, c.rows(), c.cols(), 2.0));
        }
        let seed_sol = solve(&other, &cfg).unwrap();
        let warm = solve_warm(&model, &cfg, Some(&seed_sol.log_scalings)).unwrap();
        for (x, y) in cold.edge_flows.iter().zip(&warm.edge_flows) {
            prop_assert!(x.l1_diff(y) <= 1e-8);
        }
    }
}
