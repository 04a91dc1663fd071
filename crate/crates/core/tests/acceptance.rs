//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::{dense_entropic_plan, l1, random_simplex, random_symmetric_cost, random_tree, rng, solve_dense};
use popflow::cli::{main_with, EXIT_IO, EXIT_OK, EXIT_SCHEMA, EXIT_SOLVER};
use popflow::cost::*;
use popflow::em::*;
use popflow::eval::{nmae, stay_baseline, NeighborStructure};
use popflow::io::*;
use popflow::sbp::solve;
use popflow::sim::{observe, simulate, SimConfig};
use popflow::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn eps(x: f64) -> Epsilon {
    Epsilon::new(x).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut r = rng(1001);
    for _ in 0..50 {
        let nodes = r.gen_range(2..=6);
        let e = [0.5, 1.0, 2.0][r.gen_range(0..3)];
        let model = random_tree(&mut r, nodes, &[2, 3, 4], 2.0);
        let cfg = SbpConfig {
            tol: 1e-13,
            max_sweeps: 100_000,
            ..SbpConfig::new(eps(e))
        };
        let sol = solve(&model, &cfg).map_err(|err| err.to_string())?;
        let oracle = solve_dense(&model, e, 1e-14, 1_000_000);
        for (a, b) in sol.node_marginals.iter().zip(&oracle.node_marginals) {
            worst = worst.max(l1(a.as_slice(), b));
        }
        for (a, b) in sol.edge_flows.iter().zip(&oracle.edge_flows) {
            worst = worst.max(a.l1_diff(b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-8 && secs <= 60.0, format!("max l1 {worst:.2e} over 50 trees, {secs:.1} s"))
}

/// Grid-shaped HMM tree with smooth positive marginals and squared-distance
/// transition costs.
fn hmm_tree(w: usize, h: usize, steps: usize, e: Epsilon) -> TreeModel {
    let coords: Vec<[f64; 2]> = (0..w * h).map(|k| [(k % w) as f64, (k / w) as f64]).collect();
    let space = StateSpace::from_coords(coords.clone()).unwrap();
    let per_step = (0..steps)
        .map(|t| {
            let v = coords
                .iter()
                .map(|c| 1.0 + 0.5 * (0.3 * c[0] + 0.2 * t as f64).sin() * (0.2 * c[1]).cos())
                .collect();
            DenseVector::new(v).unwrap().normalized().unwrap()
        })
        .collect();
    let obs = ObservationSet::single(w * h, per_step).unwrap();
    let cost = squared_distance_cost(&space, 1.0, 50.0 * e.value());
    build_hmm_tree(&obs, &near_identity_emission(w * h, e), &vec![cost; steps - 1]).unwrap().0
}

/// Best-of-three wall time per sweep over a fixed sweep budget.
fn seconds_per_sweep(model: &TreeModel, e: Epsilon, sweeps: usize) -> f64 {
    let cfg = SbpConfig {
        tol: f64::MIN_POSITIVE,
        max_sweeps: sweeps,
        ..SbpConfig::new(e)
    };
    (0..3)
        .map(|_| {
            let start = Instant::now();
            // The budget is too small to converge; only the timing matters.
            let _ = solve(model, &cfg);
            start.elapsed().as_secs_f64() / sweeps as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn marginal_feasibility() -> Outcome {
    let e = eps(1.0);
    let small = hmm_tree(15, 15, 48, e);
    let cfg = SbpConfig {
        tol: 1e-8,
        max_sweeps: 10_000,
        ..SbpConfig::new(e)
    };
    let sol = solve(&small, &cfg).map_err(|err| err.to_string())?;
    let residual = sol.constrained_residual(&small);
    let large = hmm_tree(15, 30, 48, e);
    let ratio = seconds_per_sweep(&large, e, 100) / seconds_per_sweep(&small, e, 100);
    check(
        residual <= 1e-8 && sol.sweeps_used <= 10_000 && (3.3..=5.0).contains(&ratio),
        format!(
            "S=225 residual {residual:.2e} after {} sweeps; time ratio S=450/S=225 {ratio:.2}",
            sol.sweeps_used
        ),
    )
}

fn symmetric_round_trip() -> Outcome {
    let (mut plan_err, mut cost_err) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let truth = random_symmetric_cost(&mut r, 5, 0.0, 3.0);
        let mu = random_simplex(&mut r, 5, 0.2);
        let nu = random_simplex(&mut r, 5, 0.2);
        let flow = dense_entropic_plan(&truth, &mu, &nu, 1.0, 1e-15);
        let fit = learn_cost_symmetric(&flow, &flow.row_sums(), &flow.col_sums(), &SymCostConfig::new(eps(1.0)))
            .map_err(|err| err.to_string())?;
        plan_err = plan_err.max(fit.plan_residual);
        cost_err = cost_err.max(fit.cost.max_abs_diff(&truth));
    }
    check(
        plan_err <= 1e-6 && cost_err <= 1e-4,
        format!("20 costs: max plan l1 {plan_err:.2e}, max cost error {cost_err:.2e}"),
    )
}

fn line(n: usize) -> StateSpace {
    StateSpace::from_coords((0..n).map(|i| [i as f64, 0.0]).collect()).unwrap()
}

fn basis_round_trip() -> Outcome {
    let mut plan_err = 0.0f64;
    let mut supports_ok = true;
    let mut zero_ok = true;
    for (k, weight) in [(0usize, 1.5), (1, 1.0), (2, 0.5), (3, 0.1)] {
        let mut r = rng(3000 + k as u64);
        let mut model = BasisCostModel::with_default_bases(&line(5), 1e-4).unwrap();
        let mut truth = vec![0.0; 4];
        truth[k] = weight;
        let mu = random_simplex(&mut r, 5, 0.2);
        let nu = random_simplex(&mut r, 5, 0.2);
        let flow = dense_entropic_plan(&model.cost_of(&truth), &mu, &nu, 1.0, 1e-15);
        let (mu, nu) = (flow.row_sums(), flow.col_sums());
        let fit = learn_cost_basis(&flow, &mu, &nu, &model, &BasisConfig::new(eps(1.0))).map_err(|err| err.to_string())?;
        supports_ok &= (0..4).all(|q| (fit.beta[q] != 0.0) == (q == k));
        plan_err = plan_err.max(fit.plan_residual);
        model.gamma = 1e3;
        model.beta = vec![0.5; 4];
        let heavy = learn_cost_basis(&flow, &mu, &nu, &model, &BasisConfig::new(eps(1.0))).map_err(|err| err.to_string())?;
        zero_ok &= heavy.beta.iter().all(|&b| b == 0.0);
    }
    check(
        supports_ok && plan_err <= 1e-6 && zero_ok,
        format!("support exact: {supports_ok}; max plan l1 {plan_err:.2e}; gamma=1e3 gives zero: {zero_ok}"),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn gradient_checks() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(4000 + seed);
        let n = r.gen_range(2..6);
        let e = eps(r.gen_range(0.3..2.0));
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let flow = DenseMatrix::from_fn(n, n, |_, _| r.gen::<f64>());
        let flow = flow.scale(1.0 / flow.sum());
        let (mu, nu) = (flow.row_sums(), flow.col_sums());
        let model = BasisCostModel::with_default_bases(&line(n), 0.0).unwrap();
        let beta: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..0.5)).collect();
        let cost = model.cost_of(&beta);
        let f = |c: &DenseMatrix, a: &[f64], b: &[f64]| imot_objective(c, a, b, &flow, &mu, &nu, e).unwrap();
        let g = imot_gradient(&cost, &a, &b, &flow, &mu, &nu, e).map_err(|err| err.to_string())?;
        let gb = beta_gradient(&model.bases, &g.cost);
        let bump = |v: &[f64], i: usize, d: f64| {
            let mut w = v.to_vec();
            w[i] += d;
            w
        };
        for i in 0..n {
            let fd = (f(&cost, &bump(&a, i, h), &b) - f(&cost, &bump(&a, i, -h), &b)) / (2.0 * h);
            worst = worst.max(rel_err(fd, g.alpha_t[i]));
            let fd = (f(&cost, &a, &bump(&b, i, h)) - f(&cost, &a, &bump(&b, i, -h))) / (2.0 * h);
            worst = worst.max(rel_err(fd, g.alpha_t1[i]));
        }
        for (q, &g) in gb.iter().enumerate() {
            let fd = (f(&model.cost_of(&bump(&beta, q, h)), &a, &b) - f(&model.cost_of(&bump(&beta, q, -h)), &a, &b))
                / (2.0 * h);
            worst = worst.max(rel_err(fd, g));
        }
    }
    check(worst <= 1e-4, format!("100 instances: max relative error {worst:.2e}"))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let base = SimConfig {
        grid_w: 10,
        n_particles: 50_000,
        steps: 8,
        decay_len: 10.0,
        rng_seed: 7,
        ..SimConfig::default()
    };
    let sim = SimConfig {
        sensor_positions: Some(base.sensor_per_cell()),
        ..base
    };
    let truth = simulate(&sim, Exec::default()).map_err(|err| err.to_string())?;
    let obs = observe(&truth, &sim, Exec::default()).map_err(|err| err.to_string())?;
    let nbrs = NeighborStructure::moore(10);
    let stay = nmae(&stay_baseline(&truth.marginals), &truth.flows, &nbrs).map_err(|err| err.to_string())?;
    let e = eps(0.1);
    let mut ok = true;
    let mut parts = vec![format!("STAY {stay:.4}")];
    for variant in [Variant::Istc, Variant::Ista] {
        let config = EmConfig {
            variant,
            eps: e,
            sbp_tol: 1e-5,
            sbp_max_sweeps: 200_000,
            outer_tol: 1e-4,
            ..EmConfig::default()
        };
        let res = run_em(&obs, &sim.state_space(), &near_identity_emission(100, e), &config).map_err(|err| err.to_string())?;
        let score = nmae(&res.flows, &truth.flows, &nbrs).map_err(|err| err.to_string())?;
        ok &= score <= 0.6 * stay;
        parts.push(format!("{variant:?} {score:.4} ({} iterations)", res.trace.len()));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs <= 900.0;
    parts.push(format!("{secs:.0} s"));
    check(ok, parts.join(", "))
}

fn time_varying_advantage() -> Outcome {
    let mut r = rng(7000);
    let scale = 3.0;
    let costs = [
        random_symmetric_cost(&mut r, 5, 0.0, scale),
        random_symmetric_cost(&mut r, 5, 0.0, scale),
    ];
    let mut mu = random_simplex(&mut r, 5, 0.2);
    let targets: Vec<FlowTarget> = (0..6)
        .map(|t| {
            let nu = random_simplex(&mut r, 5, 0.2);
            let flow = dense_entropic_plan(&costs[t % 2], &mu, &nu, 1.0, 1e-15);
            mu = flow.col_sums();
            FlowTarget::from_flow(flow)
        })
        .collect();
    let cfg = SymCostConfig::new(eps(1.0));
    let mut per_step_err = 0.0f64;
    let mut fitted = Vec::new();
    for target in &targets {
        let fit = learn_cost_symmetric(&target.flow, &target.mu_t, &target.mu_t1, &cfg).map_err(|err| err.to_string())?;
        per_step_err = per_step_err.max(fit.plan_residual);
        fitted.push(fit.cost);
    }
    let gap = fitted.windows(2).map(|w| w[0].max_abs_diff(&w[1])).fold(f64::INFINITY, f64::min);
    let shared = learn_cost_symmetric_shared(&targets, &cfg).map_err(|err| err.to_string())?;
    let shared_err = shared.plan_residuals.iter().copied().fold(0.0, f64::max);
    check(
        gap >= 0.1 * scale && per_step_err <= 1e-4 && shared_err >= 5.0 * per_step_err,
        format!(
            "smallest adjacent cost gap {gap:.3} (scale {scale}); plan l1 per-step {per_step_err:.2e}, shared {shared_err:.2e}"
        ),
    )
}

fn cli(args: &[&str]) -> (i32, String) {
    let argv: Vec<OsString> = std::iter::once("popflow").chain(args.iter().copied()).map(OsString::from).collect();
    let mut err = Vec::new();
    let code = main_with(argv, Vec::<(String, String)>::new(), &mut err);
    (code, String::from_utf8_lossy(&err).into_owned())
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let names = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    names(a) == names(b) && names(a).iter().all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap())
}

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|err| err.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    fs::write(
        d.join("run.json"),
        r#"{"simulation":{"grid_w":4,"n_particles":500,"steps":3,"rng_seed":9},"estimation":{"eps":1.0,"sbp_tol":1e-10,"sbp_max_sweeps":100000}}"#,
    )
    .unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for run in ["sim_a", "sim_b"] {
        ok &= cli(&["simulate", "--config", &p("run.json"), "--out", &p(run)]).0 == EXIT_OK;
    }
    let obs = format!("{}/observations.csv", p("sim_a"));
    for run in ["est_a", "est_b"] {
        ok &= cli(&["estimate", "--config", &p("run.json"), "--observations", &obs, "--out", &p(run)]).0 == EXIT_OK;
    }
    let reruns = same_tree(&d.join("sim_a"), &d.join("sim_b")) && same_tree(&d.join("est_a"), &d.join("est_b"));
    ok &= reruns;
    notes.push(format!("byte-identical reruns: {reruns}"));

    let mut trips = true;
    for name in ["truth_flows.csv", "observations.csv", "truth_marginals.csv"] {
        let text = fs::read_to_string(d.join("sim_a").join(name)).unwrap();
        let again = if name.contains("flows") {
            flows_to_string(&flows_from_str(&text).map_err(|err| err.to_string())?)
        } else {
            marginals_to_string(&marginals_from_str(&text).map_err(|err| err.to_string())?)
        };
        trips &= again == text;
    }
    let costs = fs::read_to_string(d.join("est_a/costs.csv")).unwrap();
    trips &= costs_to_string(&costs_from_str(&costs).map_err(|err| err.to_string())?) == costs;
    ok &= trips;
    notes.push(format!("exact file round trips: {trips}"));

    fs::write(d.join("short.json"), r#"{"simulation":{"steps":1}}"#).unwrap();
    fs::write(d.join("stalled.json"), r#"{"estimation":{"sbp_tol":1e-15,"sbp_max_sweeps":1}}"#).unwrap();
    let tiny = format!("{}/tests/data/tiny/observations.csv", env!("CARGO_MANIFEST_DIR"));
    let cases: [(Vec<String>, i32); 5] = [
        (vec!["simulate".into(), "--config".into(), p("short.json"), "--out".into(), p("x")], EXIT_SCHEMA),
        (vec!["simulate".into(), "--unknown-flag".into()], EXIT_SCHEMA),
        (vec!["simulate".into(), "--config".into(), p("missing.json"), "--out".into(), p("x")], EXIT_IO),
        (
            vec!["estimate".into(), "--config".into(), p("stalled.json"), "--observations".into(), tiny.clone(), "--out".into(), p("x")],
            EXIT_SOLVER,
        ),
        (vec!["estimate".into(), "--observations".into(), p("missing.csv"), "--out".into(), p("x")], EXIT_IO),
    ];
    let mut contract = true;
    for (args, want) in &cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, err) = cli(&args);
        contract &= code == *want && serde_json::from_str::<serde_json::Value>(err.trim()).is_ok();
    }
    ok &= contract;
    notes.push(format!("exit codes: {contract}"));
    check(ok, notes.join("; "))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("dense oracle equivalence", oracle_equivalence),
        ("marginal feasibility and scaling", marginal_feasibility),
        ("symmetric inverse transport round trip", symmetric_round_trip),
        ("basis inverse transport round trip", basis_round_trip),
        ("gradient checks", gradient_checks),
        ("end-to-end synthetic recovery", end_to_end),
        ("time-varying costs", time_varying_advantage),
        ("determinism and formats", determinism_and_formats),
    ];
    // Written to the raw handle so the report shows even when output is captured.
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let n = k + 1;
        let line = match run() {
            Ok(detail) => format!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed.push(n);
                format!("criterion {n} FAIL {name}: {detail}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
