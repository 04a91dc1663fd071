//! Alternating estimation of hidden flows and per-step transition costs.
//!
//! Each outer iteration solves the tree transport problem for the current
//! costs (E-step) and then re-learns every transition cost from its expected
//! flow by inverse optimal transport (M-step), either as a free symmetric
//! zero-diagonal matrix or as a sparse distance-power combination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{
    learn_cost_basis, learn_cost_symmetric_from, BasisConfig, BasisCostModel, SymCostConfig, CLAMP_FACTOR,
    DEFAULT_EXPONENTS,
};
use crate::dense::{median, DenseMatrix, DenseVector, Epsilon};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::sbp::{solve_warm, SbpConfig, SbpDomain};
use crate::tree::{build_hmm_tree, ObservationSet, StateSpace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Free symmetric zero-diagonal costs, learned by iterative scaling.
    #[default]
    Istc,
    /// Sparse combinations of distance-power bases, learned by proximal steps.
    Ista,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "istc" => Ok(Variant::Istc),
            "ista" => Ok(Variant::Ista),
            other => Err(Error::Schema(format!("unknown variant `{other}` (expected istc or ista)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCost {
    /// `init_scale · |x_i − x_j|²` in coordinate units.
    #[default]
    SquaredDistance,
    /// Squared distance rescaled so that its median off-diagonal entry is ε.
    MedianScaled,
    /// All-zero cost (independent coupling).
    Uniform,
    /// Costs supplied by the caller through [`run_em_from`].
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub variant: Variant,
    pub eps: Epsilon,
    pub outer_iters: usize,
    /// Stop when no transition cost moves by more than this (∞-norm).
    pub outer_tol: f64,
    pub init_cost: InitCost,
    pub init_scale: f64,
    /// Reserved; the estimator is deterministic.
    pub seed: u64,
    pub sbp_tol: f64,
    pub sbp_max_sweeps: usize,
    pub sbp_domain: SbpDomain,
    pub sym_tol: f64,
    pub sym_max_iters: usize,
    pub gamma: f64,
    pub exponents: Vec<f64>,
    pub debias: bool,
    /// Consecutive non-decreasing cost changes tolerated before giving up.
    pub stagnation_window: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            variant: Variant::Istc,
            eps: Epsilon::new(0.1).unwrap(),
            outer_iters: 30,
            outer_tol: 1e-5,
            init_cost: InitCost::SquaredDistance,
            init_scale: 1.0,
            seed: 0,
            sbp_tol: 1e-8,
            sbp_max_sweeps: 10_000,
            sbp_domain: SbpDomain::Linear,
            sym_tol: 1e-8,
            sym_max_iters: 5000,
            gamma: 1e-3,
            exponents: DEFAULT_EXPONENTS.to_vec(),
            debias: true,
            stagnation_window: 5,
        }
    }
}

impl EmConfig {
    pub fn c_max(&self) -> f64 {
        CLAMP_FACTOR * self.eps.value()
    }

    fn sbp(&self) -> SbpConfig {
        SbpConfig {
            eps: self.eps,
            tol: self.sbp_tol,
            max_sweeps: self.sbp_max_sweeps,
            domain: self.sbp_domain,
        }
    }

    fn check(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::InvalidInput("outer_iters must be at least 1".into()));
        }
        if !(self.outer_tol >= 0.0) || !(self.init_scale > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput(
                "outer_tol and gamma must be nonnegative, init_scale positive".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// Largest ∞-norm change of a transition cost in the M-step.
    pub cost_change: f64,
    /// Regularized transport objective of the E-step solution.
    pub free_energy: f64,
    pub sbp_sweeps: usize,
    pub sbp_residual: f64,
    /// Largest plan reconstruction error among the M-step fits.
    pub m_step_residual: f64,
}

#[derive(Clone, Debug)]
pub struct EmResult {
    /// Unit-mass transition flow per interval `t → t+1`.
    pub flows: Vec<DenseMatrix>,
    /// Hidden-node marginals per step.
    pub marginals: Vec<DenseVector>,
    /// Transition costs used for the final E-step.
    pub costs: Vec<DenseMatrix>,
    /// Basis coefficients per interval (ISTA variant only).
    pub betas: Option<Vec<Vec<f64>>>,
    pub transition_matrices: Vec<DenseMatrix>,
    pub trace: Vec<EmIteration>,
    pub converged: bool,
}

/// Squared distances in coordinate units times `scale`, capped at `c_max`.
pub fn squared_distance_cost(space: &StateSpace, scale: f64, c_max: f64) -> DenseMatrix {
    space.squared_distance_matrix().map(|d| (scale * d).min(c_max))
}

/// Emission cost that keeps nearly all mass in place: zero diagonal,
/// `50 ε` elsewhere.
pub fn near_identity_emission(states: usize, eps: Epsilon) -> DenseMatrix {
    let c = CLAMP_FACTOR * eps.value();
    DenseMatrix::from_fn(states, states, |i, j| if i == j { 0.0 } else { c })
}

/// Emission cost from sensor geometry: `|x_i − x_j|² / decay_len`, capped at `50 ε`.
pub fn distance_emission(space: &StateSpace, decay_len: f64, eps: Epsilon) -> DenseMatrix {
    squared_distance_cost(space, 1.0 / decay_len, CLAMP_FACTOR * eps.value())
}

/// Row-normalized Gibbs kernels, `A_ij ∝ exp(−C_ij/ε)`.
pub fn extract_transition_matrices(costs: &[DenseMatrix], eps: Epsilon) -> Vec<DenseMatrix> {
    let e = eps.value();
    costs
        .iter()
        .map(|c| {
            let mut rows = Vec::with_capacity(c.rows());
            for i in 0..c.rows() {
                let row = c.row(i);
                let m = row.iter().copied().fold(f64::INFINITY, f64::min);
                let w: Vec<f64> = row.iter().map(|x| (-(x - m) / e).exp()).collect();
                let z: f64 = w.iter().sum();
                rows.push(w.into_iter().map(|x| x / z).collect());
            }
            DenseMatrix::from_rows(rows).expect("finite costs give finite transition rows")
        })
        .collect()
}

fn initial_costs(space: &StateSpace, config: &EmConfig, intervals: usize) -> Result<Vec<DenseMatrix>> {
    let s = space.size();
    let c_max = config.c_max();
    let cost = match config.init_cost {
        InitCost::SquaredDistance => squared_distance_cost(space, config.init_scale, c_max),
        InitCost::MedianScaled => {
            let d = space.squared_distance_matrix();
            let mut off: Vec<f64> = (0..s)
                .flat_map(|i| (0..s).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| d.get(i, j))
                .collect();
            let med = median(&mut off).filter(|m| *m > 0.0).unwrap_or(1.0);
            squared_distance_cost(space, config.eps.value() / med, c_max)
        }
        InitCost::Uniform => DenseMatrix::zeros(s, s),
        InitCost::User => {
            return Err(Error::InvalidInput(
                "init_cost `user` requires initial costs to be supplied".into(),
            ))
        }
    };
    Ok(vec![cost; intervals])
}

/// Runs the EM loop from the configured initial costs.
pub fn run_em(
    observations: &ObservationSet,
    space: &StateSpace,
    emission_cost: &DenseMatrix,
    config: &EmConfig,
) -> Result<EmResult> {
    run_em_from(observations, space, emission_cost, config, None, Exec::default())
}

/// Runs the EM loop from `init` (one cost per interval) when given, otherwise
/// from the configured initialization. `exec` controls the M-step map.
pub fn run_em_from(
    observations: &ObservationSet,
    space: &StateSpace,
    emission_cost: &DenseMatrix,
    config: &EmConfig,
    init: Option<Vec<DenseMatrix>>,
    exec: Exec,
) -> Result<EmResult> {
    config.check()?;
    let steps = observations.num_steps();
    if steps < 2 {
        return Err(Error::InvalidInput(format!("need T >= 2 time steps, got {steps}")));
    }
    if observations.num_states() != space.size() {
        return Err(Error::shape(
            format!("{} states", space.size()),
            format!("observations over {} states", observations.num_states()),
        ));
    }
    for (t, reps) in observations.steps().iter().enumerate() {
        if reps.is_empty() {
            return Err(Error::MissingObservation { step: t });
        }
    }
    let intervals = steps - 1;
    let c_max = config.c_max();
    let mut costs = match init {
        Some(c) if c.len() == intervals => c.into_iter().map(|m| m.map(|x| x.min(c_max))).collect(),
        Some(c) => return Err(Error::shape(format!("{intervals} initial costs"), format!("{}", c.len()))),
        None => initial_costs(space, config, intervals)?,
    };

    let basis = match config.variant {
        Variant::Ista => {
            let mut model =
                BasisCostModel::new(space, &config.exponents, config.gamma)?.capped(c_max / config.init_scale);
            if config.init_cost == InitCost::SquaredDistance {
                if let Some(k) = config.exponents.iter().position(|&q| q == 2.0) {
                    model.beta[k] = config.init_scale;
                }
            }
            Some(model)
        }
        Variant::Istc => None,
    };
    let mut betas: Option<Vec<Vec<f64>>> = basis.as_ref().map(|m| vec![m.beta.clone(); intervals]);

    let sbp = config.sbp();
    let sym = SymCostConfig {
        eps: config.eps,
        tol: config.sym_tol,
        max_iters: config.sym_max_iters,
        ..SymCostConfig::default()
    };
    let basis_config = BasisConfig {
        debias: config.debias,
        ..BasisConfig::new(config.eps)
    };

    let mut warm: Option<BTreeMap<usize, Vec<f64>>> = None;
    let mut trace: Vec<EmIteration> = Vec::new();
    let mut converged = false;
    let mut rising = 0usize;

    for iteration in 1..=config.outer_iters {
        let wrap = |e: Error| Error::EmStep {
            iteration,
            source: Box::new(e),
        };
        let (flows, _, sweeps, residual, free_energy, scalings) =
            e_step(observations, emission_cost, &costs, &sbp, warm.as_ref()).map_err(wrap)?;
        warm = Some(scalings);

        let fits: Vec<(DenseMatrix, Option<Vec<f64>>, f64)> = exec
            .try_map_range(intervals, |t| {
                let flow = &flows[t];
                let (mu, nu) = (flow.row_sums(), flow.col_sums());
                match (&basis, &betas) {
                    (Some(model), Some(b)) => {
                        let mut m = model.clone();
                        m.beta = b[t].clone();
                        let fit = learn_cost_basis(flow, &mu, &nu, &m, &basis_config)?;
                        let cost = fit.cost.map(|x| x.min(c_max));
                        Ok((cost, Some(fit.beta), fit.plan_residual))
                    }
                    _ => {
                        let fit = learn_cost_symmetric_from(flow, &mu, &nu, &sym, Some(&costs[t]))?;
                        Ok((fit.cost, None, fit.plan_residual))
                    }
                }
            })
            .map_err(wrap)?;

        let cost_change = fits
            .iter()
            .zip(&costs)
            .map(|((c, _, _), old)| c.max_abs_diff(old))
            .fold(0.0, f64::max);
        let m_step_residual = fits.iter().map(|f| f.2).fold(0.0, f64::max);
        if let Some(b) = betas.as_mut() {
            for (slot, fit) in b.iter_mut().zip(&fits) {
                *slot = fit.1.clone().expect("basis fits carry coefficients");
            }
        }
        costs = fits.into_iter().map(|f| f.0).collect();

        if let Some(prev) = trace.last() {
            rising = if cost_change >= prev.cost_change { rising + 1 } else { 0 };
        }
        trace.push(EmIteration {
            iteration,
            cost_change,
            free_energy,
            sbp_sweeps: sweeps,
            sbp_residual: residual,
            m_step_residual,
        });
        if cost_change <= config.outer_tol {
            converged = true;
            break;
        }
        if rising >= config.stagnation_window {
            return Err(Error::Stagnation {
                iteration,
                window: config.stagnation_window,
            });
        }
    }

    let iteration = trace.len() + 1;
    let (flows, marginals, ..) = e_step(observations, emission_cost, &costs, &sbp, warm.as_ref())
        .map_err(|e| Error::EmStep {
            iteration,
            source: Box::new(e),
        })?;
    Ok(EmResult {
        transition_matrices: extract_transition_matrices(&costs, config.eps),
        flows,
        marginals,
        costs,
        betas,
        trace,
        converged,
    })
}

type EStep = (Vec<DenseMatrix>, Vec<DenseVector>, usize, f64, f64, BTreeMap<usize, Vec<f64>>);

fn e_step(
    observations: &ObservationSet,
    emission_cost: &DenseMatrix,
    costs: &[DenseMatrix],
    sbp: &SbpConfig,
    warm: Option<&BTreeMap<usize, Vec<f64>>>,
) -> Result<EStep> {
    let (model, layout) = build_hmm_tree(observations, emission_cost, costs)?;
    let sol = solve_warm(&model, sbp, warm)?;
    let flows = layout.transition_edges.iter().map(|&e| sol.edge_flows[e].clone()).collect();
    let marginals = (0..layout.num_steps)
        .map(|t| sol.node_marginals[layout.hidden(t)].clone())
        .collect();
    let free_energy = sol.free_energy(&model, sbp.eps);
    Ok((flows, marginals, sol.sweeps_used, sol.final_residual, free_energy, sol.log_scalings))
}
