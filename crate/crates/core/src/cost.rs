//! Inverse optimal transport: learning a cost matrix from a transport plan and
//! its two marginals.
//!
//! Two model classes are supported. [`learn_cost_symmetric`] fits a free
//! symmetric matrix with zero diagonal by proximal iterative scaling;
//! [`learn_cost_basis`] fits a sparse combination `C = Σ_q β_q D^q` of
//! distance-power matrices by proximal gradient (ISTA) on the dual objective.

use serde::{Deserialize, Serialize};

use crate::dense::{l1_distance, DenseMatrix, Epsilon};
use crate::error::{Error, Result};
use crate::sinkhorn::{scalings_from_plan, sinkhorn, sinkhorn_pass, Scalings};
use crate::tree::StateSpace;

/// Entries of a learned cost are capped at `CLAMP_FACTOR · ε`.
pub const CLAMP_FACTOR: f64 = 50.0;

/// Tolerance on the agreement between a flow's sums and the given marginals.
pub const MARGINAL_TOLERANCE: f64 = 1e-6;

/// Frobenius projection onto symmetric matrices with zero diagonal.
pub fn sym_prox(c_hat: &DenseMatrix) -> Result<DenseMatrix> {
    if !c_hat.is_square() {
        return Err(Error::shape("square matrix", format!("{:?}", c_hat.shape())));
    }
    let n = c_hat.rows();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (c_hat.get(i, j) + c_hat.get(j, i))
        }
    }))
}

/// `sign(x) · max(|x| − t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Gibbs kernel of `C` shifted by its minimum so that no entry exceeds one.
/// Returns the kernel and the shift `m`, with `exp(−C/ε) = exp(−m/ε) · K`.
fn shifted_kernel(cost: &DenseMatrix, eps: f64) -> (DenseMatrix, f64) {
    let m = cost.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let m = if m.is_finite() { m } else { 0.0 };
    (cost.map(|c| (-(c - m) / eps).exp()), m)
}

fn check_problem(flow: &DenseMatrix, mu: &[f64], nu: &[f64]) -> Result<()> {
    let (rows, cols) = flow.shape();
    if mu.len() != rows || nu.len() != cols {
        return Err(Error::shape(
            format!("marginals of length {rows} and {cols}"),
            format!("{} and {}", mu.len(), nu.len()),
        ));
    }
    if flow.as_slice().iter().chain(mu).chain(nu).any(|&x| x < 0.0) {
        return Err(Error::Domain("flow and marginals must be nonnegative".into()));
    }
    let total = flow.sum();
    if (total - 1.0).abs() > MARGINAL_TOLERANCE {
        return Err(Error::InvalidInput(format!("flow must have unit mass, got {total}")));
    }
    let row_gap = l1_distance(&flow.row_sums(), mu);
    let col_gap = l1_distance(&flow.col_sums(), nu);
    if row_gap.max(col_gap) > MARGINAL_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "flow sums disagree with the marginals (row gap {row_gap:e}, column gap {col_gap:e})"
        )));
    }
    Ok(())
}

/// Entropic plan of `cost` between `mu` and `nu`, solved to `tol`.
pub fn entropic_plan(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    eps: Epsilon,
    tol: f64,
) -> Result<DenseMatrix> {
    let (kernel, _) = shifted_kernel(cost, eps.value());
    let (s, _) = sinkhorn(&kernel, mu, nu, tol, INNER_MAX_ITERS, None)?;
    Ok(s.plan(&kernel))
}

const INNER_MAX_ITERS: usize = 200_000;

// ---------------------------------------------------------------------------
// Symmetric zero-diagonal costs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymCostConfig {
    pub eps: Epsilon,
    /// Target ℓ1 distance between the reconstructed plan and the flow.
    pub tol: f64,
    pub max_iters: usize,
    /// Marginal tolerance of the inner Sinkhorn solve.
    pub inner_tol: f64,
}

impl Default for SymCostConfig {
    fn default() -> Self {
        SymCostConfig {
            eps: Epsilon::new(0.1).unwrap(),
            tol: 1e-8,
            max_iters: 5000,
            inner_tol: 1e-12,
        }
    }
}

impl SymCostConfig {
    pub fn new(eps: Epsilon) -> Self {
        SymCostConfig {
            eps,
            ..SymCostConfig::default()
        }
    }

    pub fn c_max(&self) -> f64 {
        CLAMP_FACTOR * self.eps.value()
    }
}

#[derive(Clone, Debug)]
pub struct SymCostFit {
    pub cost: DenseMatrix,
    /// ℓ1 distance between the entropic plan of `cost` and the input flow.
    pub plan_residual: f64,
    pub iterations: usize,
    /// Off-diagonal entries sitting at the clamp value in the final cost.
    pub clamped: usize,
    pub residual_trace: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub alpha_t1: Vec<f64>,
}

/// Learns a symmetric zero-diagonal cost whose entropic plan reproduces `flow`.
/// Starts from the zero cost.
pub fn learn_cost_symmetric(
    flow: &DenseMatrix,
    mu_t: &[f64],
    mu_t1: &[f64],
    config: &SymCostConfig,
) -> Result<SymCostFit> {
    learn_cost_symmetric_from(flow, mu_t, mu_t1, config, None)
}

/// [`learn_cost_symmetric`] from a given initial cost (projected first).
pub fn learn_cost_symmetric_from(
    flow: &DenseMatrix,
    mu_t: &[f64],
    mu_t1: &[f64],
    config: &SymCostConfig,
    init: Option<&DenseMatrix>,
) -> Result<SymCostFit> {
    check_problem(flow, mu_t, mu_t1)?;
    if !flow.is_square() {
        return Err(Error::shape("square flow", format!("{:?}", flow.shape())));
    }
    let s = flow.rows();
    let eps = config.eps.value();
    let c_max = config.c_max();
    let mut cost = match init {
        Some(c) if c.shape() == (s, s) => clamp(&sym_prox(c)?, c_max),
        Some(c) => return Err(Error::shape(format!("{s}x{s} initial cost"), format!("{:?}", c.shape()))),
        None => DenseMatrix::zeros(s, s),
    };
    let mut scalings = None;
    let mut trace = Vec::new();
    for iter in 1..=config.max_iters {
        let (kernel, shift) = shifted_kernel(&cost, eps);
        let warm = scalings.take().unwrap_or_else(|| scalings_from_plan(&kernel, flow));
        let (sc, _) = sinkhorn(&kernel, mu_t, mu_t1, config.inner_tol, INNER_MAX_ITERS, Some(warm))?;
        let plan = sc.plan(&kernel);
        let residual = plan.l1_diff(flow);
        trace.push(residual);
        if residual <= config.tol {
            let (mut alpha_t, alpha_t1) = sc.duals(eps);
            alpha_t.iter_mut().for_each(|a| *a += shift);
            return Ok(SymCostFit {
                clamped: count_clamped(&cost, c_max),
                cost,
                plan_residual: residual,
                iterations: iter,
                residual_trace: trace,
                alpha_t,
                alpha_t1,
            });
        }
        // −ε log(M / (u vᵀ)) in the unshifted gauge equals C + ε log(plan / M).
        let target = DenseMatrix::from_fn(s, s, |i, j| {
            let m = flow.get(i, j);
            let p = plan.get(i, j);
            let c = cost.get(i, j) + eps * (p / m).ln();
            if c.is_nan() || c > c_max {
                c_max
            } else {
                c
            }
        });
        cost = clamp(&sym_prox(&target)?, c_max);
        scalings = Some(sc);
    }
    Err(Error::NotConverged {
        solver: "symmetric cost learning",
        iterations: config.max_iters,
        residual: trace.last().copied().unwrap_or(f64::INFINITY),
    })
}

fn clamp(cost: &DenseMatrix, c_max: f64) -> DenseMatrix {
    cost.map(|c| c.min(c_max))
}

fn count_clamped(cost: &DenseMatrix, c_max: f64) -> usize {
    cost.as_slice().iter().filter(|&&c| c >= c_max).count()
}

/// A flow with its row and column marginals.
#[derive(Clone, Debug)]
pub struct FlowTarget {
    pub flow: DenseMatrix,
    pub mu_t: Vec<f64>,
    pub mu_t1: Vec<f64>,
}

impl FlowTarget {
    pub fn from_flow(flow: DenseMatrix) -> Self {
        FlowTarget {
            mu_t: flow.row_sums(),
            mu_t1: flow.col_sums(),
            flow,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SharedCostFit {
    pub cost: DenseMatrix,
    /// ℓ1 plan reconstruction error per target.
    pub plan_residuals: Vec<f64>,
    pub iterations: usize,
}

/// Fits one symmetric zero-diagonal cost to several flows at once, matching
/// the pooled moments `Σ_t plan_t = Σ_t M_t` on the constraint set.
/// Stops when the cost moves by at most `config.tol` in the ∞-norm.
pub fn learn_cost_symmetric_shared(targets: &[FlowTarget], config: &SymCostConfig) -> Result<SharedCostFit> {
    let first = targets
        .first()
        .ok_or_else(|| Error::InvalidInput("no flows to fit".into()))?;
    let s = first.flow.rows();
    for t in targets {
        check_problem(&t.flow, &t.mu_t, &t.mu_t1)?;
        if t.flow.shape() != (s, s) {
            return Err(Error::shape(format!("{s}x{s} flow"), format!("{:?}", t.flow.shape())));
        }
    }
    let eps = config.eps.value();
    let c_max = config.c_max();
    let pooled = targets
        .iter()
        .fold(DenseMatrix::zeros(s, s), |acc, t| DenseMatrix::from_fn(s, s, |i, j| acc.get(i, j) + t.flow.get(i, j)));
    let mut cost = DenseMatrix::zeros(s, s);
    let mut scalings: Vec<Option<Scalings>> = vec![None; targets.len()];
    for iter in 1..=config.max_iters {
        let (kernel, _) = shifted_kernel(&cost, eps);
        let mut plan_sum = DenseMatrix::zeros(s, s);
        let mut residuals = Vec::with_capacity(targets.len());
        for (t, slot) in targets.iter().zip(scalings.iter_mut()) {
            let (sc, _) = sinkhorn(&kernel, &t.mu_t, &t.mu_t1, config.inner_tol, INNER_MAX_ITERS, slot.take())?;
            let plan = sc.plan(&kernel);
            residuals.push(plan.l1_diff(&t.flow));
            plan_sum = DenseMatrix::from_fn(s, s, |i, j| plan_sum.get(i, j) + plan.get(i, j));
            *slot = Some(sc);
        }
        let target = DenseMatrix::from_fn(s, s, |i, j| {
            let c = cost.get(i, j) + eps * (plan_sum.get(i, j) / pooled.get(i, j)).ln();
            if c.is_nan() || c > c_max {
                c_max
            } else {
                c
            }
        });
        let next = clamp(&sym_prox(&target)?, c_max);
        let change = next.max_abs_diff(&cost);
        cost = next;
        if change <= config.tol {
            return Ok(SharedCostFit {
                cost,
                plan_residuals: residuals,
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged {
        solver: "shared symmetric cost learning",
        iterations: config.max_iters,
        residual: f64::NAN,
    })
}

// ---------------------------------------------------------------------------
// Dual objective

fn check_dual_shapes(cost: &DenseMatrix, alpha_t: &[f64], alpha_t1: &[f64], flow: &DenseMatrix) -> Result<()> {
    let (r, c) = cost.shape();
    if alpha_t.len() != r || alpha_t1.len() != c || flow.shape() != (r, c) {
        return Err(Error::shape(
            format!("{r}x{c} cost/flow with duals of length {r} and {c}"),
            format!(
                "flow {:?}, duals of length {} and {}",
                flow.shape(),
                alpha_t.len(),
                alpha_t1.len()
            ),
        ));
    }
    Ok(())
}

/// `Σ_i w_i x_i`, skipping zero weights so that `x_i = −∞` is harmless.
fn weighted(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).filter(|(w, _)| **w != 0.0).map(|(w, x)| w * x).sum()
}

/// `exp((α_t(i) + α_{t+1}(j) − C_ij)/ε)` entrywise.
fn dual_plan(cost: &DenseMatrix, alpha_t: &[f64], alpha_t1: &[f64], eps: f64) -> DenseMatrix {
    DenseMatrix::from_fn(cost.rows(), cost.cols(), |i, j| {
        let z = (alpha_t[i] + alpha_t1[j] - cost.get(i, j)) / eps;
        if z == f64::NEG_INFINITY {
            0.0
        } else {
            z.exp()
        }
    })
}

/// `⟨M, C⟩ − ⟨α_t, μ_t⟩ − ⟨α_{t+1}, μ_{t+1}⟩ + ε Σ_ij exp((α_t(i) + α_{t+1}(j) − C_ij)/ε)`.
///
/// The exponential sum is evaluated as `ε · exp(logsumexp(z))`, so it is
/// finite whenever the result is representable.
pub fn imot_objective(
    cost: &DenseMatrix,
    alpha_t: &[f64],
    alpha_t1: &[f64],
    flow: &DenseMatrix,
    mu_t: &[f64],
    mu_t1: &[f64],
    eps: Epsilon,
) -> Result<f64> {
    check_dual_shapes(cost, alpha_t, alpha_t1, flow)?;
    let e = eps.value();
    let z: Vec<f64> = (0..cost.rows())
        .flat_map(|i| (0..cost.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (alpha_t[i] + alpha_t1[j] - cost.get(i, j)) / e)
        .collect();
    let exp_term = e * crate::dense::logsumexp(&z).exp();
    Ok(flow.dot(cost) - weighted(mu_t, alpha_t) - weighted(mu_t1, alpha_t1) + exp_term)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImotGradient {
    pub alpha_t: Vec<f64>,
    pub alpha_t1: Vec<f64>,
    pub cost: DenseMatrix,
}

/// Partial derivatives of [`imot_objective`] in both duals and in the cost.
pub fn imot_gradient(
    cost: &DenseMatrix,
    alpha_t: &[f64],
    alpha_t1: &[f64],
    flow: &DenseMatrix,
    mu_t: &[f64],
    mu_t1: &[f64],
    eps: Epsilon,
) -> Result<ImotGradient> {
    check_dual_shapes(cost, alpha_t, alpha_t1, flow)?;
    let plan = dual_plan(cost, alpha_t, alpha_t1, eps.value());
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    Ok(ImotGradient {
        alpha_t: rows.iter().zip(mu_t).map(|(p, m)| p - m).collect(),
        alpha_t1: cols.iter().zip(mu_t1).map(|(p, m)| p - m).collect(),
        cost: DenseMatrix::from_fn(cost.rows(), cost.cols(), |i, j| flow.get(i, j) - plan.get(i, j)),
    })
}

/// Chain rule through `C = Σ_q β_q D^q`: `∂F/∂β_k = Σ_ij D^k_ij ∂F/∂C_ij`.
pub fn beta_gradient(bases: &[DenseMatrix], cost_gradient: &DenseMatrix) -> Vec<f64> {
    bases.iter().map(|d| d.dot(cost_gradient)).collect()
}

// ---------------------------------------------------------------------------
// Sparse basis combinations

/// A refitted coefficient whose term is below this fraction of the cost's
/// magnitude is dropped from the support.
pub const PRUNE_TOLERANCE: f64 = 1e-6;

/// Default distance exponents of the basis matrices.
pub const DEFAULT_EXPONENTS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

#[derive(Clone, Debug, PartialEq)]
pub struct BasisCostModel {
    pub exponents: Vec<f64>,
    /// `D^q_ij = |x_i − x_j|^q`, one per exponent.
    pub bases: Vec<DenseMatrix>,
    /// Coefficients; also the starting point of [`learn_cost_basis`].
    pub beta: Vec<f64>,
    /// ℓ1 weight.
    pub gamma: f64,
    /// Fixed step size. `None` selects per-coordinate steps
    /// `ε / (Q · max_ij (D^q_ij)²)` with backtracking.
    pub rho: Option<f64>,
}

impl BasisCostModel {
    pub fn new(space: &StateSpace, exponents: &[f64], gamma: f64) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::InvalidInput("at least one basis exponent is required".into()));
        }
        if exponents.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(Error::InvalidInput(format!("basis exponents must be positive, got {exponents:?}")));
        }
        if !(gamma >= 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be nonnegative, got {gamma}")));
        }
        Ok(BasisCostModel {
            exponents: exponents.to_vec(),
            bases: exponents.iter().map(|&q| space.distance_power_matrix(q)).collect(),
            beta: vec![0.0; exponents.len()],
            gamma,
            rho: None,
        })
    }

    /// Caps every basis entry at `cap`, keeping the costs of far-apart
    /// states bounded so their Gibbs kernels stay representable.
    pub fn capped(mut self, cap: f64) -> Self {
        self.bases = self.bases.iter().map(|d| d.map(|x| x.min(cap))).collect();
        self
    }

    pub fn with_default_bases(space: &StateSpace, gamma: f64) -> Result<Self> {
        Self::new(space, &DEFAULT_EXPONENTS, gamma)
    }

    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    pub fn cost_of(&self, beta: &[f64]) -> DenseMatrix {
        let first = &self.bases[0];
        DenseMatrix::from_fn(first.rows(), first.cols(), |i, j| {
            self.bases.iter().zip(beta).map(|(d, b)| b * d.get(i, j)).sum()
        })
    }

    pub fn cost(&self) -> DenseMatrix {
        self.cost_of(&self.beta)
    }

    fn base_steps(&self, eps: f64) -> Vec<f64> {
        let q = self.bases.len() as f64;
        match self.rho {
            Some(r) => vec![r; self.bases.len()],
            None => self
                .bases
                .iter()
                .map(|d| {
                    let m = d.max_abs();
                    if m > 0.0 {
                        eps / (q * m * m)
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub eps: Epsilon,
    pub max_iters: usize,
    /// Exit when an accepted step moves β by at most this in the ∞-norm.
    pub beta_tol: f64,
    /// Marginal tolerance of the inner Sinkhorn solve.
    pub inner_tol: f64,
    /// One Sinkhorn pass per step with a fixed step size, no line search.
    pub single_pass: bool,
    /// Refit the selected support with `γ = 0` after the sparse fit.
    pub debias: bool,
    pub step: BasisStep,
}

/// Metric of the proximal step on β.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisStep {
    /// Exact Hessian of the profile objective (proximal Newton) with an
    /// Armijo line search. Distance-power bases are nearly collinear, which
    /// makes the diagonal metric crawl.
    #[default]
    Newton,
    /// Diagonal metric with backtracking (plain ISTA).
    Diagonal,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            eps: Epsilon::new(0.1).unwrap(),
            max_iters: 100_000,
            beta_tol: 1e-8,
            inner_tol: 1e-10,
            single_pass: false,
            debias: true,
            step: BasisStep::Newton,
        }
    }
}

impl BasisConfig {
    pub fn new(eps: Epsilon) -> Self {
        BasisConfig {
            eps,
            ..BasisConfig::default()
        }
    }
}

/// Duals, current cost and objective history of a basis fit.
#[derive(Clone, Debug)]
pub struct ImotState {
    pub alpha_t: Vec<f64>,
    pub alpha_t1: Vec<f64>,
    pub cost: DenseMatrix,
    /// `F + γ|β|₁` after each accepted step of the sparse phase.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BasisFit {
    pub beta: Vec<f64>,
    pub cost: DenseMatrix,
    pub plan_residual: f64,
    /// β and plan residual of the sparse phase, before any refit.
    pub sparse_beta: Vec<f64>,
    pub sparse_plan_residual: f64,
    pub iterations: usize,
    pub state: ImotState,
}

struct Evaluation {
    objective: f64,
    gradient: Vec<f64>,
    plan: DenseMatrix,
    scalings: Scalings,
    shift: f64,
}

struct Ista<'a> {
    flow: &'a DenseMatrix,
    mu: &'a [f64],
    nu: &'a [f64],
    model: &'a BasisCostModel,
    eps: f64,
    config: &'a BasisConfig,
}

impl Ista<'_> {
    /// Profile objective `min_α F(α, C(β))` and its gradient in β.
    fn evaluate(&self, beta: &[f64], warm: Option<Scalings>) -> Result<Evaluation> {
        let cost = self.model.cost_of(beta);
        let (kernel, shift) = shifted_kernel(&cost, self.eps);
        let warm = warm.unwrap_or_else(|| scalings_from_plan(&kernel, self.flow));
        let scalings = if self.config.single_pass {
            let mut s = warm;
            sinkhorn_pass(&kernel, self.mu, self.nu, &mut s);
            s
        } else {
            sinkhorn(&kernel, self.mu, self.nu, self.config.inner_tol, INNER_MAX_ITERS, Some(warm))?.0
        };
        let plan = scalings.plan(&kernel);
        let (mut alpha_t, alpha_t1) = scalings.duals(self.eps);
        alpha_t.iter_mut().for_each(|a| *a += shift);
        let objective = self.flow.dot(&cost) - weighted(self.mu, &alpha_t) - weighted(self.nu, &alpha_t1)
            + self.eps * plan.sum();
        let residual = DenseMatrix::from_fn(cost.rows(), cost.cols(), |i, j| self.flow.get(i, j) - plan.get(i, j));
        Ok(Evaluation {
            objective,
            gradient: beta_gradient(&self.model.bases, &residual),
            plan,
            scalings,
            shift,
        })
    }

    /// Proximal gradient on the coordinates in `active`; others stay fixed.
    fn run(
        &self,
        mut beta: Vec<f64>,
        gamma: f64,
        active: &[bool],
        warm: Option<Scalings>,
        trace: &mut Vec<f64>,
    ) -> Result<(Vec<f64>, Evaluation, usize)> {
        if self.config.step == BasisStep::Newton && !self.config.single_pass {
            return self.run_newton(beta, gamma, active, warm, trace);
        }
        let base = self.model.base_steps(self.eps);
        let l1 = |b: &[f64]| gamma * b.iter().map(|x| x.abs()).sum::<f64>();
        let mut current = self.evaluate(&beta, warm)?;
        trace.push(current.objective + l1(&beta));
        let mut tau: f64 = 1.0;
        for iter in 1..=self.config.max_iters {
            let step = |tau: f64| -> Vec<f64> {
                beta.iter()
                    .zip(&current.gradient)
                    .zip(&base)
                    .zip(active)
                    .map(|(((b, g), r), &on)| if on { soft_threshold(b - tau * r * g, tau * r * gamma) } else { *b })
                    .collect()
            };
            if self.config.single_pass {
                let next = step(1.0);
                let moved = max_move(&next, &beta);
                let eval = self.evaluate(&next, Some(current.scalings.clone()))?;
                beta = next;
                current = eval;
                trace.push(current.objective + l1(&beta));
                if moved <= self.config.beta_tol {
                    return Ok((beta, current, iter));
                }
                continue;
            }
            loop {
                let next = step(tau);
                let d: Vec<f64> = next.iter().zip(&beta).map(|(a, b)| a - b).collect();
                let moved = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if moved == 0.0 {
                    return Ok((beta, current, iter));
                }
                let eval = self.evaluate(&next, Some(current.scalings.clone()))?;
                let model_value = current.objective
                    + d.iter().zip(&current.gradient).map(|(a, g)| a * g).sum::<f64>()
                    + d.iter().zip(&base).map(|(a, r)| a * a / (2.0 * tau * r)).sum::<f64>();
                let slack = 1e-13 * (1.0 + current.objective.abs());
                if eval.objective <= model_value + slack {
                    beta = next;
                    current = eval;
                    trace.push(current.objective + l1(&beta));
                    if moved <= self.config.beta_tol {
                        return Ok((beta, current, iter));
                    }
                    tau = (tau * 2.0).min(1e12);
                    break;
                }
                tau *= 0.5;
                if tau < 1e-20 {
                    return Err(Error::NotConverged {
                        solver: "basis cost learning (line search)",
                        iterations: iter,
                        residual: current.plan.l1_diff(self.flow),
                    });
                }
            }
        }
        Err(Error::NotConverged {
            solver: "basis cost learning",
            iterations: self.config.max_iters,
            residual: current.plan.l1_diff(self.flow),
        })
    }

    /// Hessian of the profile objective in β, restricted to `active`.
    ///
    /// Perturbing the cost by `dC` moves the duals so that the plan keeps its
    /// marginals; the plan changes by `P ⊙ (dα_i + dα'_j − dC_ij)/ε`.
    fn hessian(&self, plan: &DenseMatrix, active: &[bool]) -> nalgebra::DMatrix<f64> {
        use nalgebra::{DMatrix, DVector};
        let (rows, cols) = plan.shape();
        let r = plan.row_sums();
        let c = plan.col_sums();
        // Unknowns: dα (rows) then dα' (cols − 1); the last dα' is pinned to zero.
        let n = rows + cols - 1;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..rows {
            if r[i] > 0.0 {
                a[(i, i)] = r[i];
                for j in 0..cols - 1 {
                    a[(i, rows + j)] = plan.get(i, j);
                }
            } else {
                a[(i, i)] = 1.0;
            }
        }
        for j in 0..cols - 1 {
            if c[j] > 0.0 {
                a[(rows + j, rows + j)] = c[j];
                for i in 0..rows {
                    if r[i] > 0.0 {
                        a[(rows + j, i)] = plan.get(i, j);
                    }
                }
            } else {
                a[(rows + j, rows + j)] = 1.0;
            }
        }
        let lu = a.lu();
        let q = self.model.num_bases();
        let mut responses = Vec::with_capacity(q);
        for (d, &on) in self.model.bases.iter().zip(active) {
            if !on {
                responses.push(None);
                continue;
            }
            let mut rhs = DVector::<f64>::zeros(n);
            for i in 0..rows {
                if r[i] > 0.0 {
                    rhs[i] = (0..cols).map(|j| plan.get(i, j) * d.get(i, j)).sum();
                }
            }
            for j in 0..cols - 1 {
                if c[j] > 0.0 {
                    rhs[rows + j] = (0..rows).map(|i| plan.get(i, j) * d.get(i, j)).sum();
                }
            }
            let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(n));
            let da: Vec<f64> = (0..rows).map(|i| sol[i]).collect();
            let db: Vec<f64> = (0..cols).map(|j| if j + 1 < cols { sol[rows + j] } else { 0.0 }).collect();
            responses.push(Some((da, db)));
        }
        let mut h = DMatrix::<f64>::zeros(q, q);
        for k in 0..q {
            for l in 0..q {
                let (Some(_), Some((da, db))) = (&responses[k], &responses[l]) else {
                    continue;
                };
                let (dk, dl) = (&self.model.bases[k], &self.model.bases[l]);
                let mut acc = 0.0;
                for (i, &a) in da.iter().enumerate().take(rows) {
                    for (j, &b) in db.iter().enumerate().take(cols) {
                        acc += dk.get(i, j) * plan.get(i, j) * (dl.get(i, j) - a - b);
                    }
                }
                h[(k, l)] = acc / self.eps;
            }
        }
        // Symmetrize away rounding.
        (&h + h.transpose()) * 0.5
    }

    /// Proximal Newton: minimize the local quadratic model plus `γ|β|₁` by
    /// coordinate descent, then backtrack along the resulting direction.
    fn run_newton(
        &self,
        mut beta: Vec<f64>,
        gamma: f64,
        active: &[bool],
        warm: Option<Scalings>,
        trace: &mut Vec<f64>,
    ) -> Result<(Vec<f64>, Evaluation, usize)> {
        let q = beta.len();
        let l1 = |b: &[f64]| gamma * b.iter().map(|x| x.abs()).sum::<f64>();
        let mut current = self.evaluate(&beta, warm)?;
        let mut value = current.objective + l1(&beta);
        trace.push(value);
        for iter in 1..=self.config.max_iters {
            let h = self.hessian(&current.plan, active);
            let ridge = 1e-12 * (0..q).map(|k| h[(k, k)].abs()).sum::<f64>().max(1e-300);
            let g = &current.gradient;
            let mut z = beta.clone();
            for _ in 0..1000 {
                let mut change: f64 = 0.0;
                for k in (0..q).filter(|&k| active[k]) {
                    let hkk = h[(k, k)] + ridge;
                    let off: f64 = (0..q).filter(|&l| l != k).map(|l| h[(k, l)] * (z[l] - beta[l])).sum();
                    let zk = soft_threshold(hkk * beta[k] - g[k] - off, gamma) / hkk;
                    change = change.max((zk - z[k]).abs());
                    z[k] = zk;
                }
                if change <= 1e-15 * (1.0 + z.iter().fold(0.0f64, |m, x| m.max(x.abs()))) {
                    break;
                }
            }
            let d: Vec<f64> = z.iter().zip(&beta).map(|(a, b)| a - b).collect();
            let decrease = d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() + l1(&z) - l1(&beta);
            // The second test stops once the predicted decrease is below what
            // the inner solve can resolve; β may still drift along flat directions.
            if max_move(&z, &beta) <= self.config.beta_tol || -decrease <= 1e-16 * (1.0 + value.abs()) {
                return Ok((beta, current, iter));
            }
            let mut t = 1.0;
            loop {
                let next: Vec<f64> = beta.iter().zip(&d).map(|(b, di)| b + t * di).collect();
                let eval = self.evaluate(&next, Some(current.scalings.clone()))?;
                let next_value = eval.objective + l1(&next);
                let slack = 1e-13 * (1.0 + value.abs());
                if next_value <= value + 1e-4 * t * decrease + slack {
                    let moved = max_move(&next, &beta);
                    beta = next;
                    current = eval;
                    value = next_value;
                    trace.push(value);
                    if moved <= self.config.beta_tol {
                        return Ok((beta, current, iter));
                    }
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    // No representable decrease left along a descent direction.
                    if decrease > -1e-12 * (1.0 + value.abs()) {
                        return Ok((beta, current, iter));
                    }
                    return Err(Error::NotConverged {
                        solver: "basis cost learning (line search)",
                        iterations: iter,
                        residual: current.plan.l1_diff(self.flow),
                    });
                }
            }
        }
        Err(Error::NotConverged {
            solver: "basis cost learning",
            iterations: self.config.max_iters,
            residual: current.plan.l1_diff(self.flow),
        })
    }
}

fn max_move(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Learns `β` for `C = Σ_q β_q D^q` by ISTA on the dual objective plus
/// `γ |β|₁`, starting from `model.beta`.
pub fn learn_cost_basis(
    flow: &DenseMatrix,
    mu_t: &[f64],
    mu_t1: &[f64],
    model: &BasisCostModel,
    config: &BasisConfig,
) -> Result<BasisFit> {
    check_problem(flow, mu_t, mu_t1)?;
    let q = model.num_bases();
    if model.beta.len() != q {
        return Err(Error::shape(format!("{q} coefficients"), format!("{}", model.beta.len())));
    }
    if model.bases.iter().any(|d| d.shape() != flow.shape()) {
        return Err(Error::shape(format!("{:?} bases", flow.shape()), "mismatched basis matrix"));
    }
    let ista = Ista {
        flow,
        mu: mu_t,
        nu: mu_t1,
        model,
        eps: config.eps.value(),
        config,
    };
    let mut trace = Vec::new();
    let (sparse_beta, sparse_eval, mut iterations) =
        ista.run(model.beta.clone(), model.gamma, &vec![true; q], None, &mut trace)?;
    let sparse_plan_residual = sparse_eval.plan.l1_diff(flow);

    let mut support: Vec<bool> = sparse_beta.iter().map(|b| *b != 0.0).collect();
    let (beta, eval) = if config.debias && model.gamma > 0.0 && support.iter().any(|&s| s) {
        // Refit without shrinkage, then drop coordinates the refit leaves
        // negligible and refit again until the support settles.
        let mut beta = sparse_beta.clone();
        let mut warm = Some(sparse_eval.scalings.clone());
        loop {
            let mut refit_trace = Vec::new();
            let (b, e, n) = ista.run(beta, 0.0, &support, warm.take(), &mut refit_trace)?;
            iterations += n;
            let scale = model.cost_of(&b).max_abs();
            let mut pruned = b.clone();
            let mut changed = false;
            for (k, d) in model.bases.iter().enumerate() {
                if support[k] && (b[k] * d.max_abs()).abs() <= PRUNE_TOLERANCE * scale {
                    support[k] = false;
                    pruned[k] = 0.0;
                    changed = true;
                }
            }
            if !changed {
                break (b, e);
            }
            if !support.iter().any(|&s| s) {
                let e = ista.evaluate(&pruned, Some(e.scalings))?;
                break (pruned, e);
            }
            warm = Some(e.scalings);
            beta = pruned;
        }
    } else {
        (sparse_beta.clone(), sparse_eval)
    };

    let cost = model.cost_of(&beta);
    let (mut alpha_t, alpha_t1) = eval.scalings.duals(config.eps.value());
    alpha_t.iter_mut().for_each(|a| *a += eval.shift);
    Ok(BasisFit {
        plan_residual: eval.plan.l1_diff(flow),
        beta,
        sparse_beta,
        sparse_plan_residual,
        iterations,
        state: ImotState {
            alpha_t,
            alpha_t1,
            cost: cost.clone(),
            objective_trace: trace,
        },
        cost,
    })
}
