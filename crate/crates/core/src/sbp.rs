//! Sinkhorn belief propagation for entropy-regularized multi-marginal optimal
//! transport on a tree.
//!
//! The plan tensor factorizes as `M = K ⊙ B` with one Gibbs kernel per edge
//! and one scaling vector per constrained node. Projections onto single
//! nodes and edges are computed by message passing, so a sweep costs
//! `O(|E| S²)` instead of materializing `S^|V|` entries.
//!
//! Schedule: the constrained nodes are visited in depth-first pre-order from
//! the smallest constrained node id (neighbors in increasing id order). After
//! a scaling update at `v`, only the messages on the path from `v` to the next
//! constrained node are refreshed, which keeps every message that points
//! toward the active node current. One sweep walks the closed tour, touching
//! every edge twice.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::dense::{
    l1_distance, logsumexp, logsumexp_matvec_into, logsumexp_matvec_t_into, xlogx, DenseMatrix,
    DenseVector, Epsilon,
};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tree::TreeModel;

/// Smallest message entry tolerated by the linear-domain solver.
pub const UNDERFLOW_LIMIT: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbpDomain {
    /// Kernels and messages as plain values, renormalized after every update.
    #[default]
    Linear,
    /// Log-kernels and log-messages; slower, immune to underflow.
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbpConfig {
    pub eps: Epsilon,
    /// Threshold on the largest constrained-marginal ℓ1 residual.
    pub tol: f64,
    pub max_sweeps: usize,
    pub domain: SbpDomain,
}

impl Default for SbpConfig {
    fn default() -> Self {
        SbpConfig {
            eps: Epsilon::new(0.1).unwrap(),
            tol: 1e-8,
            max_sweeps: 10_000,
            domain: SbpDomain::Linear,
        }
    }
}

impl SbpConfig {
    pub fn new(eps: Epsilon) -> Self {
        SbpConfig {
            eps,
            ..SbpConfig::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("SBP tolerance must be positive, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidInput("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Messages per directed edge: slot `2e` carries `a → b`, slot `2e + 1`
/// carries `b → a` for edge `e = (a, b)`. Each message sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageStore {
    messages: Vec<Vec<f64>>,
}

impl MessageStore {
    pub fn slot(edge: usize, forward: bool) -> usize {
        2 * edge + usize::from(!forward)
    }

    /// Message along `edge`; `forward` selects `a → b`.
    pub fn get(&self, edge: usize, forward: bool) -> &[f64] {
        &self.messages[Self::slot(edge, forward)]
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SbpSolution {
    /// Unit-mass marginal of every node.
    pub node_marginals: Vec<DenseVector>,
    /// Unit-mass pairwise flow of every edge, `states(a) x states(b)`.
    pub edge_flows: Vec<DenseMatrix>,
    /// `ln b_j` for each constrained node, in the gauge of the normalized
    /// messages. Entries are `−∞` where the constrained marginal vanishes.
    pub log_scalings: BTreeMap<usize, Vec<f64>>,
    pub messages: MessageStore,
    pub sweeps_used: usize,
    pub final_residual: f64,
    /// Largest pre-update constrained residual observed in each sweep.
    pub residual_trace: Vec<f64>,
}

impl SbpSolution {
    pub fn scaling(&self, node: usize) -> Option<Vec<f64>> {
        self.log_scalings.get(&node).map(|l| l.iter().map(|v| v.exp()).collect())
    }

    /// Largest ℓ1 gap between a computed marginal and its constraint.
    pub fn constrained_residual(&self, model: &TreeModel) -> f64 {
        model
            .constrained()
            .iter()
            .map(|(&j, mu)| l1_distance(self.node_marginals[j].as_slice(), mu.as_slice()))
            .fold(0.0, f64::max)
    }

    /// Negative-entropy part of the tree plan, `Σ_e Σ M ln M − Σ_v (deg_v − 1) Σ μ ln μ`.
    pub fn plan_neg_entropy(&self, model: &TreeModel) -> f64 {
        let mut degree = vec![0usize; model.num_nodes()];
        for e in model.edges() {
            degree[e.a] += 1;
            degree[e.b] += 1;
        }
        let edges: f64 = self
            .edge_flows
            .iter()
            .map(|f| f.as_slice().iter().map(|&v| xlogx(v)).sum::<f64>())
            .sum();
        let nodes: f64 = self
            .node_marginals
            .iter()
            .zip(&degree)
            .map(|(m, &d)| (d as f64 - 1.0) * m.as_slice().iter().map(|&v| xlogx(v)).sum::<f64>())
            .sum();
        edges - nodes
    }

    /// `Σ_e ⟨C_e, M_e⟩ + ε · plan_neg_entropy`.
    pub fn free_energy(&self, model: &TreeModel, eps: Epsilon) -> f64 {
        let transport: f64 = model
            .edges()
            .iter()
            .zip(&self.edge_flows)
            .map(|(e, f)| e.cost.dot(f))
            .sum();
        transport + eps.value() * self.plan_neg_entropy(model)
    }
}

/// Solves the tree MOT problem from uniform messages and unit scalings.
pub fn solve(model: &TreeModel, config: &SbpConfig) -> Result<SbpSolution> {
    solve_warm(model, config, None)
}

/// Like [`solve`], seeding the constrained scalings from `warm` (as returned
/// in [`SbpSolution::log_scalings`]). Entries with a mismatched length are ignored.
pub fn solve_warm(
    model: &TreeModel,
    config: &SbpConfig,
    warm: Option<&BTreeMap<usize, Vec<f64>>>,
) -> Result<SbpSolution> {
    config.check()?;
    model.validate()?;
    match config.domain {
        SbpDomain::Linear => Solver::<Linear>::new(model, config.eps, warm).run(config),
        SbpDomain::Log => Solver::<LogDomain>::new(model, config.eps, warm).run(config),
    }
}

/// Solves independent models, possibly in parallel. Results keep input order.
pub fn solve_many(models: &[TreeModel], config: &SbpConfig, exec: Exec) -> Vec<Result<SbpSolution>> {
    exec.map_slice(models, |m| solve(m, config))
}

/// Arithmetic of one representation of the messages.
trait Domain {
    const ONE: f64;
    fn kernel(cost: &DenseMatrix, eps: Epsilon) -> Vec<f64>;
    fn mul_assign(acc: &mut [f64], x: &[f64]);
    /// `forward`: `out = Kᵀ h`; otherwise `out = K h`.
    fn propagate(kernel: &[f64], cols: usize, h: &[f64], forward: bool, out: &mut [f64]);
    /// Normalizes to unit mass; returns the smallest resulting linear entry.
    fn normalize(v: &mut [f64]) -> f64;
    fn from_linear(x: f64) -> f64;
    /// `b = μ / prod`, zero where `μ` vanishes.
    fn scaling(mu: f64, prod: f64) -> Option<f64>;
    /// Unit-mass linear probabilities.
    fn to_probabilities(v: &[f64]) -> Vec<f64>;
    fn to_log(x: f64) -> f64;
    fn pair(k: f64, ha: f64, hb: f64) -> f64;
    fn checks_underflow() -> bool;
}

struct Linear;

impl Domain for Linear {
    const ONE: f64 = 1.0;

    fn kernel(cost: &DenseMatrix, eps: Epsilon) -> Vec<f64> {
        let inv = 1.0 / eps.value();
        cost.as_slice().iter().map(|c| (-c * inv).exp()).collect()
    }

    fn mul_assign(acc: &mut [f64], x: &[f64]) {
        acc.iter_mut().zip(x).for_each(|(a, b)| *a *= b);
    }

    fn propagate(kernel: &[f64], cols: usize, h: &[f64], forward: bool, out: &mut [f64]) {
        if forward {
            out.iter_mut().for_each(|o| *o = 0.0);
            for (&hi, row) in h.iter().zip(kernel.chunks_exact(cols)) {
                if hi != 0.0 {
                    out.iter_mut().zip(row).for_each(|(o, k)| *o += hi * k);
                }
            }
        } else {
            for (o, row) in out.iter_mut().zip(kernel.chunks_exact(cols)) {
                *o = row.iter().zip(h).map(|(k, x)| k * x).sum();
            }
        }
    }

    fn normalize(v: &mut [f64]) -> f64 {
        let s: f64 = v.iter().sum();
        let inv = 1.0 / s;
        let mut min = f64::INFINITY;
        for x in v.iter_mut() {
            *x *= inv;
            min = min.min(*x);
        }
        if s.is_finite() && s > 0.0 {
            min
        } else {
            0.0
        }
    }

    fn from_linear(x: f64) -> f64 {
        x
    }

    fn scaling(mu: f64, prod: f64) -> Option<f64> {
        if mu == 0.0 {
            Some(0.0)
        } else if prod > 0.0 {
            let b = mu / prod;
            b.is_finite().then_some(b)
        } else {
            None
        }
    }

    fn to_probabilities(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    fn to_log(x: f64) -> f64 {
        x.ln()
    }

    fn pair(k: f64, ha: f64, hb: f64) -> f64 {
        k * ha * hb
    }

    fn checks_underflow() -> bool {
        true
    }
}

struct LogDomain;

impl Domain for LogDomain {
    const ONE: f64 = 0.0;

    fn kernel(cost: &DenseMatrix, eps: Epsilon) -> Vec<f64> {
        let inv = 1.0 / eps.value();
        cost.as_slice().iter().map(|c| -c * inv).collect()
    }

    fn mul_assign(acc: &mut [f64], x: &[f64]) {
        acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }

    fn propagate(kernel: &[f64], cols: usize, h: &[f64], forward: bool, out: &mut [f64]) {
        if forward {
            logsumexp_matvec_t_into(kernel, cols, h, out);
        } else {
            logsumexp_matvec_into(kernel, cols, h, out);
        }
    }

    fn normalize(v: &mut [f64]) -> f64 {
        let z = logsumexp(v);
        v.iter_mut().for_each(|x| *x -= z);
        1.0
    }

    fn from_linear(x: f64) -> f64 {
        x.ln()
    }

    fn scaling(mu: f64, prod: f64) -> Option<f64> {
        if mu == 0.0 {
            Some(f64::NEG_INFINITY)
        } else if prod.is_finite() {
            Some(mu.ln() - prod)
        } else {
            None
        }
    }

    fn to_probabilities(v: &[f64]) -> Vec<f64> {
        let z = logsumexp(v);
        v.iter().map(|x| (x - z).exp()).collect()
    }

    fn to_log(x: f64) -> f64 {
        x
    }

    fn pair(k: f64, ha: f64, hb: f64) -> f64 {
        k + ha + hb
    }

    fn checks_underflow() -> bool {
        false
    }
}

/// Directed hop `from → to` across `edge`.
#[derive(Clone, Copy, Debug)]
struct Hop {
    from: usize,
    to: usize,
    edge: usize,
}

/// One kernel per distinct edge cost. HMM trees repeat the emission cost on
/// every leaf, so sharing keeps the working set near half the edge count.
fn shared_kernels<D: Domain>(model: &TreeModel, eps: Epsilon) -> (Vec<Vec<f64>>, Vec<usize>) {
    let edges = model.edges();
    let mut kernels = Vec::new();
    let mut kernel_of = Vec::with_capacity(edges.len());
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    for (e, edge) in edges.iter().enumerate() {
        let mut h = DefaultHasher::new();
        edge.cost.shape().hash(&mut h);
        edge.cost.as_slice().iter().for_each(|x| x.to_bits().hash(&mut h));
        let reps = seen.entry(h.finish()).or_default();
        match reps.iter().find(|&&r| edges[r].cost == edge.cost) {
            Some(&r) => kernel_of.push(kernel_of[r]),
            None => {
                reps.push(e);
                kernel_of.push(kernels.len());
                kernels.push(D::kernel(&edge.cost, eps));
            }
        }
    }
    (kernels, kernel_of)
}

struct Solver<'m, D: Domain> {
    model: &'m TreeModel,
    adj: Vec<Vec<(usize, usize)>>,
    /// Distinct kernels; `kernel_of[e]` indexes the one for edge `e`.
    kernels: Vec<Vec<f64>>,
    kernel_of: Vec<usize>,
    messages: Vec<Vec<f64>>,
    scalings: Vec<Vec<f64>>,
    parent: Vec<Option<Hop>>,
    depth: Vec<usize>,
    root: usize,
    _domain: std::marker::PhantomData<D>,
}

impl<'m, D: Domain> Solver<'m, D> {
    fn new(model: &'m TreeModel, eps: Epsilon, warm: Option<&BTreeMap<usize, Vec<f64>>>) -> Self {
        let adj = model.adjacency();
        let (kernels, kernel_of) = shared_kernels::<D>(model, eps);
        let mut messages = Vec::with_capacity(2 * model.num_edges());
        for e in model.edges() {
            let (sa, sb) = (model.nodes()[e.a].states, model.nodes()[e.b].states);
            messages.push(vec![D::from_linear(1.0 / sb as f64); sb]);
            messages.push(vec![D::from_linear(1.0 / sa as f64); sa]);
        }
        let scalings = model
            .nodes()
            .iter()
            .enumerate()
            .map(|(v, n)| match warm.and_then(|w| w.get(&v)) {
                Some(w) if w.len() == n.states && model.is_constrained(v) => w
                    .iter()
                    .map(|&l| if D::ONE == 1.0 { l.exp() } else { l })
                    .collect(),
                _ => vec![D::ONE; n.states],
            })
            .collect();
        let root = model.constrained().keys().next().copied().unwrap_or(0);
        let n = model.num_nodes();
        let mut solver = Solver {
            model,
            adj,
            kernels,
            kernel_of,
            messages,
            scalings,
            parent: vec![None; n],
            depth: vec![0; n],
            root,
            _domain: std::marker::PhantomData,
        };
        solver.root_at(root);
        solver
    }

    fn root_at(&mut self, root: usize) {
        let mut stack = vec![root];
        let mut seen = vec![false; self.model.num_nodes()];
        seen[root] = true;
        while let Some(v) = stack.pop() {
            for &(u, e) in &self.adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    self.parent[u] = Some(Hop { from: u, to: v, edge: e });
                    self.depth[u] = self.depth[v] + 1;
                    stack.push(u);
                }
            }
        }
    }

    /// Constrained nodes in depth-first pre-order from the root.
    fn tour(&self) -> Vec<usize> {
        let mut order = Vec::new();
        let mut stack = vec![(self.root, usize::MAX)];
        while let Some((v, from)) = stack.pop() {
            if self.model.is_constrained(v) {
                order.push(v);
            }
            for &(u, _) in self.adj[v].iter().rev() {
                if u != from {
                    stack.push((u, v));
                }
            }
        }
        order
    }

    /// Directed hops from `from` to `to` along the unique tree path.
    fn path(&self, from: usize, to: usize) -> Vec<Hop> {
        let (mut a, mut b) = (from, to);
        let mut up = Vec::new();
        let mut down = Vec::new();
        while a != b {
            if self.depth[a] >= self.depth[b] {
                let hop = self.parent[a].expect("non-root node has a parent");
                up.push(hop);
                a = hop.to;
            } else {
                let hop = self.parent[b].expect("non-root node has a parent");
                down.push(Hop {
                    from: hop.to,
                    to: hop.from,
                    edge: hop.edge,
                });
                b = hop.to;
            }
        }
        down.reverse();
        up.extend(down);
        up
    }

    /// Post-order hops toward the root, then pre-order hops away from it.
    fn collect_order(&self) -> Vec<Hop> {
        let mut order = Vec::new();
        let mut stack = vec![(self.root, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                if let Some(hop) = self.parent[v] {
                    order.push(hop);
                }
                continue;
            }
            stack.push((v, true));
            for &(u, _) in self.adj[v].iter().rev() {
                if self.parent[u].map(|h| h.to) == Some(v) {
                    stack.push((u, false));
                }
            }
        }
        order
    }

    fn slot(&self, hop: Hop) -> (usize, bool) {
        let forward = self.model.edges()[hop.edge].a == hop.from;
        (2 * hop.edge + usize::from(!forward), forward)
    }

    /// `b_v` times every incoming message except the one from `exclude`.
    fn belief(&self, v: usize, exclude: Option<usize>, with_scaling: bool) -> Vec<f64> {
        let mut acc = if with_scaling {
            self.scalings[v].clone()
        } else {
            vec![D::ONE; self.model.nodes()[v].states]
        };
        for &(u, e) in &self.adj[v] {
            if Some(u) == exclude {
                continue;
            }
            let (slot, _) = self.slot(Hop { from: u, to: v, edge: e });
            D::mul_assign(&mut acc, &self.messages[slot]);
        }
        acc
    }

    fn update_message(&mut self, hop: Hop) -> Result<()> {
        let h = self.belief(hop.from, Some(hop.to), true);
        let (slot, forward) = self.slot(hop);
        let cols = self.model.nodes()[self.model.edges()[hop.edge].b].states;
        let mut out = std::mem::take(&mut self.messages[slot]);
        D::propagate(&self.kernels[self.kernel_of[hop.edge]], cols, &h, forward, &mut out);
        let min = D::normalize(&mut out);
        self.messages[slot] = out;
        if D::checks_underflow() && !(min >= UNDERFLOW_LIMIT) {
            return Err(Error::Underflow {
                edge: hop.edge,
                value: min,
            });
        }
        Ok(())
    }

    /// Residual of `v` before the update, then `b_v ← μ_v / Π incoming`.
    fn update_scaling(&mut self, v: usize) -> Result<f64> {
        let mu = &self.model.constrained()[&v];
        let prod = self.belief(v, None, false);
        let mut current = prod.clone();
        D::mul_assign(&mut current, &self.scalings[v]);
        let residual = l1_distance(&D::to_probabilities(&current), mu.as_slice());
        for (i, (b, &p)) in self.scalings[v].iter_mut().zip(&prod).enumerate() {
            *b = D::scaling(mu[i], p).ok_or(Error::Underflow {
                edge: self.adj[v].first().map_or(0, |&(_, e)| e),
                value: 0.0,
            })?;
        }
        Ok(if residual.is_nan() { f64::INFINITY } else { residual })
    }

    fn full_pass(&mut self) -> Result<()> {
        let order = self.collect_order();
        for &hop in &order {
            self.update_message(hop)?;
        }
        for hop in order.iter().rev() {
            self.update_message(Hop {
                from: hop.to,
                to: hop.from,
                edge: hop.edge,
            })?;
        }
        Ok(())
    }

    fn node_marginal(&self, v: usize) -> Vec<f64> {
        D::to_probabilities(&self.belief(v, None, true))
    }

    fn exact_residual(&self) -> f64 {
        self.model
            .constrained()
            .iter()
            .map(|(&j, mu)| l1_distance(&self.node_marginal(j), mu.as_slice()))
            .fold(0.0, |m, r| if r.is_nan() { f64::INFINITY } else { m.max(r) })
    }

    fn run(mut self, config: &SbpConfig) -> Result<SbpSolution> {
        let order = self.tour();
        let k = order.len();
        let paths: Vec<Vec<Hop>> = (0..k).map(|i| self.path(order[i], order[(i + 1) % k])).collect();

        // Bring every message pointing at the first constrained node up to date.
        for hop in self.collect_order() {
            self.update_message(hop)?;
        }

        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut final_residual;
        if k == 0 {
            self.full_pass()?;
            final_residual = 0.0;
        } else {
            loop {
                sweeps += 1;
                let mut sweep_residual: f64 = 0.0;
                for (i, &v) in order.iter().enumerate() {
                    sweep_residual = sweep_residual.max(self.update_scaling(v)?);
                    for &hop in &paths[i] {
                        self.update_message(hop)?;
                    }
                }
                trace.push(sweep_residual);
                if sweep_residual <= config.tol || sweeps >= config.max_sweeps {
                    self.full_pass()?;
                    final_residual = self.exact_residual();
                    if final_residual <= config.tol {
                        break;
                    }
                    if sweeps >= config.max_sweeps {
                        return Err(Error::NotConverged {
                            solver: "Sinkhorn belief propagation",
                            iterations: sweeps,
                            residual: final_residual,
                        });
                    }
                }
            }
        }

        let node_marginals = (0..self.model.num_nodes())
            .map(|v| DenseVector::new(self.node_marginal(v)))
            .collect::<Result<Vec<_>>>()?;
        let edge_flows = (0..self.model.num_edges()).map(|e| self.edge_flow(e)).collect::<Result<Vec<_>>>()?;
        let log_scalings = self
            .model
            .constrained()
            .keys()
            .map(|&j| (j, self.scalings[j].iter().map(|&b| D::to_log(b)).collect()))
            .collect();
        let messages = MessageStore {
            messages: self.messages.iter().map(|m| D::to_probabilities(m)).collect(),
        };
        Ok(SbpSolution {
            node_marginals,
            edge_flows,
            log_scalings,
            messages,
            sweeps_used: sweeps,
            final_residual,
            residual_trace: trace,
        })
    }

    fn edge_flow(&self, e: usize) -> Result<DenseMatrix> {
        let edge = &self.model.edges()[e];
        let ha = self.belief(edge.a, Some(edge.b), true);
        let hb = self.belief(edge.b, Some(edge.a), true);
        let cols = hb.len();
        let kernel = &self.kernels[self.kernel_of[e]];
        let mut data = Vec::with_capacity(kernel.len());
        for (i, row) in kernel.chunks_exact(cols).enumerate() {
            for (j, &k) in row.iter().enumerate() {
                data.push(D::pair(k, ha[i], hb[j]));
            }
        }
        let probs = D::to_probabilities(&data);
        DenseMatrix::new(ha.len(), cols, probs)
    }
}
