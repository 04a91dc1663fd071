//! Tree-structured collective model: state space, marginal nodes, edge costs
//! and the set of constrained marginals.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dense::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};

/// Tolerance on the unit-mass check of constrained marginals.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Indexed discrete states with planar coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_width: Option<usize>,
}

impl StateSpace {
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("state space needs at least one state".into()));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Domain("state coordinates must be finite".into()));
        }
        Ok(StateSpace {
            coords,
            grid_width: None,
        })
    }

    /// `width x width` grid of unit cells. State `row * width + col` sits at
    /// `(col + 0.5, row + 0.5)`; row 0 is the bottom row.
    pub fn grid(width: usize) -> Self {
        assert!(width > 0, "grid width must be positive");
        let coords = (0..width * width)
            .map(|s| {
                let (r, c) = (s / width, s % width);
                [c as f64 + 0.5, r as f64 + 0.5]
            })
            .collect();
        StateSpace {
            coords,
            grid_width: Some(width),
        }
    }

    pub fn size(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, state: usize) -> [f64; 2] {
        self.coords[state]
    }

    pub fn grid_width(&self) -> Option<usize> {
        self.grid_width
    }

    /// `(row, col)` of a grid state.
    pub fn cell(&self, state: usize) -> Option<(usize, usize)> {
        self.grid_width.map(|w| (state / w, state % w))
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// `D_ij = |x_i − x_j|^power`.
    pub fn distance_power_matrix(&self, power: f64) -> DenseMatrix {
        let n = self.size();
        DenseMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                self.distance(i, j).powf(power)
            }
        })
    }

    pub fn squared_distance_matrix(&self) -> DenseMatrix {
        let n = self.size();
        DenseMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (self.coords[i], self.coords[j]);
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
        })
    }
}

/// Per-step aggregated count vectors; step `t` may hold several replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    num_states: usize,
    steps: Vec<Vec<DenseVector>>,
}

impl ObservationSet {
    pub fn new(num_states: usize, steps: Vec<Vec<DenseVector>>) -> Result<Self> {
        for (t, reps) in steps.iter().enumerate() {
            for (r, v) in reps.iter().enumerate() {
                if v.len() != num_states {
                    return Err(Error::shape(
                        format!("{num_states} states"),
                        format!("observation (step {t}, replica {r}) of length {}", v.len()),
                    ));
                }
            }
        }
        Ok(ObservationSet { num_states, steps })
    }

    /// One observation per step.
    pub fn single(num_states: usize, per_step: Vec<DenseVector>) -> Result<Self> {
        ObservationSet::new(num_states, per_step.into_iter().map(|v| vec![v]).collect())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> &[DenseVector] {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[Vec<DenseVector>] {
        &self.steps
    }

    pub fn obs_per_step(&self) -> Vec<usize> {
        self.steps.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeRole {
    Hidden { step: usize },
    Observation { step: usize, replica: usize },
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub states: usize,
    pub role: NodeRole,
}

/// Undirected edge; `cost` has shape `states(a) x states(b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub cost: DenseMatrix,
}

/// First structural problem found by [`validate_tree`].
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TreeViolation {
    #[error("empty tree")]
    Empty,
    #[error("edge {edge} references unknown node {node}")]
    UnknownNode { edge: usize, node: usize },
    #[error("edge {edge} is a self-loop")]
    SelfLoop { edge: usize },
    #[error("cycle closed by edge {edge}")]
    Cycle { edge: usize },
    #[error("disconnected: node {node} is unreachable from node 0")]
    Disconnected { node: usize },
    #[error("edge {edge} cost has shape {found:?}, expected {expected:?}")]
    CostShape {
        edge: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("constraint on unknown node {node}")]
    UnknownConstrainedNode { node: usize },
    #[error("constrained marginal at node {node} has length {found}, expected {expected}")]
    MarginalLength {
        node: usize,
        expected: usize,
        found: usize,
    },
    #[error("unnormalized marginal at node {node} (mass {mass})")]
    UnnormalizedMarginal { node: usize, mass: f64 },
}

impl TreeViolation {
    /// Short category name, e.g. `"cycle"`.
    pub fn kind(&self) -> &'static str {
        match self {
            TreeViolation::Empty => "empty",
            TreeViolation::UnknownNode { .. } => "unknown node",
            TreeViolation::SelfLoop { .. } => "self-loop",
            TreeViolation::Cycle { .. } => "cycle",
            TreeViolation::Disconnected { .. } => "disconnected",
            TreeViolation::CostShape { .. } => "cost shape",
            TreeViolation::UnknownConstrainedNode { .. } => "unknown constrained node",
            TreeViolation::MarginalLength { .. } => "marginal length",
            TreeViolation::UnnormalizedMarginal { .. } => "unnormalized marginal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeModel {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    constrained: BTreeMap<usize, DenseVector>,
}

/// Neighbor entry in the adjacency list: `(neighbor, edge id)`.
pub type Neighbor = (usize, usize);

impl TreeModel {
    /// Assembles a model without checking it; see [`TreeModel::validate`].
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, constrained: BTreeMap<usize, DenseVector>) -> Self {
        TreeModel {
            nodes,
            edges,
            constrained,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn constrained(&self) -> &BTreeMap<usize, DenseVector> {
        &self.constrained
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_constrained(&self, node: usize) -> bool {
        self.constrained.contains_key(&node)
    }

    /// Replaces the cost on one edge. The shape is checked by `validate`.
    pub fn set_edge_cost(&mut self, edge: usize, cost: DenseMatrix) {
        self.edges[edge].cost = cost;
    }

    /// Adjacency lists sorted by neighbor id.
    pub fn adjacency(&self) -> Vec<Vec<Neighbor>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[edge.a].push((edge.b, e));
            adj[edge.b].push((edge.a, e));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn validate(&self) -> std::result::Result<(), TreeViolation> {
        validate_tree(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TreeDocument {
            format: TREE_FORMAT.to_string(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            constrained: self
                .constrained
                .iter()
                .map(|(&node, marginal)| ConstrainedEntry {
                    node,
                    marginal: marginal.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TreeDocument = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if doc.format != TREE_FORMAT {
            return Err(Error::Schema(format!("unsupported tree format {:?}", doc.format)));
        }
        let mut constrained = BTreeMap::new();
        for entry in doc.constrained {
            if constrained.insert(entry.node, entry.marginal).is_some() {
                return Err(Error::Schema(format!("node {} constrained twice", entry.node)));
            }
        }
        Ok(TreeModel::new(doc.nodes, doc.edges, constrained))
    }
}

const TREE_FORMAT: &str = "popflow-tree/1";

/// On-disk JSON layout of a [`TreeModel`]. Cost matrices are nested row arrays.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDocument {
    format: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    constrained: Vec<ConstrainedEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstrainedEntry {
    node: usize,
    marginal: DenseVector,
}

/// Checks the tree structure, cost shapes and constrained marginals, in that
/// order, and reports the first violation.
pub fn validate_tree(model: &TreeModel) -> std::result::Result<(), TreeViolation> {
    let n = model.nodes.len();
    if n == 0 {
        return Err(TreeViolation::Empty);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (e, edge) in model.edges.iter().enumerate() {
        for node in [edge.a, edge.b] {
            if node >= n {
                return Err(TreeViolation::UnknownNode { edge: e, node });
            }
        }
        if edge.a == edge.b {
            return Err(TreeViolation::SelfLoop { edge: e });
        }
        let (ra, rb) = (find(&mut parent, edge.a), find(&mut parent, edge.b));
        if ra == rb {
            return Err(TreeViolation::Cycle { edge: e });
        }
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    if let Some(node) = (1..n).find(|&v| find(&mut parent, v) != root) {
        return Err(TreeViolation::Disconnected { node });
    }
    for (e, edge) in model.edges.iter().enumerate() {
        let expected = (model.nodes[edge.a].states, model.nodes[edge.b].states);
        if edge.cost.shape() != expected {
            return Err(TreeViolation::CostShape {
                edge: e,
                expected,
                found: edge.cost.shape(),
            });
        }
    }
    for (&node, marginal) in &model.constrained {
        let Some(info) = model.nodes.get(node) else {
            return Err(TreeViolation::UnknownConstrainedNode { node });
        };
        if marginal.len() != info.states {
            return Err(TreeViolation::MarginalLength {
                node,
                expected: info.states,
                found: marginal.len(),
            });
        }
        let mass = marginal.sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(TreeViolation::UnnormalizedMarginal { node, mass });
        }
    }
    Ok(())
}

/// Node and edge numbering of an HMM-shaped tree.
///
/// Hidden nodes are `0..T` in time order, followed by one leaf per
/// observation in `(step, replica)` order. Transition edges come first
/// (edge `t` joins hidden `t` and `t + 1`), then one emission edge per leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HmmLayout {
    pub num_steps: usize,
    pub obs_per_step: Vec<usize>,
    pub transition_edges: Vec<usize>,
    pub emission_edges: Vec<Vec<usize>>,
    pub leaves: Vec<Vec<usize>>,
}

impl HmmLayout {
    pub fn hidden(&self, step: usize) -> usize {
        step
    }
}

impl fmt::Display for HmmLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let leaves: usize = self.obs_per_step.iter().sum();
        write!(
            f,
            "HMM tree: {} hidden nodes, {} leaves, {} edges",
            self.num_steps,
            leaves,
            self.num_steps - 1 + leaves
        )
    }
}

/// Builds the HMM-shaped tree: a hidden chain joined by `transition_costs`
/// with one constrained leaf per observation attached through `emission_cost`.
///
/// Each observation is normalized to unit mass. The first and last steps must
/// carry at least one observation; intermediate steps may have none.
pub fn build_hmm_tree(
    observations: &ObservationSet,
    emission_cost: &DenseMatrix,
    transition_costs: &[DenseMatrix],
) -> Result<(TreeModel, HmmLayout)> {
    let t_len = observations.num_steps();
    let s = observations.num_states();
    if t_len < 2 {
        return Err(Error::InvalidInput(format!("need T >= 2 time steps, got {t_len}")));
    }
    if transition_costs.len() != t_len - 1 {
        return Err(Error::shape(
            format!("{} transition costs", t_len - 1),
            format!("{}", transition_costs.len()),
        ));
    }
    if emission_cost.shape() != (s, s) {
        return Err(Error::shape(format!("{s}x{s} emission cost"), format!("{:?}", emission_cost.shape())));
    }
    for (t, c) in transition_costs.iter().enumerate() {
        if c.shape() != (s, s) {
            return Err(Error::shape(
                format!("{s}x{s} transition cost"),
                format!("{:?} at step {t}", c.shape()),
            ));
        }
    }
    for step in [0, t_len - 1] {
        if observations.step(step).is_empty() {
            return Err(Error::MissingObservation { step });
        }
    }

    let mut nodes: Vec<Node> = (0..t_len)
        .map(|step| Node {
            states: s,
            role: NodeRole::Hidden { step },
        })
        .collect();
    let mut edges: Vec<Edge> = transition_costs
        .iter()
        .enumerate()
        .map(|(t, c)| Edge {
            a: t,
            b: t + 1,
            cost: c.clone(),
        })
        .collect();
    let transition_edges = (0..t_len - 1).collect();
    let mut constrained = BTreeMap::new();
    let mut emission_edges = vec![Vec::new(); t_len];
    let mut leaves = vec![Vec::new(); t_len];

    for (step, reps) in observations.steps().iter().enumerate() {
        for (replica, obs) in reps.iter().enumerate() {
            let marginal = obs.normalized().map_err(|_| {
                Error::Domain(format!("observation (step {step}, replica {replica}) has zero mass"))
            })?;
            let leaf = nodes.len();
            nodes.push(Node {
                states: s,
                role: NodeRole::Observation { step, replica },
            });
            emission_edges[step].push(edges.len());
            leaves[step].push(leaf);
            edges.push(Edge {
                a: step,
                b: leaf,
                cost: emission_cost.clone(),
            });
            constrained.insert(leaf, marginal);
        }
    }

    let layout = HmmLayout {
        num_steps: t_len,
        obs_per_step: observations.obs_per_step(),
        transition_edges,
        emission_edges,
        leaves,
    };
    Ok((TreeModel::new(nodes, edges, constrained), layout))
}
