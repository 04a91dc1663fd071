//! Test oracles: brute-force solvers that materialize the full plan tensor,
//! plus random instance generators.
#![allow(dead_code)]

use std::collections::BTreeMap;

use popflow::tree::{Edge, Node, NodeRole};
use popflow::{DenseMatrix, DenseVector, TreeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixed-radix index helper over all node states.
struct Indexer {
    radix: Vec<usize>,
    total: usize,
}

impl Indexer {
    fn new(model: &TreeModel) -> Self {
        let radix: Vec<usize> = model.nodes().iter().map(|n| n.states).collect();
        let total = radix.iter().product();
        Indexer { radix, total }
    }

    fn decode(&self, mut flat: usize, out: &mut [usize]) {
        for (o, &r) in out.iter_mut().zip(&self.radix).rev() {
            *o = flat % r;
            flat /= r;
        }
    }
}

/// Materialized Gibbs tensor `Π_e exp(−C_e/ε)`.
fn gibbs_tensor(model: &TreeModel, eps: f64) -> (Vec<f64>, Vec<Vec<usize>>) {
    let idx = Indexer::new(model);
    let mut states = vec![0; idx.radix.len()];
    let mut tensor = Vec::with_capacity(idx.total);
    let mut coords = Vec::with_capacity(idx.total);
    for flat in 0..idx.total {
        idx.decode(flat, &mut states);
        let c: f64 = model.edges().iter().map(|e| e.cost.get(states[e.a], states[e.b])).sum();
        tensor.push((-c / eps).exp());
        coords.push(states.clone());
    }
    (tensor, coords)
}

fn node_marginal(tensor: &[f64], coords: &[Vec<usize>], node: usize, states: usize) -> Vec<f64> {
    let mut m = vec![0.0; states];
    for (x, c) in tensor.iter().zip(coords) {
        m[c[node]] += x;
    }
    m
}

/// One Bregman projection: rescale the tensor so that `node` has marginal `target`.
pub fn project_dense(tensor: &mut [f64], coords: &[Vec<usize>], node: usize, target: &[f64]) {
    let m = node_marginal(tensor, coords, node, target.len());
    for (x, c) in tensor.iter_mut().zip(coords) {
        let s = c[node];
        *x = if target[s] == 0.0 { 0.0 } else { *x * target[s] / m[s] };
    }
}

pub struct DenseSolution {
    pub node_marginals: Vec<Vec<f64>>,
    pub edge_flows: Vec<DenseMatrix>,
    pub iterations: usize,
}

/// Cyclic projections onto every constrained marginal of the full tensor
/// until the largest ℓ1 marginal gap is at most `tol`.
pub fn solve_dense(model: &TreeModel, eps: f64, tol: f64, max_iters: usize) -> DenseSolution {
    let (mut tensor, coords) = gibbs_tensor(model, eps);
    let total: f64 = tensor.iter().sum();
    tensor.iter_mut().for_each(|x| *x /= total);
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        for (&node, target) in model.constrained() {
            project_dense(&mut tensor, &coords, node, target.as_slice());
        }
        let gap = model
            .constrained()
            .iter()
            .map(|(&node, target)| {
                node_marginal(&tensor, &coords, node, target.len())
                    .iter()
                    .zip(target.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        if gap <= tol {
            break;
        }
    }
    let node_marginals = model
        .nodes()
        .iter()
        .enumerate()
        .map(|(v, n)| node_marginal(&tensor, &coords, v, n.states))
        .collect();
    let edge_flows = model
        .edges()
        .iter()
        .map(|e| {
            let (ra, rb) = (model.nodes()[e.a].states, model.nodes()[e.b].states);
            let mut m = DenseMatrix::zeros(ra, rb);
            for (x, c) in tensor.iter().zip(&coords) {
                m.set(c[e.a], c[e.b], m.get(c[e.a], c[e.b]) + x);
            }
            m
        })
        .collect();
    DenseSolution {
        node_marginals,
        edge_flows,
        iterations,
    }
}

/// Plain bimarginal Sinkhorn in the log domain, independent of the library.
pub fn dense_entropic_plan(cost: &DenseMatrix, mu: &[f64], nu: &[f64], eps: f64, tol: f64) -> DenseMatrix {
    let (n, m) = cost.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = xs.collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let plan = |f: &[f64], g: &[f64]| DenseMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost.get(i, j)) / eps).exp());
    for _ in 0..1_000_000 {
        for i in 0..n {
            f[i] = eps * mu[i].ln() - eps * lse(&mut (0..m).map(|j| (g[j] - cost.get(i, j)) / eps));
        }
        for j in 0..m {
            g[j] = eps * nu[j].ln() - eps * lse(&mut (0..n).map(|i| (f[i] - cost.get(i, j)) / eps));
        }
        let p = plan(&f, &g);
        let gap: f64 = p.row_sums().iter().zip(mu).map(|(a, b)| (a - b).abs()).sum();
        if gap <= tol {
            return p;
        }
    }
    panic!("oracle Sinkhorn did not converge");
}

pub fn random_simplex(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| floor + rng.gen::<f64>()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_cost(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.gen::<f64>())
}

/// Random symmetric zero-diagonal cost with entries in `[lo, hi)`.
pub fn random_symmetric_cost(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> DenseMatrix {
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = lo + (hi - lo) * rng.gen::<f64>();
            c.set(i, j, x);
            c.set(j, i, x);
        }
    }
    c
}

/// Random tree on `nodes` nodes (random parent for each node), node state
/// counts drawn from `states`, constrained marginals on a random non-empty
/// subset, costs uniform in `[0, cost_scale)`.
pub fn random_tree(rng: &mut impl Rng, nodes: usize, states: &[usize], cost_scale: f64) -> TreeModel {
    let sizes: Vec<usize> = (0..nodes).map(|_| states[rng.gen_range(0..states.len())]).collect();
    let node_list: Vec<Node> = sizes
        .iter()
        .map(|&s| Node {
            states: s,
            role: NodeRole::Free,
        })
        .collect();
    let edges: Vec<Edge> = (1..nodes)
        .map(|v| {
            let p = rng.gen_range(0..v);
            Edge {
                a: p,
                b: v,
                cost: random_cost(rng, sizes[p], sizes[v], cost_scale),
            }
        })
        .collect();
    let mut constrained = BTreeMap::new();
    for (v, &size) in sizes.iter().enumerate() {
        if rng.gen_bool(0.5) {
            constrained.insert(v, DenseVector::new(random_simplex(rng, size, 0.1)).unwrap());
        }
    }
    if constrained.is_empty() {
        let v = rng.gen_range(0..nodes);
        constrained.insert(v, DenseVector::new(random_simplex(rng, sizes[v], 0.1)).unwrap());
    }
    TreeModel::new(node_list, edges, constrained)
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
