//! Synthetic crowd on a square grid: particles follow a log-linear move
//! policy and are counted by sensors whose detection probability decays
//! exponentially with distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tree::{ObservationSet, StateSpace};

/// Added to the seed for the observation streams so they never coincide with
/// the movement streams.
const OBSERVE_SEED_OFFSET: u64 = 0x5EED_0B5E_4FE5_0001;

/// A block of grid cells `(col, row)` receiving a fraction of the particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRegion {
    pub cells: Vec<[usize; 2]>,
    pub fraction: f64,
}

impl StartRegion {
    /// `size x size` block with lower-left cell `(col, row)`, clipped to the grid.
    pub fn block(col: usize, row: usize, size: usize, width: usize, fraction: f64) -> Self {
        let cells = (row..(row + size).min(width))
            .flat_map(|r| (col..(col + size).min(width)).map(move |c| [c, r]))
            .collect();
        StartRegion { cells, fraction }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// Each particle is counted at most once, by the nearest sensor that detects it.
    #[default]
    Nearest,
    /// Every detecting sensor counts the particle.
    MultiCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub grid_w: usize,
    pub n_particles: usize,
    /// Number of time steps (observation instants).
    pub steps: usize,
    /// Weights of (distance, force, destination, stay).
    pub theta: [f64; 4],
    pub force_dir: [f64; 2],
    /// Destination cell `(col, row)`; the top-right cell when absent.
    pub destination: Option<[usize; 2]>,
    /// Start blocks; bottom-left and bottom-middle 3x3 blocks when empty.
    pub start_regions: Vec<StartRegion>,
    /// Sensor coordinates; a regular 8x8 lattice when absent.
    pub sensor_positions: Option<Vec<[f64; 2]>>,
    /// Detection probability is `exp(−distance / decay_len)`.
    pub decay_len: f64,
    pub attribution: Attribution,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid_w: 30,
            n_particles: 1000,
            steps: 10,
            theta: [3.0, 5.0, 5.0, 10.0],
            force_dir: [1.0, 0.0],
            destination: None,
            start_regions: Vec::new(),
            sensor_positions: None,
            decay_len: 1.5,
            attribution: Attribution::Nearest,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn state_space(&self) -> StateSpace {
        StateSpace::grid(self.grid_w)
    }

    pub fn destination_cell(&self) -> [usize; 2] {
        self.destination.unwrap_or([self.grid_w - 1, self.grid_w - 1])
    }

    pub fn regions(&self) -> Vec<StartRegion> {
        if !self.start_regions.is_empty() {
            return self.start_regions.clone();
        }
        let w = self.grid_w;
        let middle = (w / 2).saturating_sub(1);
        vec![StartRegion::block(0, 0, 3, w, 0.5), StartRegion::block(middle, 0, 3, w, 0.5)]
    }

    pub fn sensors(&self) -> Vec<[f64; 2]> {
        if let Some(s) = &self.sensor_positions {
            return s.clone();
        }
        let w = self.grid_w as f64;
        (0..8)
            .flat_map(|r| (0..8).map(move |c| [(c as f64 + 0.5) * w / 8.0, (r as f64 + 0.5) * w / 8.0]))
            .collect()
    }

    /// One sensor at every cell center.
    pub fn sensor_per_cell(&self) -> Vec<[f64; 2]> {
        self.state_space().coords().to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 {
            return Err(Error::Schema("grid_w must be positive".into()));
        }
        if self.steps < 2 {
            return Err(Error::Schema(format!("need T >= 2 time steps, got {}", self.steps)));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Schema("theta must be finite".into()));
        }
        let norm = self.force_dir[0].hypot(self.force_dir[1]);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Schema("force_dir must be a nonzero finite vector".into()));
        }
        let dest = self.destination_cell();
        if dest.iter().any(|&d| d >= self.grid_w) {
            return Err(Error::Schema(format!("destination {dest:?} outside the grid")));
        }
        if !(self.decay_len > 0.0) {
            return Err(Error::Schema("decay_len must be positive".into()));
        }
        let regions = self.regions();
        let total: f64 = regions.iter().map(|r| r.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || regions.iter().any(|r| !(r.fraction >= 0.0)) {
            return Err(Error::Schema(format!("start fractions must be nonnegative and sum to 1, got {total}")));
        }
        for r in &regions {
            if r.cells.is_empty() && r.fraction > 0.0 {
                return Err(Error::Schema("start region without cells".into()));
            }
            if r.cells.iter().flatten().any(|&c| c >= self.grid_w) {
                return Err(Error::Schema("start cell outside the grid".into()));
            }
        }
        if self.sensors().iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Schema("sensor positions must be finite".into()));
        }
        Ok(())
    }
}

/// Move probabilities out of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MoveDistribution {
    /// Destination states: the Moore neighbors inside the grid and the cell itself.
    pub targets: Vec<usize>,
    pub probs: DenseVector,
}

impl MoveDistribution {
    /// The same probabilities scattered over all `states`.
    pub fn to_dense(&self, states: usize) -> DenseVector {
        let mut v = vec![0.0; states];
        for (&t, &p) in self.targets.iter().zip(self.probs.as_slice()) {
            v[t] += p;
        }
        DenseVector::new(v).expect("probabilities are finite and nonnegative")
    }
}

fn cosine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a[0] * b[0] + a[1] * b[1]) / (na * nb)
    }
}

/// Features (distance, force, destination, stay) of moving by `step` from `from`.
pub fn move_features(step: [i64; 2], from: [usize; 2], config: &SimConfig) -> [f64; 4] {
    let s = [step[0] as f64, step[1] as f64];
    let dest = config.destination_cell();
    let to_dest = [dest[0] as f64 - from[0] as f64, dest[1] as f64 - from[1] as f64];
    let stay = step == [0, 0];
    [
        -s[0].hypot(s[1]),
        cosine(s, config.force_dir),
        cosine(s, to_dest),
        if stay { 1.0 } else { 0.0 },
    ]
}

/// Log-linear move distribution out of `state`.
pub fn transition_distribution(state: usize, config: &SimConfig) -> MoveDistribution {
    let w = config.grid_w as i64;
    let (row, col) = (state as i64 / w, state as i64 % w);
    let mut targets = Vec::with_capacity(9);
    let mut logits = Vec::with_capacity(9);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (r, c) = (row + dr, col + dc);
            if r < 0 || c < 0 || r >= w || c >= w {
                continue;
            }
            let f = move_features([dc, dr], [col as usize, row as usize], config);
            logits.push(f.iter().zip(&config.theta).map(|(x, t)| x * t).sum::<f64>());
            targets.push((r * w + c) as usize);
        }
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let probs = DenseVector::new(weights.into_iter().map(|x| x / z).collect())
        .expect("softmax weights are finite");
    MoveDistribution { targets, probs }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// State of every particle at every step, `trajectories[p][t]`.
    pub trajectories: Vec<Vec<u32>>,
    /// Transition counts per interval, `S x S`.
    pub flows: Vec<DenseMatrix>,
    /// Particle counts per step.
    pub marginals: Vec<DenseVector>,
}

impl GroundTruth {
    pub fn num_steps(&self) -> usize {
        self.marginals.len()
    }

    /// Rebuilds counts from trajectories over `states` states.
    pub fn from_trajectories(trajectories: Vec<Vec<u32>>, states: usize, steps: usize) -> Self {
        let mut marginals = vec![vec![0.0; states]; steps];
        let mut flows = vec![vec![0.0; states * states]; steps.saturating_sub(1)];
        for path in &trajectories {
            for (t, &s) in path.iter().enumerate() {
                marginals[t][s as usize] += 1.0;
                if t + 1 < path.len() {
                    flows[t][s as usize * states + path[t + 1] as usize] += 1.0;
                }
            }
        }
        GroundTruth {
            trajectories,
            flows: flows
                .into_iter()
                .map(|f| DenseMatrix::new(states, states, f).expect("counts are finite"))
                .collect(),
            marginals: marginals
                .into_iter()
                .map(|m| DenseVector::new(m).expect("counts are nonnegative"))
                .collect(),
        }
    }
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

fn sample(cumulative: &[f64], u: f64) -> usize {
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

/// Start cell of particle `p`: particles are assigned to regions in order by
/// their cumulative fractions, then placed uniformly within the region.
fn start_state(p: usize, regions: &[StartRegion], n: usize, width: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut acc = 0.0;
    let position = (p as f64 + 0.5) / n as f64;
    let region = regions
        .iter()
        .find(|r| {
            acc += r.fraction;
            position < acc
        })
        .unwrap_or_else(|| regions.iter().rev().find(|r| !r.cells.is_empty()).expect("validated regions"));
    let [c, r] = region.cells[rng.gen_range(0..region.cells.len())];
    r * width + c
}

/// Simulates every particle independently; results do not depend on `exec`.
pub fn simulate(config: &SimConfig, exec: Exec) -> Result<GroundTruth> {
    config.validate()?;
    let s = config.grid_w * config.grid_w;
    let table: Vec<(Vec<usize>, Vec<f64>)> = (0..s)
        .map(|state| {
            let d = transition_distribution(state, config);
            let mut acc = 0.0;
            let cumulative = d
                .probs
                .as_slice()
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect();
            (d.targets, cumulative)
        })
        .collect();
    let regions = config.regions();
    let n = config.n_particles;
    let trajectories = exec.map_range(n, |p| {
        let mut rng = particle_rng(config.rng_seed, p);
        let mut state = start_state(p, &regions, n, config.grid_w, &mut rng);
        let mut path = Vec::with_capacity(config.steps);
        path.push(state as u32);
        for _ in 1..config.steps {
            let (targets, cumulative) = &table[state];
            state = targets[sample(cumulative, rng.gen::<f64>())];
            path.push(state as u32);
        }
        path
    });
    Ok(GroundTruth::from_trajectories(trajectories, s, config.steps))
}

/// Per cell: sensors sorted by distance with their detection probability and
/// the cell the sensor reports to.
fn sensor_table(config: &SimConfig) -> Vec<Vec<(f64, usize)>> {
    let space = config.state_space();
    let w = config.grid_w;
    let sensors: Vec<([f64; 2], usize)> = config
        .sensors()
        .into_iter()
        .map(|p| {
            let c = (p[0].floor().max(0.0) as usize).min(w - 1);
            let r = (p[1].floor().max(0.0) as usize).min(w - 1);
            (p, r * w + c)
        })
        .collect();
    (0..space.size())
        .map(|state| {
            let x = space.coord(state);
            let mut list: Vec<(f64, f64, usize)> = sensors
                .iter()
                .map(|(p, cell)| {
                    let d = (x[0] - p[0]).hypot(x[1] - p[1]);
                    (d, (-d / config.decay_len).exp(), *cell)
                })
                .collect();
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
            list.into_iter().map(|(_, p, c)| (p, c)).collect()
        })
        .collect()
}

/// Expected detections per step in closed form: `Σ_x n_x (1 − Π_k (1 − p_xk))`
/// for nearest attribution, `Σ_x n_x Σ_k p_xk` for multi-count.
pub fn expected_detections(truth: &GroundTruth, config: &SimConfig) -> Vec<f64> {
    let table = sensor_table(config);
    truth
        .marginals
        .iter()
        .map(|m| {
            m.as_slice()
                .iter()
                .zip(&table)
                .map(|(n, sensors)| {
                    let per = match config.attribution {
                        Attribution::Nearest => 1.0 - sensors.iter().map(|(p, _)| 1.0 - p).product::<f64>(),
                        Attribution::MultiCount => sensors.iter().map(|(p, _)| p).sum(),
                    };
                    n * per
                })
                .sum()
        })
        .collect()
}

/// Sensor counts per step (one replica per step), reported on the grid.
pub fn observe(truth: &GroundTruth, config: &SimConfig, exec: Exec) -> Result<ObservationSet> {
    config.validate()?;
    let s = config.grid_w * config.grid_w;
    let table = sensor_table(config);
    let seed = config.rng_seed.wrapping_add(OBSERVE_SEED_OFFSET);
    let detections: Vec<Vec<Vec<u32>>> = exec.map_slice_indexed(&truth.trajectories, |p, path| {
        let mut rng = particle_rng(seed, p);
        path.iter()
            .map(|&state| {
                let mut hits = Vec::new();
                for &(prob, cell) in &table[state as usize] {
                    if rng.gen::<f64>() < prob {
                        hits.push(cell as u32);
                        if config.attribution == Attribution::Nearest {
                            break;
                        }
                    }
                }
                hits
            })
            .collect()
    });
    let steps = truth.num_steps();
    let mut counts = vec![vec![0.0; s]; steps];
    for per_particle in &detections {
        for (t, hits) in per_particle.iter().enumerate() {
            for &c in hits {
                counts[t][c as usize] += 1.0;
            }
        }
    }
    ObservationSet::single(
        s,
        counts
            .into_iter()
            .map(|c| DenseVector::new(c).expect("counts are nonnegative"))
            .collect(),
    )
}
