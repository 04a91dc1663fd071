//! Run configuration: one JSON document covering simulation, estimation and
//! evaluation. Layers apply in the order defaults < file < environment <
//! command-line flags.
//!
//! Environment overrides use `POPFLOW__SECTION__KEY=value`; the value is
//! parsed as JSON when possible and taken as a string otherwise, so
//! `POPFLOW__ESTIMATION__EPS=0.2` and `POPFLOW__ESTIMATION__VARIANT=ista`
//! both work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dense::{DenseMatrix, Epsilon};
use crate::em::{distance_emission, near_identity_emission, EmConfig};
use crate::error::{Error, Result};
use crate::eval::NeighborStructure;
use crate::sim::SimConfig;
use crate::tree::StateSpace;

pub const ENV_PREFIX: &str = "POPFLOW__";

/// How observed counts relate to hidden states.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmissionModel {
    /// Observations are (almost) exact counts of the hidden state.
    #[default]
    NearIdentity,
    /// Squared distance divided by `decay_len`, capped.
    Distance { decay_len: f64 },
}

impl EmissionModel {
    pub fn cost(&self, space: &StateSpace, eps: Epsilon) -> Result<DenseMatrix> {
        match *self {
            EmissionModel::NearIdentity => Ok(near_identity_emission(space.size(), eps)),
            EmissionModel::Distance { decay_len } if decay_len > 0.0 && decay_len.is_finite() => {
                Ok(distance_emission(space, decay_len, eps))
            }
            EmissionModel::Distance { decay_len } => {
                Err(Error::Schema(format!("emission decay_len must be positive, got {decay_len}")))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// The cell and its eight grid neighbors.
    #[default]
    Moore,
    /// All state pairs.
    Complete,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub neighborhood: Neighborhood,
    /// Also score the stay-in-place baseline.
    pub stay: bool,
}

impl EvalConfig {
    pub fn neighbors(&self, grid_w: usize) -> NeighborStructure {
        match self.neighborhood {
            Neighborhood::Moore => NeighborStructure::moore(grid_w),
            Neighborhood::Complete => NeighborStructure::complete(grid_w * grid_w),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub observations: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// The whole configuration document. The state space is the
/// `simulation.grid_w` square grid for every command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimConfig,
    pub estimation: EmConfig,
    pub emission: EmissionModel,
    pub evaluation: EvalConfig,
    pub paths: PathConfig,
}

fn schema(context: &str, e: serde_json::Error) -> Error {
    Error::Schema(format!("{context}: {e}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| schema("config", e))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| schema("config", e))
    }

    /// Defaults, then the optional file, then `POPFLOW__…` variables from `env`.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let base = match file {
            Some(p) => RunConfig::from_json(&crate::io::read_file(p)?)
                .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        base.with_env(env)
    }

    /// Applies environment overrides on top of `self`.
    pub fn with_env(self, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        if overrides.is_empty() {
            return Ok(self);
        }
        // Sorted so that the result never depends on environment order.
        overrides.sort();
        let mut doc = serde_json::to_value(&self).map_err(|e| schema("config", e))?;
        for (key, raw) in &overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            if path.iter().any(String::is_empty) {
                return Err(Error::Schema(format!("malformed override variable `{key}`")));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, &path, value).map_err(|msg| Error::Schema(format!("{key}: {msg}")))?;
        }
        serde_json::from_value(doc).map_err(|e| schema("environment override", e))
    }

    pub fn state_space(&self) -> StateSpace {
        self.simulation.state_space()
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()
    }
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = doc;
    for p in parents {
        let obj = node.as_object_mut().ok_or_else(|| format!("`{p}` is not a section"))?;
        node = obj
            .entry(p.clone())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let obj = node.as_object_mut().ok_or_else(|| format!("cannot set `{last}` on a scalar"))?;
    obj.insert(last.clone(), value);
    Ok(())
}
