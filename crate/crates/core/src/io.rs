//! On-disk formats: CSV tables with `# key=value` metadata lines, JSON
//! sidecars for traces and manifests.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write-then-read cycle reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dense::{DenseMatrix, DenseVector};
use crate::em::{EmIteration, Variant};
use crate::error::{Error, Result};
use crate::tree::ObservationSet;

pub const MARGINAL_HEADER: &str = "time_step,replica,state,count";
pub const FLOW_HEADER: &str = "time_step,from_state,to_state,mass";
pub const COST_HEADER: &str = "time_step,from_state,to_state,cost";
pub const BETA_HEADER: &str = "time_step,exponent,beta";

/// Per-step count vectors, possibly several replicas per step.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTable {
    pub num_states: usize,
    pub steps: Vec<Vec<DenseVector>>,
}

impl MarginalTable {
    pub fn single(num_states: usize, per_step: &[DenseVector]) -> Self {
        MarginalTable {
            num_states,
            steps: per_step.iter().map(|v| vec![v.clone()]).collect(),
        }
    }

    pub fn from_observations(obs: &ObservationSet) -> Self {
        MarginalTable {
            num_states: obs.num_states(),
            steps: obs.steps().to_vec(),
        }
    }

    pub fn into_observations(self) -> Result<ObservationSet> {
        ObservationSet::new(self.num_states, self.steps)
    }

    /// First replica of every step.
    pub fn first_replicas(&self) -> Vec<DenseVector> {
        self.steps.iter().map(|r| r[0].clone()).collect()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_string(&mut s))
        .map_err(|e| io_err(path, e))?;
    Ok(s)
}

/// Parsed CSV body plus its metadata.
struct Table {
    meta: BTreeMap<String, String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn parse_table(text: &str, header: &str, kind: &str) -> Result<Table> {
    let meta = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|rest| rest.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let schema = |e: csv::Error| Error::Schema(format!("{kind} file: {e}"));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found: Vec<String> = reader.headers().map_err(schema)?.iter().map(str::to_string).collect();
    if found.join(",") != header {
        return Err(Error::Schema(format!(
            "{kind} file: expected header `{header}`, found `{}`",
            found.join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(schema)?;
        let lineno = record.position().map_or(0, |p| p.line() as usize);
        rows.push((lineno, record.iter().map(str::to_string).collect()));
    }
    Ok(Table { meta, rows })
}

fn meta_usize(t: &Table, key: &str, kind: &str) -> Result<usize> {
    let v = t
        .meta
        .get(key)
        .ok_or_else(|| Error::Schema(format!("{kind} file: missing `# {key}=` metadata")))?;
    v.parse()
        .map_err(|_| Error::Schema(format!("{kind} file: metadata `{key}={v}` is not a nonnegative integer")))
}

fn field_usize(s: &str, what: &str, lineno: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Schema(format!("line {lineno}: {what} `{s}` is not a nonnegative integer")))
}

fn field_f64(s: &str, what: &str, lineno: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Schema(format!("line {lineno}: {what} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Schema(format!("line {lineno}: {what} must be finite")));
    }
    Ok(v)
}

fn field_nonneg(s: &str, what: &str, lineno: usize) -> Result<f64> {
    let v = field_f64(s, what, lineno)?;
    if v < 0.0 {
        return Err(Error::Schema(format!("line {lineno}: {what} must be nonnegative, got {v}")));
    }
    Ok(v)
}

fn state_index(s: &str, states: usize, lineno: usize) -> Result<usize> {
    let i = field_usize(s, "state", lineno)?;
    if i >= states {
        return Err(Error::Schema(format!("line {lineno}: state {i} out of range (S={states})")));
    }
    Ok(i)
}

/// Marginal file: every entry of every replica, dense.
pub fn marginals_to_string(table: &MarginalTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# kind=marginals");
    let _ = writeln!(out, "# states={}", table.num_states);
    let _ = writeln!(out, "# steps={}", table.steps.len());
    let _ = writeln!(out, "{MARGINAL_HEADER}");
    for (t, reps) in table.steps.iter().enumerate() {
        for (r, v) in reps.iter().enumerate() {
            for (s, x) in v.as_slice().iter().enumerate() {
                let _ = writeln!(out, "{t},{r},{s},{x}");
            }
        }
    }
    out
}

/// Parses a marginal file. Entries absent from the table are zero; every step
/// `0..steps` must carry at least one replica.
pub fn marginals_from_str(text: &str) -> Result<MarginalTable> {
    let table = parse_table(text, MARGINAL_HEADER, "marginal")?;
    let states = meta_usize(&table, "states", "marginal")?;
    let steps = meta_usize(&table, "steps", "marginal")?;
    let mut cells: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for (lineno, r) in &table.rows {
        let t = field_usize(&r[0], "time_step", *lineno)?;
        if t >= steps {
            return Err(Error::Schema(format!("line {lineno}: time_step {t} out of range (T={steps})")));
        }
        let rep = field_usize(&r[1], "replica", *lineno)?;
        let s = state_index(&r[2], states, *lineno)?;
        let count = field_nonneg(&r[3], "count", *lineno)?;
        if cells.insert((t, rep, s), count).is_some() {
            return Err(Error::Schema(format!(
                "line {lineno}: duplicate entry (time_step {t}, replica {rep}, state {s})"
            )));
        }
    }
    let mut replicas: Vec<usize> = vec![0; steps];
    for &(t, rep, _) in cells.keys() {
        replicas[t] = replicas[t].max(rep + 1);
    }
    if let Some(t) = replicas.iter().position(|&r| r == 0) {
        return Err(Error::Schema(format!("observations missing at time step {t}")));
    }
    let mut data: Vec<Vec<Vec<f64>>> = replicas.iter().map(|&r| vec![vec![0.0; states]; r]).collect();
    for ((t, rep, s), v) in cells {
        data[t][rep][s] = v;
    }
    let steps = data
        .into_iter()
        .map(|reps| reps.into_iter().map(DenseVector::new).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalTable {
        num_states: states,
        steps,
    })
}

fn matrices_to_string(mats: &[DenseMatrix], kind: &str, header: &str, skip_zeros: bool) -> String {
    let states = mats.first().map_or(0, |m| m.rows());
    let mut out = String::new();
    let _ = writeln!(out, "# kind={kind}");
    let _ = writeln!(out, "# states={states}");
    let _ = writeln!(out, "# intervals={}", mats.len());
    let _ = writeln!(out, "{header}");
    for (t, m) in mats.iter().enumerate() {
        for i in 0..m.rows() {
            for (j, &x) in m.row(i).iter().enumerate() {
                if !(skip_zeros && x == 0.0) {
                    let _ = writeln!(out, "{t},{i},{j},{x}");
                }
            }
        }
    }
    out
}

fn matrices_from_str(text: &str, kind: &str, header: &str, nonneg: bool) -> Result<Vec<DenseMatrix>> {
    let table = parse_table(text, header, kind)?;
    let states = meta_usize(&table, "states", kind)?;
    let intervals = meta_usize(&table, "intervals", kind)?;
    let mut data = vec![vec![0.0; states * states]; intervals];
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, r) in &table.rows {
        let t = field_usize(&r[0], "time_step", *lineno)?;
        if t >= intervals {
            return Err(Error::Schema(format!(
                "line {lineno}: time_step {t} out of range ({intervals} intervals)"
            )));
        }
        let i = state_index(&r[1], states, *lineno)?;
        let j = state_index(&r[2], states, *lineno)?;
        let v = if nonneg {
            field_nonneg(&r[3], "mass", *lineno)?
        } else {
            field_f64(&r[3], "value", *lineno)?
        };
        if !seen.insert((t, i, j)) {
            return Err(Error::Schema(format!("line {lineno}: duplicate entry ({t}, {i}, {j})")));
        }
        data[t][i * states + j] = v;
    }
    data.into_iter().map(|d| DenseMatrix::new(states, states, d)).collect()
}

/// Flow file: nonzero entries only.
pub fn flows_to_string(flows: &[DenseMatrix]) -> String {
    matrices_to_string(flows, "flows", FLOW_HEADER, true)
}

pub fn flows_from_str(text: &str) -> Result<Vec<DenseMatrix>> {
    matrices_from_str(text, "flow", FLOW_HEADER, true)
}

/// Cost file: every entry, one row per `(t, i, j)`.
pub fn costs_to_string(costs: &[DenseMatrix]) -> String {
    matrices_to_string(costs, "costs", COST_HEADER, false)
}

pub fn costs_from_str(text: &str) -> Result<Vec<DenseMatrix>> {
    matrices_from_str(text, "cost", COST_HEADER, false)
}

pub fn betas_to_string(exponents: &[f64], betas: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# kind=betas");
    let _ = writeln!(out, "# intervals={}", betas.len());
    let _ = writeln!(out, "{BETA_HEADER}");
    for (t, b) in betas.iter().enumerate() {
        for (q, x) in exponents.iter().zip(b) {
            let _ = writeln!(out, "{t},{q},{x}");
        }
    }
    out
}

/// Returns the exponents (in file order of the first interval) and the
/// coefficients per interval.
pub fn betas_from_str(text: &str) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let table = parse_table(text, BETA_HEADER, "beta")?;
    let intervals = meta_usize(&table, "intervals", "beta")?;
    let mut exps: Vec<Vec<f64>> = vec![Vec::new(); intervals];
    let mut betas: Vec<Vec<f64>> = vec![Vec::new(); intervals];
    for (lineno, r) in &table.rows {
        let t = field_usize(&r[0], "time_step", *lineno)?;
        if t >= intervals {
            return Err(Error::Schema(format!("line {lineno}: time_step {t} out of range")));
        }
        exps[t].push(field_f64(&r[1], "exponent", *lineno)?);
        betas[t].push(field_f64(&r[2], "beta", *lineno)?);
    }
    let exponents = exps.first().cloned().unwrap_or_default();
    if exps.iter().any(|e| *e != exponents) {
        return Err(Error::Schema("beta file: exponents differ between intervals".into()));
    }
    Ok((exponents, betas))
}

/// Per-step NMAE table written by `evaluate`.
pub fn per_step_to_string(estimate: &[f64], stay: Option<&[f64]>) -> String {
    let mut out = String::new();
    out.push_str(if stay.is_some() { "time_step,nmae,nmae_stay\n" } else { "time_step,nmae\n" });
    for (t, x) in estimate.iter().enumerate() {
        match stay {
            Some(s) => {
                let _ = writeln!(out, "{t},{x},{}", s[t]);
            }
            None => {
                let _ = writeln!(out, "{t},{x}");
            }
        }
    }
    out
}

/// Long-format heat-map data: one row per `(step, state)` with grid position.
pub fn heatmap_to_string(width: Option<usize>, estimate: &[DenseVector], truth: &[DenseVector]) -> String {
    let mut out = String::from("time_step,state,col,row,estimate,truth\n");
    for (t, (e, g)) in estimate.iter().zip(truth).enumerate() {
        for (s, (x, y)) in e.as_slice().iter().zip(g.as_slice()).enumerate() {
            let (c, r) = match width {
                Some(w) => ((s % w).to_string(), (s / w).to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{t},{s},{c},{r},{x},{y}");
        }
    }
    out
}

/// Per-iteration diagnostics of an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDocument {
    pub variant: Variant,
    pub eps: f64,
    pub converged: bool,
    pub iterations: Vec<EmIteration>,
}

/// Records how a directory of outputs was produced. No timestamps, so reruns
/// are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Output file name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes named files into `dir` plus a `manifest.json` listing their hashes.
pub fn write_outputs(dir: &Path, command: &str, seed: u64, config_json: &str, files: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut hashes = BTreeMap::new();
    for (name, body) in files {
        write_file(&dir.join(name), body)?;
        hashes.insert((*name).to_string(), sha256_hex(body.as_bytes()));
    }
    let manifest = Manifest {
        command: command.to_string(),
        seed,
        config_sha256: sha256_hex(config_json.as_bytes()),
        files: hashes,
    };
    write_file(&dir.join("manifest.json"), &to_json_pretty(&manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flows_round_trip_and_skip_zeros() {
        let m = DenseMatrix::from_rows(vec![vec![0.1, 0.0], vec![1.0 / 3.0, 5e-324]]).unwrap();
        let text = flows_to_string(std::slice::from_ref(&m));
        assert_eq!(text.lines().filter(|l| l.starts_with("0,")).count(), 3);
        assert_eq!(flows_from_str(&text).unwrap(), vec![m]);
    }

    #[test]
    fn marginal_missing_step_is_named() {
        let text = "# states=2\n# steps=3\ntime_step,replica,state,count\n0,0,0,1\n2,0,1,1\n";
        let err = marginals_from_str(text).unwrap_err().to_string();
        assert!(err.contains("time step 1"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_bad_states() {
        let dup = "# states=2\n# steps=1\ntime_step,replica,state,count\n0,0,0,1\n0,0,0,2\n";
        assert!(matches!(marginals_from_str(dup), Err(Error::Schema(_))));
        let oob = "# states=2\n# intervals=1\ntime_step,from_state,to_state,mass\n0,0,2,1\n";
        assert!(matches!(flows_from_str(oob), Err(Error::Schema(_))));
        let neg = "# states=2\n# intervals=1\ntime_step,from_state,to_state,mass\n0,0,1,-1\n";
        assert!(matches!(flows_from_str(neg), Err(Error::Schema(_))));
    }

    #[test]
    fn betas_round_trip() {
        let exps = [0.5, 1.0, 2.0, 3.0];
        let betas = vec![vec![0.0, 0.1, 1.0 / 7.0, -2.5], vec![1.0, 0.0, 0.0, 0.0]];
        let (e, b) = betas_from_str(&betas_to_string(&exps, &betas)).unwrap();
        assert_eq!(e, exps);
        assert_eq!(b, betas);
    }
}
