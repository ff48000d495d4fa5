//! Matrix and label file formats, and clustering accuracy under the best
//! one-to-one matching of clusters to classes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{self, CoefficientPrior, Purpose, RngKey, SyntheticConfig};
use crate::error::{DbmdError, Result};
use crate::model::Hyperparams;
use crate::numerics::Matrix;
use crate::runtime::{Cluster, CommLedger, Execution};
use crate::w_solvers::{self, Strategy, WUpdateOptions};

pub const BIN_MAGIC: &[u8; 5] = b"DBMD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    /// One sample per row, comma separated, optional header row.
    Csv,
    /// `DBMD1`, rows and cols as little-endian u64, then column-major
    /// little-endian f64 entries.
    Bin,
}

impl MatrixFormat {
    /// `.bin` selects the binary format, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("bin") => MatrixFormat::Bin,
            _ => MatrixFormat::Csv,
        }
    }
}

impl std::str::FromStr for MatrixFormat {
    type Err = DbmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(DbmdError::invalid(format!("unknown matrix format '{other}' (expected csv or bin)"))),
        }
    }
}

/// Loads a features × samples matrix; CSV rows become columns.
pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<Matrix> {
    match format {
        MatrixFormat::Csv => parse_csv(&fs::read(path)?),
        MatrixFormat::Bin => parse_bin(&fs::read(path)?),
    }
}

pub fn save_matrix(path: &Path, x: &Matrix, format: MatrixFormat) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    match format {
        MatrixFormat::Csv => {
            for col in x.column_iter() {
                let line = col.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",");
                writeln!(out, "{line}")?;
            }
        }
        MatrixFormat::Bin => {
            out.write_all(BIN_MAGIC)?;
            out.write_all(&(x.nrows() as u64).to_le_bytes())?;
            out.write_all(&(x.ncols() as u64).to_le_bytes())?;
            for v in x.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_error(location: String, message: impl Into<String>) -> DbmdError {
    DbmdError::Parse { location, message: message.into() }
}

pub fn parse_csv(bytes: &[u8]) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut width: Option<usize> = None;
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(idx as u64 + 1, |p| p.line());
            parse_error(format!("line {line}"), e.to_string())
        })?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if idx == 0 => {
                width = Some(record.len());
                continue;
            }
            Err(e) => return Err(parse_error(format!("line {line}"), format!("invalid number: {e}"))),
        };
        match width {
            Some(w) if w != values.len() => {
                return Err(parse_error(
                    format!("line {line}"),
                    format!("expected {w} fields, found {}", values.len()),
                ));
            }
            None => width = Some(values.len()),
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let m = width.unwrap_or(0);
    if rows == 0 || m == 0 {
        return Err(parse_error("line 1".into(), "no numeric rows"));
    }
    // rows of the file are samples, i.e. columns of the matrix
    Ok(Matrix::from_vec(m, rows, data))
}

pub fn parse_bin(bytes: &[u8]) -> Result<Matrix> {
    let header = BIN_MAGIC.len() + 16;
    if bytes.len() < BIN_MAGIC.len() || &bytes[..BIN_MAGIC.len()] != BIN_MAGIC {
        return Err(parse_error("byte 0".into(), "missing DBMD1 magic"));
    }
    if bytes.len() < header {
        return Err(parse_error(format!("byte {}", bytes.len()), "truncated header"));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
    let m = read_u64(5) as usize;
    let n = read_u64(13) as usize;
    let count = m
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| parse_error("byte 5".into(), format!("dimensions {m}x{n} overflow")))?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(parse_error(
            format!("byte {}", bytes.len()),
            format!("truncated data: expected {expected} bytes for {m}x{n}"),
        ));
    }
    if bytes.len() > expected {
        return Err(parse_error(format!("byte {expected}"), "trailing bytes after matrix data"));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Matrix::from_vec(m, n, data))
}

/// One non-negative integer label per line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v = t
            .parse::<usize>()
            .map_err(|e| parse_error(format!("line {}", i + 1), format!("invalid label '{t}': {e}")))?;
        labels.push(v);
    }
    Ok(labels)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for l in labels {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

/// Features × samples data with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        let classes = match &labels {
            Some(l) => {
                if l.len() != x.ncols() {
                    return Err(DbmdError::invalid(format!("{} labels for {} samples", l.len(), x.ncols())));
                }
                l.iter().max().map_or(0, |&k| k + 1)
            }
            None => 0,
        };
        Ok(LabeledDataset { x, labels, classes })
    }

    pub fn load(data: &Path, format: MatrixFormat, labels: Option<&Path>) -> Result<Self> {
        let x = load_matrix(data, format)?;
        let labels = labels.map(load_labels).transpose()?;
        LabeledDataset::new(x, labels)
    }
}

/// Fraction of samples whose predicted cluster maps to their class under the
/// count-maximizing one-to-one assignment.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize], k_pred: usize, k_true: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(DbmdError::invalid("accuracy needs at least one label"));
    }
    if pred.len() != truth.len() {
        return Err(DbmdError::invalid(format!("{} predictions for {} true labels", pred.len(), truth.len())));
    }
    if let Some(&p) = pred.iter().find(|&&p| p >= k_pred) {
        return Err(DbmdError::invalid(format!("predicted label {p} outside 0..{k_pred}")));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= k_true) {
        return Err(DbmdError::invalid(format!("true label {t} outside 0..{k_true}")));
    }
    let k = k_pred.max(k_true);
    let mut counts = vec![vec![0.0f64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|row| row.iter().map(|c| -c).collect()).collect();
    let assignment = min_cost_assignment(&cost);
    let matched: f64 = assignment.iter().enumerate().map(|(i, &j)| counts[i][j]).sum();
    Ok(matched / pred.len() as f64)
}

/// Row-to-column assignment minimizing the total cost of a square matrix
/// (shortest augmenting paths with potentials, O(k³)).
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let c = |i: usize, j: usize| cost[i - 1][j - 1];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Reorders the columns of `estimate` to best match `truth` (minimum summed
/// squared column distance) and returns the reordered matrix.
pub fn match_columns(estimate: &Matrix, truth: &Matrix) -> Result<Matrix> {
    if estimate.shape() != truth.shape() {
        return Err(DbmdError::shape("match_columns", truth.shape(), estimate.shape()));
    }
    let r = truth.ncols();
    let cost: Vec<Vec<f64>> = (0..r)
        .map(|i| (0..r).map(|j| (estimate.column(j) - truth.column(i)).norm_squared()).collect())
        .collect();
    // assignment[i]: estimated column matched to true column i
    let assignment = min_cost_assignment(&cost);
    Ok(estimate.select_columns(&assignment))
}

/// Basis error `‖Ŵ − W‖_F` after matching columns.
pub fn basis_error(estimate: &Matrix, truth: &Matrix) -> Result<f64> {
    Ok((match_columns(estimate, truth)? - truth).norm())
}

/// One basis update on block-basis data with known coefficients, tracing
/// the basis objective per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceExperiment {
    pub strategy: Strategy,
    pub n_c: usize,
    pub shards: usize,
    pub coefficients: CoefficientPrior,
    pub sigma: f64,
    pub seed: u64,
    pub hp: Hyperparams,
}

impl ConvergenceExperiment {
    /// `r = 20`, five shards, unit noise, Bernoulli(1/20) coefficients.
    pub fn bernoulli(strategy: Strategy, n_c: usize, seed: u64) -> Self {
        ConvergenceExperiment {
            strategy,
            n_c,
            shards: 5,
            coefficients: CoefficientPrior::Bernoulli { p: 0.05 },
            sigma: 1.0,
            seed,
            hp: Hyperparams::new(20),
        }
    }

    /// As [`ConvergenceExperiment::bernoulli`] with Dirichlet(1) coefficients.
    pub fn dirichlet(strategy: Strategy, n_c: usize, seed: u64) -> Self {
        ConvergenceExperiment {
            coefficients: CoefficientPrior::Dirichlet { alpha0: vec![1.0; 20] },
            ..Self::bernoulli(strategy, n_c, seed)
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            a: 1.5,
            l: 20,
            coh: 2,
            rank: self.hp.rank,
            shard_sizes: vec![self.n_c; self.shards],
            sigmas: vec![self.sigma; self.shards],
            coefficients: self.coefficients.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub strategy: Strategy,
    pub n_c: usize,
    pub rounds: usize,
    pub converged: bool,
    pub objectives: Vec<f64>,
    pub ledger: CommLedger,
}

/// Starts from a basis with entries uniform on [0, 1) drawn from the seed.
pub fn run_convergence(exp: &ConvergenceExperiment) -> Result<ConvergenceTrace> {
    let data = datagen::generate(&exp.synthetic_config())?;
    let (m, r) = data.w.shape();
    let mut rng = RngKey::stream(exp.seed, Purpose::InitBasis, 0, 0).rng();
    let mut w = Matrix::from_fn(m, r, |_, _| rand::Rng::random::<f64>(&mut rng));
    let mut cluster = Cluster::new(data.shards, data.hs, &w, Execution::from_env())?;
    let mut ledger = CommLedger::default();
    let opts = WUpdateOptions { record_objective: true, record_iterates: false };
    let out = w_solvers::run_w_update(exp.strategy, &mut cluster, &mut w, &exp.hp, &mut ledger, &opts)?;
    Ok(ConvergenceTrace {
        strategy: exp.strategy,
        n_c: exp.n_c,
        rounds: out.rounds,
        converged: out.converged,
        objectives: out.objectives,
        ledger,
    })
}

/// Long-format CSV: `solver,n_c,iteration,objective`, iterations from 1.
pub fn write_convergence_csv<W: Write>(out: W, traces: &[ConvergenceTrace]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| DbmdError::invalid(format!("cannot write CSV row: {e}"));
    writer.write_record(["solver", "n_c", "iteration", "objective"]).map_err(to_err)?;
    for t in traces {
        for (i, obj) in t.objectives.iter().enumerate() {
            writer
                .write_record([t.strategy.name().to_string(), t.n_c.to_string(), (i + 1).to_string(), format!("{obj:.17e}")])
                .map_err(to_err)?;
        }
    }
    writer.flush()?;
    Ok(())
}
