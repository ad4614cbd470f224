//! CSV and JSON artifact formats.
//!
//! All CSVs are RFC-4180, UTF-8, '.' decimal separator; floats are written
//! with Rust's shortest round-trip formatting so files parse back to
//! bit-identical values.

use nalgebra::{DMatrix, DVector};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use bae_core::sampler::Chain;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("malformed {what} in {path}: {detail}")]
    Malformed {
        what: &'static str,
        path: String,
        detail: String,
    },
}

fn io_err<'a>(path: &'a Path) -> impl FnOnce(std::io::Error) -> IoError + 'a {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err<'a>(path: &'a Path) -> impl FnOnce(csv::Error) -> IoError + 'a {
    move |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(what: &'static str, path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Malformed {
        what,
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write an observation-style vector as `obs_index,value`.
pub fn write_vector_csv(path: &Path, values: &DVector<f64>) -> Result<(), IoError> {
    let mut out = String::from("obs_index,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let v: f64 = record
            .get(1)
            .ok_or_else(|| malformed("vector csv", path, "missing value column"))?
            .parse()
            .map_err(|e| malformed("vector csv", path, format!("{e}")))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(malformed("vector csv", path, "no rows"));
    }
    Ok(DVector::from_vec(values))
}

/// Write a single-row CSV of values (used for the error-mean vector).
pub fn write_row_csv(path: &Path, values: &DVector<f64>) -> Result<(), IoError> {
    let row: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    std::fs::write(path, format!("{}\n", row.join(","))).map_err(io_err(path))
}

pub fn read_row_csv(path: &Path) -> Result<DVector<f64>, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let line = text
        .lines()
        .next()
        .ok_or_else(|| malformed("row csv", path, "empty file"))?;
    let values: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
    values
        .map(DVector::from_vec)
        .map_err(|e| malformed("row csv", path, format!("{e}")))
}

/// Dense matrix as one CSV row per matrix row, no header.
pub fn write_matrix_csv(path: &Path, matrix: &DMatrix<f64>) -> Result<(), IoError> {
    let mut out = String::new();
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{}", matrix[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
        rows.push(row.map_err(|e| malformed("matrix csv", path, format!("{e}")))?);
    }
    if rows.is_empty() {
        return Err(malformed("matrix csv", path, "no rows"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(malformed("matrix csv", path, "ragged rows"));
    }
    let nrows = rows.len();
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Chain CSV: `walker,step,k_1,...,k_d,logpost,accepted`, rows ordered by
/// walker then step.
pub fn write_chain_csv(path: &Path, chain: &Chain) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let d = chain.dim();
    let mut header = String::from("walker,step");
    for i in 1..=d {
        header.push_str(&format!(",k_{i}"));
    }
    header.push_str(",logpost,accepted\n");
    out.write_all(header.as_bytes()).map_err(io_err(path))?;
    for walker in 0..chain.n_walkers() {
        for step in 0..chain.n_steps() {
            let sample = chain.sample(walker, step);
            let mut line = format!("{walker},{step}");
            for v in sample.iter() {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(
                ",{},{}\n",
                chain.logpost(walker, step),
                chain.accepted(walker, step)
            ));
            out.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

/// Sidecar metadata needed to reconstruct a [`Chain`] from its CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChainMeta {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_walkers: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub burn_in_discarded: usize,
    pub acceptance_rates: Vec<f64>,
    pub model_failures: u64,
    pub warnings: Vec<String>,
    pub ensembles: usize,
}

pub fn read_chain_csv(path: &Path, meta: &ChainMeta, ensemble: usize) -> Result<Chain, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let d = meta.dim;
    let n_walkers = meta.n_walkers;
    let n_steps = meta.n_steps;
    let count = n_walkers * n_steps;
    let mut values = vec![DVector::zeros(d); count];
    let mut logpost = vec![0.0; count];
    let mut accepted = vec![false; count];
    let mut seen = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let get = |i: usize| -> Result<&str, IoError> {
            record
                .get(i)
                .ok_or_else(|| malformed("chain csv", path, format!("missing column {i}")))
        };
        let parse_f = |s: &str| -> Result<f64, IoError> {
            s.parse()
                .map_err(|e| malformed("chain csv", path, format!("{e}: {s:?}")))
        };
        let walker: usize = get(0)?
            .parse()
            .map_err(|e| malformed("chain csv", path, format!("{e}")))?;
        let step: usize = get(1)?
            .parse()
            .map_err(|e| malformed("chain csv", path, format!("{e}")))?;
        if walker >= n_walkers || step >= n_steps {
            return Err(malformed(
                "chain csv",
                path,
                format!("walker {walker} / step {step} outside {n_walkers}x{n_steps}"),
            ));
        }
        let mut k = DVector::zeros(d);
        for i in 0..d {
            k[i] = parse_f(get(2 + i)?)?;
        }
        let idx = step * n_walkers + walker;
        values[idx] = k;
        logpost[idx] = parse_f(get(2 + d)?)?;
        accepted[idx] = get(3 + d)? == "true";
        seen += 1;
    }
    if seen != count {
        return Err(malformed(
            "chain csv",
            path,
            format!("expected {count} rows, got {seen}"),
        ));
    }
    let seed = meta.seeds.get(ensemble).copied().unwrap_or(0);
    Chain::from_parts(
        n_walkers,
        n_steps,
        d,
        values,
        logpost,
        accepted,
        seed,
        meta.burn_in_discarded,
        meta.acceptance_rates.get(ensemble).copied().unwrap_or(0.0),
    )
    .map_err(|e| malformed("chain csv", path, e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| malformed("json", path, e.to_string()))?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed("json", path, e.to_string()))
}
