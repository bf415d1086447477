//! Readers and writers for datasets, draw matrices and result tables.
//!
//! Matrices come either as delimited text (a header row of column names,
//! then numeric rows, comma- or tab-separated) or as a small binary format:
//! the 8-byte magic `BSSDRAW1`, row and column counts as little-endian
//! `u64`, then `rows * cols` little-endian `f64` values in row-major order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::action::Interval;
use crate::backend::{Dataset, LikelihoodSpec, PosteriorDraws, PredictiveDraws, ResponseKind};
use crate::error::{Error, Result};
use crate::evaluate::SubsetLosses;
use crate::importance::ImportanceMatrix;

pub const BINARY_MAGIC: &[u8; 8] = b"BSSDRAW1";
const BINARY_HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub names: Vec<String>,
    pub data: DMatrix<f64>,
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Parse delimited text with a header row. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_delimited_matrix(text: &str) -> Result<LabeledMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(Error::parse(1, "missing header row"));
    }
    if let Some(dup) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
        return Err(Error::parse(1, format!("duplicate column name `{}`", dup.1)));
    }
    let cols = names.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != cols {
            return Err(Error::parse(line, format!("expected {cols} fields, found {}", rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(line, format!("column `{}`: `{field}` is not a number", names[c])))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("column `{}`: non-finite value", names[c])));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(LabeledMatrix {
        names,
        data: DMatrix::from_row_slice(rows, cols, &values),
    })
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

pub fn is_binary_matrix(bytes: &[u8]) -> bool {
    bytes.starts_with(BINARY_MAGIC)
}

pub fn parse_binary_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < BINARY_HEADER || !is_binary_matrix(bytes) {
        return Err(Error::parse(0, "not a binary draw matrix"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8), word(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|b| b.checked_add(BINARY_HEADER as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::parse(
            0,
            format!("{rows}x{cols} matrix does not match payload of {} bytes", bytes.len()),
        ));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in bytes[BINARY_HEADER..].chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::parse(0, "non-finite value in binary matrix"));
        }
        values.push(v);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_binary_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + 8 * m.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

/// Delimited text with a header row; values use Rust's shortest
/// round-trip formatting.
pub fn write_delimited_matrix(names: &[String], m: &DMatrix<f64>) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", m[(i, j)]).expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Parse either format, sniffing the binary magic.
pub fn parse_matrix_bytes(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if is_binary_matrix(bytes) {
        return parse_binary_matrix(bytes);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(0, format!("invalid UTF-8: {e}")))?;
    Ok(parse_delimited_matrix(text)?.data)
}

pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_bytes(&bytes).map_err(|e| match e {
        Error::Parse { line, msg } => Error::parse(line, format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Build a dataset from delimited text. Every column except `response`
/// becomes a covariate; with `add_intercept`, an all-ones `intercept`
/// column is prepended unless one is already present.
pub fn parse_dataset(text: &str, response: &str, add_intercept: bool, kind: ResponseKind) -> Result<Dataset> {
    let m = parse_delimited_matrix(text)?;
    let r = m
        .names
        .iter()
        .position(|n| n == response)
        .ok_or_else(|| Error::input(format!("response column `{response}` not found")))?;
    let n = m.data.nrows();
    let cov: Vec<usize> = (0..m.names.len()).filter(|&j| j != r).collect();
    let has_ones = cov.iter().any(|&j| n > 0 && m.data.column(j).iter().all(|&v| v == 1.0));
    let lead = usize::from(add_intercept && !has_ones);
    let x = DMatrix::from_fn(n, cov.len() + lead, |i, j| if j < lead { 1.0 } else { m.data[(i, cov[j - lead])] });
    let mut names: Vec<String> = Vec::new();
    if lead == 1 {
        names.push("intercept".into());
    }
    names.extend(cov.iter().map(|&j| m.names[j].clone()));
    Dataset::new(x, m.data.column(r).into_owned(), names, kind)
}

pub fn write_dataset(data: &Dataset, response: &str) -> String {
    let mut names: Vec<String> = data.column_names().to_vec();
    names.push(response.to_string());
    let m = DMatrix::from_fn(data.n(), data.p() + 1, |i, j| if j < data.p() { data.x()[(i, j)] } else { data.y()[i] });
    write_delimited_matrix(&names, &m)
}

/// Describes externally produced draws: paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawManifest {
    pub likelihood: LikelihoodSpec,
    /// `S × p` coefficient draws.
    pub beta: PathBuf,
    /// One error-scale draw per row (required for the Gaussian likelihood).
    #[serde(default)]
    pub sigma: Option<PathBuf>,
    /// Optional `S × ñ` predictive draws at the target covariates.
    #[serde(default)]
    pub ytilde: Option<PathBuf>,
}

pub fn parse_manifest(text: &str) -> Result<DrawManifest> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
        Error::parse(line, e.message().to_string())
    })
}

/// Write posterior draws as `{stem}_beta.bin`, `{stem}_sigma.csv` (when
/// present) and a manifest `{stem}.toml` in `dir`; returns the manifest path.
pub fn export_draws(draws: &PosteriorDraws, dir: &Path, stem: &str) -> Result<PathBuf> {
    let likelihood = draws
        .likelihood()
        .ok_or_else(|| Error::input("draws without a likelihood cannot be exported for ingestion"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let beta = PathBuf::from(format!("{stem}_beta.bin"));
    let path = dir.join(&beta);
    std::fs::write(&path, write_binary_matrix(draws.beta())).map_err(|e| Error::io(&path, e))?;
    let sigma = match draws.sigma() {
        Some(v) => {
            let name = PathBuf::from(format!("{stem}_sigma.csv"));
            let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
            let path = dir.join(&name);
            std::fs::write(&path, write_delimited_matrix(&["sigma".to_string()], &m)).map_err(|e| Error::io(&path, e))?;
            Some(name)
        }
        None => None,
    };
    let manifest = DrawManifest {
        likelihood,
        beta,
        sigma,
        ytilde: None,
    };
    let path = dir.join(format!("{stem}.toml"));
    let text = toml::to_string(&manifest).map_err(|e| Error::input(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct IngestedDraws {
    pub posterior: PosteriorDraws,
    pub predictive: Option<PredictiveDraws>,
}

pub fn ingest_draws(manifest_path: &Path) -> Result<IngestedDraws> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = parse_manifest(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let beta = read_matrix_file(&base.join(&manifest.beta))?;
    let sigma = match &manifest.sigma {
        Some(p) => {
            let m = read_matrix_file(&base.join(p))?;
            if m.ncols() != 1 {
                return Err(Error::dim(format!("sigma draws must be a single column, got {}", m.ncols())));
            }
            Some(DVector::from_column_slice(m.as_slice()))
        }
        None => None,
    };
    let posterior = PosteriorDraws::new(beta, sigma, Some(manifest.likelihood))?;
    let predictive = match &manifest.ytilde {
        Some(p) => {
            let path = base.join(p);
            let m = read_matrix_file(&path)?;
            if m.nrows() != posterior.count() {
                return Err(Error::dim(format!(
                    "{} predictive draw rows for {} posterior draws",
                    m.nrows(),
                    posterior.count()
                )));
            }
            Some(PredictiveDraws::new(m, path.display().to_string())?)
        }
        None => None,
    };
    Ok(IngestedDraws { posterior, predictive })
}

pub fn subset_label(indices: &[usize]) -> String {
    indices.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// `subset_id,size,indices` for every evaluated subset.
pub fn subsets_table(losses: &SubsetLosses) -> String {
    let mut out = String::from("subset_id,size,indices\n");
    for (id, s) in losses.subsets.iter().enumerate() {
        writeln!(out, "{id},{},{}", s.len(), subset_label(s.indices())).expect("write to string");
    }
    out
}

/// One row per (subset, fold, statistic); fold `all` holds the K-fold averages.
pub fn loss_table(losses: &SubsetLosses) -> String {
    let mut out = String::from("subset_id,fold,statistic,value\n");
    for id in 0..losses.len() {
        if let Some(e) = &losses.empirical {
            for (k, v) in losses.fold_empirical[id].iter().enumerate() {
                writeln!(out, "{id},{k},empirical,{v}").expect("write to string");
            }
            writeln!(out, "{id},all,empirical,{}", e[id]).expect("write to string");
        }
        for (k, v) in losses.fold_predictive_mean[id].iter().enumerate() {
            writeln!(out, "{id},{k},predictive_mean,{v}").expect("write to string");
        }
        writeln!(out, "{id},all,predictive_mean,{}", losses.predictive_mean(id)).expect("write to string");
    }
    out
}

/// Predictive loss draws keyed by (subset, draw position).
pub fn loss_draws_table(losses: &SubsetLosses) -> String {
    let mut out = String::from("subset_id,draw,value\n");
    for (id, draws) in losses.predictive.iter().enumerate() {
        for (t, v) in draws.iter().enumerate() {
            writeln!(out, "{id},{t},{v}").expect("write to string");
        }
    }
    out
}

/// Importance matrix with labeled rows and columns.
pub fn vi_table(im: &ImportanceMatrix, names: &[String]) -> String {
    let mut out = String::from("covariate");
    for n in names {
        write!(out, ",{n}").expect("write to string");
    }
    out.push('\n');
    for j in 0..im.p() {
        out.push_str(&names[j]);
        for l in 0..im.p() {
            write!(out, ",{}", im.get(j, l)).expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Per-covariate point estimate and interval for a predictive action.
pub fn coefficient_table(names: &[String], mean: &DVector<f64>, intervals: &[Interval]) -> String {
    let mut out = String::from("covariate,mean,lower,upper\n");
    for (j, n) in names.iter().enumerate() {
        writeln!(out, "{n},{},{},{}", mean[j], intervals[j].lower, intervals[j].upper).expect("write to string");
    }
    out
}
