//! Susceptibility matrices and token metadata: on-disk formats, validation
//! and the column/row preprocessing applied before graph construction.
//!
//! Matrix file: `"SUSC"`, u32 version (1), u64 n, u64 H, then `n * H`
//! little-endian f32 values, row-major. An optional JSON sidecar
//! `<stem>.meta.json` next to the matrix carries component labels, row ids
//! and the record of any transform applied.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::exact_sum;

const MATRIX_MAGIC: &[u8; 4] = b"SUSC";
const MATRIX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("matrix format error: {0}")]
    Format(String),
    #[error("matrix payload has {found} bytes but the header declares {expected}")]
    Truncated { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    Data { row: usize, col: usize },
    #[error("preprocessing needs at least 2 rows, got {0}")]
    InsufficientData(usize),
    #[error("every column has zero variance")]
    EmptyMatrix,
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{records} metadata records cannot pair with a {rows}-row matrix")]
    Pairing { records: usize, rows: usize },
    #[error("sidecar error: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense n x H matrix of per-token susceptibilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SusceptibilityMatrix {
    n: usize,
    h: usize,
    values: Vec<f64>,
    pub row_ids: Vec<String>,
    pub component_ids: Vec<String>,
}

impl SusceptibilityMatrix {
    /// Row ids default to `0..n` and component ids to `c0..c{H-1}`.
    pub fn new(n: usize, h: usize, values: Vec<f64>) -> Result<Self, IngestError> {
        if n == 0 || h == 0 {
            return Err(IngestError::Format(format!("empty matrix shape {n} x {h}")));
        }
        if values.len() != n * h {
            return Err(IngestError::Format(format!(
                "{} values do not fill a {n} x {h} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::Data { row: i / h, col: i % h });
        }
        Ok(Self {
            n,
            h,
            values,
            row_ids: (0..n).map(|i| i.to_string()).collect(),
            component_ids: (0..h).map(|j| format!("c{j}")).collect(),
        })
    }

    pub fn with_ids(mut self, row_ids: Vec<String>, component_ids: Vec<String>) -> Result<Self, IngestError> {
        if row_ids.len() != self.n || component_ids.len() != self.h {
            return Err(IngestError::Sidecar(format!(
                "{} row ids / {} component ids for a {} x {} matrix",
                row_ids.len(),
                component_ids.len(),
                self.n,
                self.h
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = row_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(IngestError::Sidecar(format!("duplicate row id {dup:?}")));
        }
        self.row_ids = row_ids;
        self.component_ids = component_ids;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.h..(i + 1) * self.h]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.h + j]
    }
}

/// Record of the preprocessing transform, stored in the sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    /// Pipeline order, always `["drop_constant", "standardize", "row_center"]`.
    pub steps: Vec<String>,
    /// Per original column; dropped columns keep their mean and a std of 0.
    pub column_means: Vec<f64>,
    pub column_stds: Vec<f64>,
    pub dropped_columns: Vec<usize>,
    /// Population standard deviation (divide by n).
    pub std_convention: String,
}

/// JSON sidecar stored next to a matrix file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixSidecar {
    pub component_ids: Option<Vec<String>>,
    pub row_ids: Option<Vec<String>>,
    pub transform: Option<TransformRecord>,
}

/// `dir/stem.susc` -> `dir/stem.meta.json`.
pub fn sidecar_path(matrix: &Path) -> PathBuf {
    let stem = matrix
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    matrix.with_file_name(format!("{stem}.meta.json"))
}

/// Load a matrix file and, if present, its sidecar.
pub fn load_matrix(path: &Path) -> Result<SusceptibilityMatrix, IngestError> {
    let (m, _) = load_matrix_with_sidecar(path)?;
    Ok(m)
}

pub fn load_matrix_with_sidecar(path: &Path) -> Result<(SusceptibilityMatrix, Option<MatrixSidecar>), IngestError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let m = decode_matrix(&bytes)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok((m, None));
    }
    let meta: MatrixSidecar = serde_json::from_reader(BufReader::new(File::open(&side)?))
        .map_err(|e| IngestError::Sidecar(format!("{}: {e}", side.display())))?;
    let rows = meta.row_ids.clone().unwrap_or_else(|| m.row_ids.clone());
    let comps = meta.component_ids.clone().unwrap_or_else(|| m.component_ids.clone());
    let m = m.with_ids(rows, comps)?;
    Ok((m, Some(meta)))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<SusceptibilityMatrix, IngestError> {
    if bytes.len() < HEADER_LEN {
        return Err(IngestError::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(IngestError::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(IngestError::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let h = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if n == 0 || h == 0 {
        return Err(IngestError::Format(format!("empty shape {n} x {h}")));
    }
    let expected = n
        .checked_mul(h)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| IngestError::Format(format!("shape {n} x {h} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(IngestError::Truncated {
            expected,
            found: payload.len() as u64,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SusceptibilityMatrix::new(n as usize, h as usize, values)
}

/// Write the matrix file (values rounded to f32) and, when `sidecar` is
/// given, its JSON sidecar.
pub fn save_matrix(path: &Path, m: &SusceptibilityMatrix, sidecar: Option<&MatrixSidecar>) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.n as u64).to_le_bytes())?;
    w.write_all(&(m.h as u64).to_le_bytes())?;
    for &v in &m.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    if let Some(meta) = sidecar {
        let f = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(f, meta).map_err(|e| IngestError::Sidecar(e.to_string()))?;
    }
    Ok(())
}

/// Standardized, row-centered matrix plus the transform that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedMatrix {
    pub matrix: SusceptibilityMatrix,
    pub transform: TransformRecord,
}

impl PreprocessedMatrix {
    pub fn values(&self) -> &[f64] {
        self.matrix.values()
    }

    pub fn sidecar(&self) -> MatrixSidecar {
        MatrixSidecar {
            component_ids: Some(self.matrix.component_ids.clone()),
            row_ids: Some(self.matrix.row_ids.clone()),
            transform: Some(self.transform.clone()),
        }
    }
}

/// Drop constant columns, standardize the rest (population std), then
/// subtract each row's mean.
pub fn preprocess(m: &SusceptibilityMatrix) -> Result<PreprocessedMatrix, IngestError> {
    let (n, h) = (m.n, m.h);
    if n < 2 {
        return Err(IngestError::InsufficientData(n));
    }
    let mut means = Vec::with_capacity(h);
    let mut stds = Vec::with_capacity(h);
    let mut dropped = Vec::new();
    for j in 0..h {
        let col = (0..n).map(|i| m.get(i, j));
        let mean = exact_sum(col.clone()) / n as f64;
        let var = exact_sum(col.clone().map(|x| (x - mean) * (x - mean))) / n as f64;
        let first = m.get(0, j);
        let constant = col.clone().all(|x| x == first);
        if constant || var <= 0.0 {
            dropped.push(j);
            means.push(mean);
            stds.push(0.0);
        } else {
            means.push(mean);
            stds.push(var.sqrt());
        }
    }
    let kept: Vec<usize> = (0..h).filter(|j| stds[*j] > 0.0).collect();
    if kept.is_empty() {
        return Err(IngestError::EmptyMatrix);
    }
    let hk = kept.len();
    let mut out = Vec::with_capacity(n * hk);
    for i in 0..n {
        let start = out.len();
        out.extend(kept.iter().map(|&j| (m.get(i, j) - means[j]) / stds[j]));
        let row = &mut out[start..];
        let mu = exact_sum(row.iter().copied()) / hk as f64;
        for v in row.iter_mut() {
            *v -= mu;
        }
    }
    let component_ids = kept.iter().map(|&j| m.component_ids[j].clone()).collect();
    let matrix = SusceptibilityMatrix::new(n, hk, out)?.with_ids(m.row_ids.clone(), component_ids)?;
    Ok(PreprocessedMatrix {
        matrix,
        transform: TransformRecord {
            steps: vec!["drop_constant".into(), "standardize".into(), "row_center".into()],
            column_means: means,
            column_stds: stds,
            dropped_columns: dropped,
            std_convention: "population".into(),
        },
    })
}

/// One token occurrence: a context and the token that followed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub context: Vec<u32>,
    pub target: u32,
    pub dataset_tag: String,
    pub decoded_target: String,
}

#[derive(Deserialize)]
struct RawRecord {
    context: Option<Vec<u32>>,
    target: Option<u32>,
    dataset_tag: Option<String>,
    decoded_target: Option<String>,
}

/// Parse newline-delimited JSON token records. Blank lines are skipped; line
/// numbers in errors are 1-based. With `vocab_size`, targets and context ids
/// must lie below it.
pub fn parse_token_metadata(reader: impl BufRead, vocab_size: Option<u32>) -> Result<Vec<TokenRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| IngestError::Schema { line: lineno, message };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let missing = |f: &str| schema(format!("missing field `{f}`"));
        let rec = TokenRecord {
            context: raw.context.ok_or_else(|| missing("context"))?,
            target: raw.target.ok_or_else(|| missing("target"))?,
            dataset_tag: raw.dataset_tag.ok_or_else(|| missing("dataset_tag"))?,
            decoded_target: raw.decoded_target.ok_or_else(|| missing("decoded_target"))?,
        };
        if rec.context.is_empty() {
            return Err(schema("context must contain at least one token".into()));
        }
        if let Some(v) = vocab_size {
            if let Some(bad) = rec.context.iter().chain([&rec.target]).find(|&&t| t >= v) {
                return Err(schema(format!("token id {bad} outside vocabulary of size {v}")));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_token_metadata(path: &Path) -> Result<Vec<TokenRecord>, IngestError> {
    parse_token_metadata(BufReader::new(File::open(path)?), None)
}

pub fn save_token_metadata(path: &Path, records: &[TokenRecord]) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IngestError::Sidecar(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Records pair with matrix rows by line order.
pub fn check_pairing(m: &SusceptibilityMatrix, records: &[TokenRecord]) -> Result<(), IngestError> {
    if records.len() != m.rows() {
        return Err(IngestError::Pairing {
            records: records.len(),
            rows: m.rows(),
        });
    }
    Ok(())
}
