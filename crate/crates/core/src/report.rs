//! Serializable result records and report persistence.
//!
//! Every persisted artifact carries a `schema_version`; loading rejects
//! mismatched versions and any payload containing a non-finite number,
//! naming the offending field.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{QrError, Result};

/// Version stamp written into every persisted report.
pub const SCHEMA_VERSION: u32 = 1;

/// Serde adapter storing a DMatrix as {nrows, ncols, data(row-major)}.
pub mod dmatrix_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        nrows: usize,
        ncols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Repr {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        let repr = Repr::deserialize(d)?;
        if repr.data.len() != repr.nrows * repr.ncols {
            return Err(serde::de::Error::custom(format!(
                "matrix payload has {} entries for shape {}x{}",
                repr.data.len(),
                repr.nrows,
                repr.ncols
            )));
        }
        Ok(DMatrix::from_fn(repr.nrows, repr.ncols, |r, c| {
            repr.data[r * repr.ncols + c]
        }))
    }
}

/// Serde adapter storing a DVector as a plain list.
pub mod dvector_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// One fitted quantile, in stable field names for downstream tooling.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitRecord {
    pub tau: f64,
    pub beta_hat: Vec<f64>,
    pub basis: Vec<usize>,
    pub objective: f64,
    pub pivot_count: usize,
    pub degenerate: bool,
}

impl FitRecord {
    pub fn from_fit(fit: &crate::solver::QuantileFit) -> Self {
        FitRecord {
            tau: fit.tau,
            beta_hat: fit.beta_hat.iter().cloned().collect(),
            basis: fit.basis.clone(),
            objective: fit.objective,
            pivot_count: fit.pivot_count,
            degenerate: fit.degenerate,
        }
    }
}

/// Envelope wrapping any payload with its schema version.
#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    payload: T,
}

/// Persist a report as pretty JSON with a schema version stamp.
pub fn persist_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        payload: report,
    };
    let value = serde_json::to_value(&envelope)
        .map_err(|e| QrError::invalid(format!("serialization failed: {e}")))?;
    if let Some(field) = find_non_finite(&value, "$") {
        return Err(QrError::NonFinite { field });
    }
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| QrError::invalid(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(|source| QrError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a report persisted by [`persist_report`], checking version and
/// rejecting non-finite numbers by field path.
pub fn load_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| QrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| QrError::Parse {
        path: path.display().to_string(),
        row: e.line(),
        column: e.column().to_string(),
        message: e.to_string(),
    })?;
    let version = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| QrError::SchemaMismatch {
            found: "missing".into(),
            expected: SCHEMA_VERSION.to_string(),
        })?;
    if version != SCHEMA_VERSION as u64 {
        return Err(QrError::SchemaMismatch {
            found: version.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    if let Some(field) = find_non_finite(&value, "$") {
        return Err(QrError::NonFinite { field });
    }
    let envelope: Envelope<T> = serde_json::from_value(value).map_err(|e| QrError::Parse {
        path: path.display().to_string(),
        row: 0,
        column: String::new(),
        message: e.to_string(),
    })?;
    Ok(envelope.payload)
}

/// Walk a JSON value looking for NaN/infinite numbers (serde_json encodes
/// them as null from f64, so also treat null inside numeric arrays as
/// non-finite) and report the first offending path.
fn find_non_finite(value: &Value, path: &str) -> Option<String> {
    match value {
        Value::Number(n) => {
            if n.as_f64().map(|f| !f.is_finite()).unwrap_or(false) {
                Some(path.to_string())
            } else {
                None
            }
        }
        Value::Array(items) => {
            let numeric_context = items.iter().any(Value::is_number);
            for (i, item) in items.iter().enumerate() {
                let sub = format!("{path}[{i}]");
                if item.is_null() && numeric_context {
                    return Some(sub);
                }
                if let Some(found) = find_non_finite(item, &sub) {
                    return Some(found);
                }
            }
            None
        }
        Value::Object(map) => {
            for (k, v) in map {
                let sub = format!("{path}.{k}");
                if let Some(found) = find_non_finite(v, &sub) {
                    return Some(found);
                }
            }
            None
        }
        _ => None,
    }
}

/// Write rows as a CSV table with the given header.
pub fn write_csv_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        QrError::invalid(format!("cannot open {} for writing: {e}", path.display()))
    })?;
    w.write_record(header)
        .and_then(|_| {
            for row in rows {
                w.write_record(row)?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| QrError::invalid(format!("csv write failed: {e}")))?;
    Ok(())
}
