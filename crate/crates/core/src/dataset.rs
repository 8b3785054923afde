//! Multi-environment tabular data: CSV ingestion and export.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scm::{write_samples_csv_named, EnvSample};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_column: String,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// One entry per environment, in order of first appearance.
    pub samples: Vec<EnvSample>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// All non-environment, non-target columns when `None`.
    pub feature_columns: Option<Vec<String>>,
    /// Keeps the first `n` rows of each environment.
    pub max_rows_per_env: Option<usize>,
}

impl Dataset {
    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_envs(&self) -> usize {
        self.samples.len()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        write_samples_csv_named(writer, &self.samples, &self.env_column, &self.feature_names, &self.target_name)
    }
}

pub fn ingest_csv(path: &Path, env_column: &str, target_column: &str, options: &IngestOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, env_column, target_column, options)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    env_column: &str,
    target_column: &str,
    options: &IngestOptions,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let env_idx = find(env_column)?;
    let target_idx = find(target_column)?;
    if env_idx == target_idx {
        return Err(Error::InvalidArgument("environment and target columns coincide".into()));
    }
    let feature_idx: Vec<usize> = match &options.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&i| i != env_idx && i != target_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::InvalidArgument("no feature columns".into()));
    }
    if feature_idx.iter().any(|&i| i == env_idx || i == target_idx) {
        return Err(Error::InvalidArgument("feature columns overlap the environment or target column".into()));
    }
    let d = feature_idx.len();

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let parse = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            let err = |message: String| Error::Parse { row, column: header[col].clone(), message };
            let v: f64 = raw.parse().map_err(|_| err(format!("'{raw}' is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("'{raw}' is not finite")))
            }
        };
        let env = record.get(env_idx).unwrap_or("").to_string();
        let entry = rows.entry(env.clone()).or_insert_with(|| {
            order.push(env);
            (Vec::new(), Vec::new())
        });
        if options.max_rows_per_env.is_some_and(|m| entry.1.len() >= m) {
            continue;
        }
        for &c in &feature_idx {
            entry.0.push(parse(c)?);
        }
        entry.1.push(parse(target_idx)?);
    }
    if order.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 environments, found {}",
            order.len()
        )));
    }
    let samples = order
        .iter()
        .map(|env| {
            let (x, y) = rows.remove(env).expect("environment recorded");
            let n = y.len();
            if n < d + 3 {
                return Err(Error::TooFewRows { env: env.clone(), rows: n, needed: d + 3 });
            }
            EnvSample::new(env.clone(), DMatrix::from_row_slice(n, d, &x), DVector::from_vec(y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        env_column: env_column.to_string(),
        feature_names: feature_idx.iter().map(|&i| header[i].clone()).collect(),
        target_name: target_column.to_string(),
        samples,
    })
}
