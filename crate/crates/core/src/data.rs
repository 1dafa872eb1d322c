//! Dataset model, CSV ingestion and structural validation of the study design.
//!
//! One row per household: binary treatment `z` (possesses the card), binary
//! usage `d` (uses the card), continuous outcome `y`, and a covariate vector.
//! Usage is only possible under treatment, so `z = 0` forces `d = 0`.

use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

/// A single observational unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub z: bool,
    pub d: bool,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Principal stratum of a unit under a binary usage variable with monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumLabel {
    Complier,
    NeverUser,
}

impl StratumLabel {
    /// Observed stratum, available only for treated units.
    pub fn observed(unit: &Unit) -> Option<StratumLabel> {
        match (unit.z, unit.d) {
            (true, true) => Some(StratumLabel::Complier),
            (true, false) => Some(StratumLabel::NeverUser),
            (false, _) => None,
        }
    }
}

impl fmt::Display for StratumLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StratumLabel::Complier => f.write_str("complier"),
            StratumLabel::NeverUser => f.write_str("never_user"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("no covariate columns besides z, d, y")]
    NoCovariates,
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("row {row}: column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("unit {row}: covariate vector has length {found}, schema has {expected}")]
    CovariateLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("unit {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("monotonicity violated (z = 0 with d = 1) at rows {0:?}")]
    Monotonicity(Vec<usize>),
    #[error("dataset not usable for estimation: {0}")]
    Unusable(String),
}

/// An ordered, immutable collection of units sharing one covariate schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Unit>,
    schema: Vec<String>,
    span_label: String,
}

impl Dataset {
    /// Builds a dataset, checking covariate lengths and finiteness.
    ///
    /// Design-level conditions (monotonicity, nonempty arms) are left to
    /// [`Dataset::validate`], so that a report can be produced for them.
    pub fn new(
        units: Vec<Unit>,
        schema: Vec<String>,
        span_label: impl Into<String>,
    ) -> Result<Self, DataError> {
        for (i, u) in units.iter().enumerate() {
            if u.x.len() != schema.len() {
                return Err(DataError::CovariateLength {
                    row: i,
                    expected: schema.len(),
                    found: u.x.len(),
                });
            }
            if !u.y.is_finite() {
                return Err(DataError::NonFinite {
                    row: i,
                    column: "y".into(),
                });
            }
            if let Some(j) = u.x.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    row: i,
                    column: schema[j].clone(),
                });
            }
        }
        Ok(Dataset {
            units,
            schema,
            span_label: span_label.into(),
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn span_label(&self) -> &str {
        &self.span_label
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.z).count()
    }

    /// Relative frequency of treated units.
    pub fn treated_share(&self) -> f64 {
        self.n_treated() as f64 / self.len() as f64
    }

    /// Share of non-users among treated units.
    pub fn never_share_treated(&self) -> Option<f64> {
        let treated = self.n_treated();
        if treated == 0 {
            return None;
        }
        let never = self.units.iter().filter(|u| u.z && !u.d).count();
        Some(never as f64 / treated as f64)
    }

    /// Covariate column `j` as a vector.
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.x[j]).collect()
    }

    /// New dataset made of the units at `indices` (repetitions allowed).
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            schema: self.schema.clone(),
            span_label: self.span_label.clone(),
        }
    }

    /// Keeps the units for which `keep` is true.
    pub fn filter(&self, mut keep: impl FnMut(usize, &Unit) -> bool) -> Dataset {
        Dataset {
            units: self
                .units
                .iter()
                .enumerate()
                .filter(|(i, u)| keep(*i, u))
                .map(|(_, u)| u.clone())
                .collect(),
            schema: self.schema.clone(),
            span_label: self.span_label.clone(),
        }
    }

    /// Lists every violation of the design assumptions.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            if !u.z && u.d {
                violations.push(Violation::Monotonicity { row: i });
            }
        }
        let treated = self.n_treated();
        if treated == 0 {
            violations.push(Violation::EmptyArm { treated: true });
        }
        if treated == self.len() {
            violations.push(Violation::EmptyArm { treated: false });
        }
        if treated > 0 {
            let users = self.units.iter().filter(|u| u.z && u.d).count();
            if users == 0 {
                violations.push(Violation::NoTreatedUsers);
            }
            if users == treated {
                violations.push(Violation::NoTreatedNeverUsers);
            }
        }
        for (j, name) in self.schema.iter().enumerate() {
            let mut values = self.units.iter().map(|u| u.x[j]);
            if let Some(first) = values.next() {
                if values.all(|v| v == first) {
                    violations.push(Violation::ConstantCovariate { name: name.clone() });
                }
            }
        }
        ValidationReport { violations }
    }

    /// Fails unless the dataset can be fed to the estimation pipeline.
    pub fn ensure_estimable(&self) -> Result<(), DataError> {
        let report = self.validate();
        let rows = report.monotonicity_rows();
        if !rows.is_empty() {
            return Err(DataError::Monotonicity(rows));
        }
        if let Some(v) = report.violations.iter().find(|v| v.is_fatal()) {
            return Err(DataError::Unusable(v.to_string()));
        }
        Ok(())
    }
}

/// One problem found by [`Dataset::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `z = 0` with `d = 1`.
    Monotonicity { row: usize },
    /// No units in the named arm.
    EmptyArm { treated: bool },
    /// Every treated unit is a non-user.
    NoTreatedUsers,
    /// Every treated unit is a user.
    NoTreatedNeverUsers,
    /// Covariate column with a single value; reported but not fatal.
    ConstantCovariate { name: String },
}

impl Violation {
    pub fn is_fatal(&self) -> bool {
        !matches!(self, Violation::ConstantCovariate { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Monotonicity { row } => {
                write!(f, "row {row}: z = 0 with d = 1 (monotonicity)")
            }
            Violation::EmptyArm { treated: true } => f.write_str("no treated units"),
            Violation::EmptyArm { treated: false } => f.write_str("no untreated units"),
            Violation::NoTreatedUsers => f.write_str("no users among treated"),
            Violation::NoTreatedNeverUsers => f.write_str("no never-users among treated"),
            Violation::ConstantCovariate { name } => write!(f, "covariate `{name}` is constant"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn monotonicity_rows(&self) -> Vec<usize> {
        self.violations
            .iter()
            .filter_map(|v| match v {
                Violation::Monotonicity { row } => Some(*row),
                _ => None,
            })
            .collect()
    }
}

/// Parsing options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub span_label: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            span_label: String::new(),
        }
    }
}

/// Reads a delimited table with a header containing `z`, `d`, `y` and at least
/// one covariate column. Covariates keep their header order.
///
/// Rows are numbered from 0 in errors (the first data line is row 0).
pub fn load_dataset<R: Read>(source: R, options: &LoadOptions) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    for (i, h) in headers.iter().enumerate() {
        if headers[..i].contains(h) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let (zi, di, yi) = (find("z")?, find("d")?, find("y")?);
    let cov_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != zi && i != di && i != yi)
        .collect();
    if cov_idx.is_empty() {
        return Err(DataError::NoCovariates);
    }
    let schema: Vec<String> = cov_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut units = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(DataError::FieldCount {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let field = |i: usize| -> Result<f64, DataError> {
            let raw = &record[i];
            let err = |message: String| DataError::Parse {
                row,
                column: headers[i].clone(),
                message,
            };
            if raw.is_empty() {
                return Err(err("missing value".into()));
            }
            let v: f64 = raw.parse().map_err(|_| err(format!("not a number: {raw:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value {raw:?}")));
            }
            Ok(v)
        };
        let binary = |i: usize| -> Result<bool, DataError> {
            match field(i)? {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(DataError::Parse {
                    row,
                    column: headers[i].clone(),
                    message: format!("expected 0 or 1, found {v}"),
                }),
            }
        };
        units.push(Unit {
            z: binary(zi)?,
            d: binary(di)?,
            y: field(yi)?,
            x: cov_idx.iter().map(|&i| field(i)).collect::<Result<_, _>>()?,
        });
    }
    let dataset = Dataset::new(units, schema, options.span_label.clone())?;
    let rows = dataset.validate().monotonicity_rows();
    if !rows.is_empty() {
        return Err(DataError::Monotonicity(rows));
    }
    Ok(dataset)
}

/// Writes the dataset as `z,d,y,<covariates...>` with round-trip float formatting.
pub fn write_dataset<W: Write>(dataset: &Dataset, sink: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["z".to_owned(), "d".to_owned(), "y".to_owned()];
    header.extend(dataset.schema.iter().cloned());
    w.write_record(&header)?;
    for u in &dataset.units {
        let mut rec = vec![
            u8::from(u.z).to_string(),
            u8::from(u.d).to_string(),
            u.y.to_string(),
        ];
        rec.extend(u.x.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
