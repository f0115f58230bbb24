//! Sample containers, validation, and CSV I/O.
//!
//! Two samples drive every estimator: a randomized trial carrying
//! covariates, a 0/1 treatment, and an outcome; and a real-world sample
//! carrying the same covariates plus a positive survey design weight.
//! Covariate columns are whatever header names the two files share beyond
//! the reserved ones, matched case-insensitively and kept in trial order.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the outcome variable; decides the outcome-model family
/// (linear vs logistic) and the conditional-variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeType {
    Continuous,
    Binary,
}

impl std::fmt::Display for OutcomeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeType::Continuous => write!(f, "continuous"),
            OutcomeType::Binary => write!(f, "binary"),
        }
    }
}

/// Randomized trial sample.
#[derive(Debug, Clone)]
pub struct TrialSample {
    /// n x p covariate matrix, one row per participant.
    pub covariates: Array2<f64>,
    /// Treatment indicator per row, stored as 0.0 / 1.0.
    pub treatment: Array1<f64>,
    /// Observed outcome per row.
    pub outcome: Array1<f64>,
    /// Covariate column names, in design order.
    pub covariate_names: Vec<String>,
    /// Randomization probability when known by design; `None` means use the
    /// empirical treated fraction.
    pub known_pi_a: Option<f64>,
}

/// Design-weighted real-world sample.
#[derive(Debug, Clone)]
pub struct RweSample {
    /// m x p covariate matrix, columns aligned with the trial's.
    pub covariates: Array2<f64>,
    /// Survey design weight per row; each must be positive.
    pub design_weights: Array1<f64>,
    /// Covariate column names, in design order.
    pub covariate_names: Vec<String>,
    /// Observed treatment, when the real-world source records it. Present
    /// if and only if `outcome` is present.
    pub treatment: Option<Array1<f64>>,
    /// Observed outcome, when recorded.
    pub outcome: Option<Array1<f64>>,
}

impl TrialSample {
    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    /// Probability of treatment: the design value when known, otherwise the
    /// empirical treated fraction.
    pub fn pi_a(&self) -> f64 {
        self.known_pi_a
            .unwrap_or_else(|| self.treatment.mean().unwrap_or(0.0))
    }

    /// Check internal consistency: matching lengths, finite values, both
    /// arms populated, and (for binary outcomes) 0/1 outcome codes.
    pub fn validate(&self, outcome_type: OutcomeType) -> Result<()> {
        let n = self.n();
        if self.treatment.len() != n {
            return Err(Error::DimensionMismatch {
                context: "trial treatment length".into(),
                expected: n,
                found: self.treatment.len(),
            });
        }
        if self.outcome.len() != n {
            return Err(Error::DimensionMismatch {
                context: "trial outcome length".into(),
                expected: n,
                found: self.outcome.len(),
            });
        }
        if self.covariate_names.len() != self.p() {
            return Err(Error::DimensionMismatch {
                context: "trial covariate names".into(),
                expected: self.p(),
                found: self.covariate_names.len(),
            });
        }
        for (i, &a) in self.treatment.iter().enumerate() {
            if a != 0.0 && a != 1.0 {
                return Err(Error::InvalidTreatmentCode {
                    file: "<trial>".into(),
                    row: i + 1,
                    value: format!("{a}"),
                });
            }
        }
        for (i, row) in self.covariates.outer_iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonNumericCell {
                        file: "<trial>".into(),
                        row: i + 1,
                        column: self.covariate_names[j].clone(),
                        value: format!("{x}"),
                    });
                }
            }
        }
        for (i, &y) in self.outcome.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonNumericCell {
                    file: "<trial>".into(),
                    row: i + 1,
                    column: "y".into(),
                    value: format!("{y}"),
                });
            }
            if outcome_type == OutcomeType::Binary && y != 0.0 && y != 1.0 {
                return Err(Error::NonNumericCell {
                    file: "<trial>".into(),
                    row: i + 1,
                    column: "y (binary)".into(),
                    value: format!("{y}"),
                });
            }
        }
        let treated = self.treatment.iter().filter(|&&a| a == 1.0).count();
        if treated == 0 {
            return Err(Error::ArmEmpty { arm: 1 });
        }
        if treated == n {
            return Err(Error::ArmEmpty { arm: 0 });
        }
        if let Some(pi) = self.known_pi_a {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "treatment probability {pi} must lie strictly inside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

impl RweSample {
    pub fn m(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    /// Estimated target-population size: the sum of design weights.
    pub fn population_size(&self) -> f64 {
        self.design_weights.sum()
    }

    /// True when the sample records treatment and outcome, enabling pooled
    /// outcome-model fitting.
    pub fn has_outcomes(&self) -> bool {
        self.treatment.is_some() && self.outcome.is_some()
    }

    /// Check internal consistency: positive weights, finite covariates, and
    /// treatment/outcome either both present (with valid codes) or both
    /// absent.
    pub fn validate(&self, outcome_type: OutcomeType) -> Result<()> {
        let m = self.m();
        if self.design_weights.len() != m {
            return Err(Error::DimensionMismatch {
                context: "design weight length".into(),
                expected: m,
                found: self.design_weights.len(),
            });
        }
        if self.treatment.is_some() != self.outcome.is_some() {
            return Err(Error::InvalidConfig(
                "real-world treatment and outcome must be supplied together".into(),
            ));
        }
        if let (Some(a), Some(y)) = (&self.treatment, &self.outcome) {
            if a.len() != m || y.len() != m {
                return Err(Error::DimensionMismatch {
                    context: "real-world treatment/outcome length".into(),
                    expected: m,
                    found: a.len().min(y.len()),
                });
            }
            for (i, &ai) in a.iter().enumerate() {
                if ai != 0.0 && ai != 1.0 {
                    return Err(Error::InvalidTreatmentCode {
                        file: "<rwe>".into(),
                        row: i + 1,
                        value: format!("{ai}"),
                    });
                }
            }
            for (i, &yi) in y.iter().enumerate() {
                if !yi.is_finite()
                    || (outcome_type == OutcomeType::Binary && yi != 0.0 && yi != 1.0)
                {
                    return Err(Error::NonNumericCell {
                        file: "<rwe>".into(),
                        row: i + 1,
                        column: "y".into(),
                        value: format!("{yi}"),
                    });
                }
            }
        }
        if self.covariate_names.len() != self.p() {
            return Err(Error::DimensionMismatch {
                context: "real-world covariate names".into(),
                expected: self.p(),
                found: self.covariate_names.len(),
            });
        }
        if m == 0 {
            return Err(Error::InvalidConfig(
                "real-world sample has no rows".into(),
            ));
        }
        for (i, &d) in self.design_weights.iter().enumerate() {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::NonPositiveDesignWeight {
                    file: "<rwe>".into(),
                    row: i + 1,
                    value: d,
                });
            }
        }
        for (i, row) in self.covariates.outer_iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonNumericCell {
                        file: "<rwe>".into(),
                        row: i + 1,
                        column: self.covariate_names[j].clone(),
                        value: format!("{x}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Check that the covariate columns line up with the trial's, by name
    /// and count.
    pub fn validate_against(&self, trial: &TrialSample) -> Result<()> {
        if self.p() != trial.p() {
            return Err(Error::DimensionMismatch {
                context: "covariate columns across samples".into(),
                expected: trial.p(),
                found: self.p(),
            });
        }
        for (a, b) in self.covariate_names.iter().zip(&trial.covariate_names) {
            if !a.eq_ignore_ascii_case(b) {
                return Err(Error::InvalidConfig(format!(
                    "covariate name mismatch across samples: '{b}' vs '{a}'"
                )));
            }
        }
        Ok(())
    }
}

/// Reserved column names (matched case-insensitively).
const TREATMENT_COL: &str = "a";
const OUTCOME_COL: &str = "y";
const WEIGHT_COL: &str = "d";

struct RawTable {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
    file: String,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io {
        file: file.clone(),
        message: e.to_string(),
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Io {
            file: file.clone(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Io {
            file: file.clone(),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(headers.len());
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
                file: file.clone(),
                row: idx + 1,
                column: headers.get(j).cloned().unwrap_or_default(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(Error::NonNumericCell {
                    file: file.clone(),
                    row: idx + 1,
                    column: headers.get(j).cloned().unwrap_or_default(),
                    value: cell.to_string(),
                });
            }
            row.push(value);
        }
        if row.len() != headers.len() {
            return Err(Error::Io {
                file: file.clone(),
                message: format!(
                    "row {}: expected {} fields, found {}",
                    idx + 1,
                    headers.len(),
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok(RawTable {
        headers,
        rows,
        file,
    })
}

fn find_column(table: &RawTable, name: &str) -> Result<usize> {
    table
        .headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::MissingColumn {
            file: table.file.clone(),
            column: name.into(),
        })
}

fn covariate_columns(table: &RawTable, reserved: &[usize]) -> (Vec<usize>, Vec<String>) {
    let mut idx = Vec::new();
    let mut names = Vec::new();
    for (j, h) in table.headers.iter().enumerate() {
        if !reserved.contains(&j) {
            idx.push(j);
            names.push(h.clone());
        }
    }
    (idx, names)
}

/// Load a trial sample from CSV. Required columns: `a` (0/1 treatment) and
/// `y` (outcome); everything else is treated as a covariate.
pub fn load_trial_csv(path: &Path, outcome_type: OutcomeType) -> Result<TrialSample> {
    let table = read_table(path)?;
    let a_col = find_column(&table, TREATMENT_COL)?;
    let y_col = find_column(&table, OUTCOME_COL)?;
    let (x_cols, covariate_names) = covariate_columns(&table, &[a_col, y_col]);
    if x_cols.is_empty() {
        return Err(Error::MissingColumn {
            file: table.file.clone(),
            column: "<at least one covariate>".into(),
        });
    }
    let n = table.rows.len();
    let mut covariates = Array2::zeros((n, x_cols.len()));
    let mut treatment = Array1::zeros(n);
    let mut outcome = Array1::zeros(n);
    for (i, row) in table.rows.iter().enumerate() {
        let a = row[a_col];
        if a != 0.0 && a != 1.0 {
            return Err(Error::InvalidTreatmentCode {
                file: table.file.clone(),
                row: i + 1,
                value: format!("{a}"),
            });
        }
        treatment[i] = a;
        outcome[i] = row[y_col];
        for (k, &j) in x_cols.iter().enumerate() {
            covariates[[i, k]] = row[j];
        }
    }
    let sample = TrialSample {
        covariates,
        treatment,
        outcome,
        covariate_names,
        known_pi_a: None,
    };
    sample.validate(outcome_type)?;
    Ok(sample)
}

/// Load a real-world sample from CSV. Required column: `d` (positive design
/// weight); optional `a` and `y` columns are picked up when present;
/// everything else is treated as a covariate.
pub fn load_rwe_csv(path: &Path, outcome_type: OutcomeType) -> Result<RweSample> {
    let table = read_table(path)?;
    let d_col = find_column(&table, WEIGHT_COL)?;
    let a_col = find_column(&table, TREATMENT_COL).ok();
    let y_col = find_column(&table, OUTCOME_COL).ok();
    let mut reserved = vec![d_col];
    reserved.extend(a_col);
    reserved.extend(y_col);
    let (x_cols, covariate_names) = covariate_columns(&table, &reserved);
    if x_cols.is_empty() {
        return Err(Error::MissingColumn {
            file: table.file.clone(),
            column: "<at least one covariate>".into(),
        });
    }
    let m = table.rows.len();
    let mut covariates = Array2::zeros((m, x_cols.len()));
    let mut design_weights = Array1::zeros(m);
    let mut treatment = a_col.map(|_| Array1::zeros(m));
    let mut outcome = y_col.map(|_| Array1::zeros(m));
    for (i, row) in table.rows.iter().enumerate() {
        let d = row[d_col];
        if !(d > 0.0) {
            return Err(Error::NonPositiveDesignWeight {
                file: table.file.clone(),
                row: i + 1,
                value: d,
            });
        }
        design_weights[i] = d;
        if let (Some(a), Some(col)) = (treatment.as_mut(), a_col) {
            let ai = row[col];
            if ai != 0.0 && ai != 1.0 {
                return Err(Error::InvalidTreatmentCode {
                    file: table.file.clone(),
                    row: i + 1,
                    value: format!("{ai}"),
                });
            }
            a[i] = ai;
        }
        if let (Some(y), Some(col)) = (outcome.as_mut(), y_col) {
            y[i] = row[col];
        }
        for (k, &j) in x_cols.iter().enumerate() {
            covariates[[i, k]] = row[j];
        }
    }
    let sample = RweSample {
        covariates,
        design_weights,
        covariate_names,
        treatment,
        outcome,
    };
    sample.validate(outcome_type)?;
    Ok(sample)
}

/// The two samples an analysis runs on, with their shared covariate schema.
#[derive(Debug, Clone)]
pub struct IntegratedDataset {
    pub trial: TrialSample,
    pub rwe: RweSample,
    pub outcome_type: OutcomeType,
}

impl IntegratedDataset {
    /// Validate both samples and their column alignment.
    pub fn validate(&self) -> Result<()> {
        self.trial.validate(self.outcome_type)?;
        self.rwe.validate(self.outcome_type)?;
        self.rwe.validate_against(&self.trial)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.trial.covariate_names
    }

    pub fn p(&self) -> usize {
        self.trial.p()
    }
}

/// Load and validate a trial/real-world CSV pair.
pub fn load_csv_pair(
    rct_path: &Path,
    rwe_path: &Path,
    outcome_type: OutcomeType,
) -> Result<IntegratedDataset> {
    let trial = load_trial_csv(rct_path, outcome_type)?;
    let rwe = load_rwe_csv(rwe_path, outcome_type)?;
    let dataset = IntegratedDataset {
        trial,
        rwe,
        outcome_type,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Format a float with 17 significant digits so a write/read cycle is
/// lossless for every finite f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a trial sample as CSV (inverse of [`load_trial_csv`]).
pub fn write_trial_csv(path: &Path, sample: &TrialSample) -> Result<()> {
    let file = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Io {
        file: file.clone(),
        message: e.to_string(),
    })?;
    let mut header: Vec<String> = sample.covariate_names.clone();
    header.push(TREATMENT_COL.into());
    header.push(OUTCOME_COL.into());
    writer.write_record(&header).map_err(|e| Error::Io {
        file: file.clone(),
        message: e.to_string(),
    })?;
    for i in 0..sample.n() {
        let mut record: Vec<String> = sample
            .covariates
            .row(i)
            .iter()
            .map(|&v| fmt_f64(v))
            .collect();
        record.push(fmt_f64(sample.treatment[i]));
        record.push(fmt_f64(sample.outcome[i]));
        writer.write_record(&record).map_err(|e| Error::Io {
            file: file.clone(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::Io {
        file,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Write a real-world sample as CSV (inverse of [`load_rwe_csv`]).
pub fn write_rwe_csv(path: &Path, sample: &RweSample) -> Result<()> {
    let file = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Io {
        file: file.clone(),
        message: e.to_string(),
    })?;
    let mut header: Vec<String> = sample.covariate_names.clone();
    header.push(WEIGHT_COL.into());
    if sample.has_outcomes() {
        header.push(TREATMENT_COL.into());
        header.push(OUTCOME_COL.into());
    }
    writer.write_record(&header).map_err(|e| Error::Io {
        file: file.clone(),
        message: e.to_string(),
    })?;
    for i in 0..sample.m() {
        let mut record: Vec<String> = sample
            .covariates
            .row(i)
            .iter()
            .map(|&v| fmt_f64(v))
            .collect();
        record.push(fmt_f64(sample.design_weights[i]));
        if let (Some(a), Some(y)) = (&sample.treatment, &sample.outcome) {
            record.push(fmt_f64(a[i]));
            record.push(fmt_f64(y[i]));
        }
        writer.write_record(&record).map_err(|e| Error::Io {
            file: file.clone(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::Io {
        file,
        message: e.to_string(),
    })?;
    Ok(())
}
