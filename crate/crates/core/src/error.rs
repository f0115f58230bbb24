//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode a caller can observe. Validation problems carry enough
/// context (row, column name) to be actionable; solver failures carry the
/// last iterate so diagnostics survive the unwind.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("missing required column '{column}' in {file}")]
    MissingColumn { file: String, column: String },

    #[error("{file}: row {row}, column '{column}': value '{value}' is not a finite number")]
    NonNumericCell {
        file: String,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{file}: row {row}: treatment code '{value}' is not 0 or 1")]
    InvalidTreatmentCode {
        file: String,
        row: usize,
        value: String,
    },

    #[error("{file}: row {row}: design weight {value} is not positive")]
    NonPositiveDesignWeight { file: String, row: usize, value: f64 },

    #[error("trial sample has no observations in arm {arm}")]
    ArmEmpty { arm: u8 },

    #[error("trial arm empty after {attempts} redraw attempts")]
    TrialArmEmpty { attempts: usize },

    #[error("outcome arm {arm} has {rows} rows but the design has {cols} columns")]
    ArmTooSmall { arm: u8, rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("column '{column}' has zero weighted variance")]
    DegenerateColumn { column: String },

    #[error("calibration system is singular; dependent basis columns: {columns:?}")]
    SingularJacobian { columns: Vec<String> },

    #[error("solver did not converge after {iterations} iterations (residual {residual_norm:.3e})")]
    NotConverged {
        iterations: usize,
        residual_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficientDesign { columns: Vec<usize> },

    #[error("logistic fit diverged (coefficient norm {norm:.3e}); data are separated")]
    Separation { norm: f64 },

    #[error("tuning grid is empty")]
    EmptyGrid,

    #[error("every cross-validation fold failed; last error: {last}")]
    AllFoldsFailed { last: String },

    #[error("bootstrap failed on {failures} of {total} replicates")]
    TooManyFailures { failures: usize, total: usize },

    #[error("kernel neighborhood is empty at point {index}")]
    EmptyKernelNeighborhood { index: usize },

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{file}: {message}")]
    Io { file: String, message: String },
}

impl Error {
    /// Attach a Monte Carlo replicate index to a propagated failure.
    pub fn in_replicate(self, replicate: usize) -> Error {
        Error::Replicate {
            replicate,
            source: Box::new(self),
        }
    }

    /// True for failures of input validation rather than of numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NotConverged { .. }
                | Error::SingularJacobian { .. }
                | Error::Separation { .. }
                | Error::TooManyFailures { .. }
                | Error::AllFoldsFailed { .. }
                | Error::EmptyKernelNeighborhood { .. }
                | Error::Replicate { .. }
        )
    }
}
