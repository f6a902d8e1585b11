//! Subject × feature tables with role-tagged columns and missingness,
//! synthetic cohort generation, invertible feature transforms, and CSV/JSON
//! persistence.

mod boxcox;
mod generate;
mod io;
mod transform;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heart::HeartError;

pub use boxcox::{box_cox, box_cox_log_likelihood, box_cox_with_lambda, BoxCoxTransform, LAMBDA_GRID};
pub use generate::{generate_cohort, GENERATED_MIN_SUBJECTS};
pub use io::{read_csv, read_transform_log, write_csv, write_transform_log, CSV_COLUMNS};
pub use transform::{fit_transforms, split, standardize, Split, Transform, TransformLog};

/// Role of a column in the joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Observed cardiac input (`x_obs`).
    XObs,
    /// Conditioning brain/clinical covariate (`ν`).
    Nu,
    /// Cardiac feature to impute (`x̂`).
    XHat,
    /// Lumped-model parameter to emulate (`y`).
    Y,
    /// Carried along but not modelled (systolic pressure).
    Aux,
}

pub const X_OBS: [&str; 2] = ["mbp", "dbp"];
pub const NU: [&str; 6] = ["age", "bsa", "brain_vol", "vent_vol", "wmh_vol", "wmh_count"];
pub const X_HAT: [&str; 3] = ["sv", "edv", "ef"];
pub const Y: [&str; 5] = ["sigma0", "r0", "c1", "rp", "tau"];
/// Columns Box-Cox transformed before modelling.
pub const SKEWED: [&str; 2] = ["wmh_vol", "wmh_count"];

/// Role of a named column, if it belongs to the schema.
pub fn role_of(name: &str) -> Option<Role> {
    if X_OBS.contains(&name) {
        Some(Role::XObs)
    } else if NU.contains(&name) {
        Some(Role::Nu)
    } else if X_HAT.contains(&name) {
        Some(Role::XHat)
    } else if Y.contains(&name) {
        Some(Role::Y)
    } else if name == "sbp" {
        Some(Role::Aux)
    } else {
        None
    }
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cohort needs at least {min} subjects, got {got}")]
    TooFewSubjects { min: usize, got: usize },
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("schema error: unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}, column `{column}`: non-numeric value `{value}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("column `{0}` has no observed values")]
    EmptyColumn(String),
    #[error("Box-Cox input must be positive after shift (got {0})")]
    NonPositive(f64),
    #[error("split needs n_complete < n_subjects ({n_complete} >= {n_subjects})")]
    InvalidSplit { n_complete: usize, n_subjects: usize },
    #[error("subject {subject}: simulation failed after {attempts} attempts: {source}")]
    Simulation {
        subject: usize,
        attempts: usize,
        #[source]
        source: HeartError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: Role,
    /// `NaN` wherever `observed` is false.
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Column {
    pub fn new(name: &str, values: Vec<f64>) -> Self {
        let observed = values.iter().map(|v| !v.is_nan()).collect();
        Self {
            name: name.to_string(),
            role: role_of(name).unwrap_or(Role::Aux),
            values,
            observed,
        }
    }

    pub fn observed_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.observed)
            .filter_map(|(&v, &o)| o.then_some(v))
    }

    pub fn mask_all(&mut self) {
        self.values.iter_mut().for_each(|v| *v = f64::NAN);
        self.observed.iter_mut().for_each(|o| *o = false);
    }
}

/// Rectangular subject × feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub subject_ids: Vec<u64>,
    pub columns: Vec<Column>,
    pub transform_log: TransformLog,
}

impl FeatureTable {
    pub fn new(subject_ids: Vec<u64>, columns: Vec<Column>) -> Self {
        Self {
            subject_ids,
            columns,
            transform_log: TransformLog::default(),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    /// Columns taking part in the model (everything but auxiliary ones).
    pub fn model_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.role != Role::Aux)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_mut(&mut self, name: &str) -> Option<&mut Column> {
        self.columns.iter_mut().find(|c| c.name == name)
    }

    pub fn values(&self, name: &str) -> Result<&[f64], CohortError> {
        self.column(name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    }

    pub fn masked_cells(&self) -> usize {
        self.columns
            .iter()
            .map(|c| c.observed.iter().filter(|o| !**o).count())
            .sum()
    }

    /// Row-major matrix of the named columns.
    pub fn matrix(&self, names: &[&str]) -> Result<Vec<Vec<f64>>, CohortError> {
        let cols: Vec<&[f64]> = names.iter().map(|n| self.values(n)).collect::<Result<_, _>>()?;
        Ok((0..self.n_subjects())
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect())
    }

    pub fn row(&self, names: &[&str], i: usize) -> Result<Vec<f64>, CohortError> {
        names.iter().map(|n| self.values(n).map(|c| c[i])).collect()
    }

    /// Rows at `indices`, in that order; transforms carried over.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            subject_ids: indices.iter().map(|&i| self.subject_ids[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    role: c.role,
                    values: indices.iter().map(|&i| c.values[i]).collect(),
                    observed: indices.iter().map(|&i| c.observed[i]).collect(),
                })
                .collect(),
            transform_log: self.transform_log.clone(),
        }
    }
}
