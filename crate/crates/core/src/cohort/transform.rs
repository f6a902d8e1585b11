use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BoxCoxTransform, CohortError, FeatureTable, Role, SKEWED};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    BoxCox(BoxCoxTransform),
    Standardize { mean: f64, std: f64 },
}

impl Transform {
    pub fn apply(&self, x: f64) -> Result<f64, CohortError> {
        match self {
            Transform::BoxCox(t) => t.apply(x),
            Transform::Standardize { mean, std } => Ok((x - mean) / std),
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        match self {
            Transform::BoxCox(t) => t.invert(y),
            Transform::Standardize { mean, std } => y * std + mean,
        }
    }
}

/// Ordered transforms applied to each column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub columns: BTreeMap<String, Vec<Transform>>,
}

impl TransformLog {
    pub fn push(&mut self, column: &str, t: Transform) {
        self.columns.entry(column.to_string()).or_default().push(t);
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn forward(&self, column: &str, x: f64) -> Result<f64, CohortError> {
        let mut v = x;
        for t in self.columns.get(column).into_iter().flatten() {
            v = t.apply(v)?;
        }
        Ok(v)
    }

    /// Map a transformed value back to physical units.
    pub fn invert(&self, column: &str, y: f64) -> f64 {
        self.columns
            .get(column)
            .into_iter()
            .flatten()
            .rev()
            .fold(y, |v, t| t.invert(v))
    }

    /// Scale of the last standardization of `column` (1 if none).
    pub fn std_of(&self, column: &str) -> f64 {
        self.columns
            .get(column)
            .and_then(|ts| {
                ts.iter().rev().find_map(|t| match t {
                    Transform::Standardize { std, .. } => Some(*std),
                    _ => None,
                })
            })
            .unwrap_or(1.0)
    }

    /// Invert a value and propagate a standard deviation through the
    /// (locally linearised) transform chain.
    pub fn invert_with_std(&self, column: &str, y: f64, std: f64) -> (f64, f64) {
        let x = self.invert(column, y);
        let h = 1e-6 * std.max(1e-6);
        let slope = (self.invert(column, y + h) - self.invert(column, y - h)) / (2.0 * h);
        (x, slope.abs() * std)
    }

    /// Apply every recorded transform to the matching columns of `table`.
    /// Masked cells stay masked.
    pub fn apply_to(&self, table: &FeatureTable) -> Result<FeatureTable, CohortError> {
        let mut out = table.clone();
        for col in &mut out.columns {
            for (v, &o) in col.values.iter_mut().zip(&col.observed) {
                if o {
                    *v = self.forward(&col.name, *v)?;
                }
            }
        }
        out.transform_log = self.clone();
        Ok(out)
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let xs: Vec<f64> = values.collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Standardize every column to zero mean and unit variance using
/// statistics from the rows in `stats_from`. Statistics are appended to the
/// table's transform log.
pub fn standardize(table: &FeatureTable, stats_from: &[usize]) -> Result<FeatureTable, CohortError> {
    let mut out = table.clone();
    for col in &mut out.columns {
        let (mean, std) = mean_std(
            stats_from
                .iter()
                .filter(|&&i| col.observed[i])
                .map(|&i| col.values[i]),
        )
        .ok_or_else(|| CohortError::EmptyColumn(col.name.clone()))?;
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(CohortError::ZeroVariance(col.name.clone()));
        }
        let t = Transform::Standardize { mean, std };
        for (v, &o) in col.values.iter_mut().zip(&col.observed) {
            if o {
                *v = (*v - mean) / std;
            }
        }
        out.transform_log.push(&col.name, t);
    }
    Ok(out)
}

/// Fit the modelling transforms on a fully observed training table:
/// Box-Cox on the skewed columns, then standardization of every column.
pub fn fit_transforms(train: &FeatureTable) -> Result<TransformLog, CohortError> {
    let mut table = train.clone();
    table.transform_log = TransformLog::default();
    for name in SKEWED {
        let col = table
            .column_mut(name)
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))?;
        let observed: Vec<f64> = col.observed_values().collect();
        let (_, t) = super::box_cox(&observed)?;
        for (v, &o) in col.values.iter_mut().zip(&col.observed) {
            if o {
                *v = t.apply(*v)?;
            }
        }
        table.transform_log.push(name, Transform::BoxCox(t));
    }
    let all: Vec<usize> = (0..table.n_subjects()).collect();
    Ok(standardize(&table, &all)?.transform_log)
}

/// Disjoint random partition of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Fully observed rows.
    pub complete: FeatureTable,
    /// Remaining rows with every `x̂` and `y` cell masked.
    pub incomplete: FeatureTable,
    /// Unmasked copy of the incomplete rows, for evaluation only.
    pub held_out: FeatureTable,
}

pub fn split(table: &FeatureTable, n_complete: usize, seed: u64) -> Result<Split, CohortError> {
    let n = table.n_subjects();
    if n_complete >= n {
        return Err(CohortError::InvalidSplit {
            n_complete,
            n_subjects: n,
        });
    }
    let perm = Rng::new(seed).permutation(n);
    let mut complete_idx = perm[..n_complete].to_vec();
    let mut rest_idx = perm[n_complete..].to_vec();
    complete_idx.sort_unstable();
    rest_idx.sort_unstable();
    let complete = table.select_rows(&complete_idx);
    let held_out = table.select_rows(&rest_idx);
    let mut incomplete = held_out.clone();
    for col in &mut incomplete.columns {
        if matches!(col.role, Role::XHat | Role::Y) {
            col.mask_all();
        }
    }
    Ok(Split {
        complete,
        incomplete,
        held_out,
    })
}
