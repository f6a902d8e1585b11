//! Baseline imputers (mean, median, k-nearest neighbours), squared-error
//! tables, and the Wilcoxon rank-sum test with Bonferroni correction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortError, FeatureTable};
use crate::numerics::special::normal_sf;
use crate::numerics::Rng;

/// Largest smaller-sample size for which exact p-values are enumerated.
pub const EXACT_MAX_MIN_N: usize = 20;
pub const KNN_GRID: [usize; 6] = [1, 2, 5, 10, 20, 50];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("column `{0}` has no training values")]
    EmptyColumn(String),
    #[error("k = {k} exceeds the {n_train} training subjects")]
    KTooLarge { k: usize, n_train: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("both samples must be non-empty")]
    EmptySample,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("invalid cross-validation setup: {0}")]
    InvalidCv(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Rows × features matrix of imputed values.
pub type Imputed = Vec<Vec<f64>>;

fn column_stat(train: &FeatureTable, name: &str, stat: fn(&mut Vec<f64>) -> f64) -> Result<f64, EvalError> {
    let col = train
        .column(name)
        .ok_or_else(|| CohortError::MissingColumn(name.to_string()))?;
    let mut v: Vec<f64> = col.observed_values().collect();
    if v.is_empty() {
        return Err(EvalError::EmptyColumn(name.to_string()));
    }
    Ok(stat(&mut v))
}

fn mean_of(v: &mut Vec<f64>) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median_of(v: &mut Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn constant_fill(train: &FeatureTable, n_test: usize, features: &[&str], stat: fn(&mut Vec<f64>) -> f64) -> Result<Imputed, EvalError> {
    let fill: Vec<f64> = features
        .iter()
        .map(|f| column_stat(train, f, stat))
        .collect::<Result<_, _>>()?;
    Ok(vec![fill; n_test])
}

pub fn impute_mean(train: &FeatureTable, test: &FeatureTable, features: &[&str]) -> Result<Imputed, EvalError> {
    constant_fill(train, test.n_subjects(), features, mean_of)
}

pub fn impute_median(train: &FeatureTable, test: &FeatureTable, features: &[&str]) -> Result<Imputed, EvalError> {
    constant_fill(train, test.n_subjects(), features, median_of)
}

/// Average of the `k` nearest training rows (Euclidean over `distance_cols`),
/// ties on distance going to the lower training index. Neighbours are summed
/// in index order, so `k = n_train` reproduces [`impute_mean`] bit for bit.
pub fn impute_knn(
    train: &FeatureTable,
    test: &FeatureTable,
    k: usize,
    distance_cols: &[&str],
    features: &[&str],
) -> Result<Imputed, EvalError> {
    let n_train = train.n_subjects();
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > n_train {
        return Err(EvalError::KTooLarge { k, n_train });
    }
    for f in features {
        column_stat(train, f, mean_of)?;
    }
    let tr_x = train.matrix(distance_cols)?;
    let tr_y = train.matrix(features)?;
    let te_x = test.matrix(distance_cols)?;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n_train);
    Ok(te_x
        .iter()
        .map(|q| {
            order.clear();
            order.extend(tr_x.iter().enumerate().map(|(i, r)| {
                let d2: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            }));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < n_train {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let mut chosen: Vec<usize> = order[..k].iter().map(|p| p.1).collect();
            chosen.sort_unstable();
            (0..features.len())
                .map(|f| chosen.iter().map(|&i| tr_y[i][f]).sum::<f64>() / k as f64)
                .collect()
        })
        .collect())
}

fn mean_squared_error(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (t, p) in truth.iter().zip(pred) {
        for (a, b) in t.iter().zip(p) {
            s += (a - b) * (a - b);
            n += 1;
        }
    }
    s / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<usize>,
    /// Mean over folds of the per-fold MSE (all features pooled).
    pub mse: Vec<f64>,
    pub best_k: usize,
}

/// `folds`-fold cross-validation of [`impute_knn`] over `grid`; the
/// smallest mean CV MSE wins, ties going to the smaller `k`.
pub fn cross_validate_k(
    train: &FeatureTable,
    grid: &[usize],
    folds: usize,
    distance_cols: &[&str],
    features: &[&str],
    seed: u64,
) -> Result<CvResult, EvalError> {
    let n = train.n_subjects();
    if folds < 2 || folds > n || grid.is_empty() {
        return Err(EvalError::InvalidCv(format!("{folds} folds over {n} subjects, grid {grid:?}")));
    }
    let perm = Rng::new(seed).permutation(n);
    let mut totals = vec![0.0; grid.len()];
    for f in 0..folds {
        let mut held: Vec<usize> = perm.iter().copied().skip(f).step_by(folds).collect();
        held.sort_unstable();
        let mut fit: Vec<usize> = (0..n).filter(|i| held.binary_search(i).is_err()).collect();
        fit.sort_unstable();
        let (tr, te) = (train.select_rows(&fit), train.select_rows(&held));
        let truth = te.matrix(features)?;
        for (g, &k) in grid.iter().enumerate() {
            let pred = impute_knn(&tr, &te, k, distance_cols, features)?;
            totals[g] += mean_squared_error(&truth, &pred);
        }
    }
    let mse: Vec<f64> = totals.iter().map(|t| t / folds as f64).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| mse[a].total_cmp(&mse[b]).then(grid[a].cmp(&grid[b])))
        .expect("non-empty grid");
    Ok(CvResult {
        grid: grid.to_vec(),
        mse,
        best_k: grid[best],
    })
}

/// Per-subject squared errors of one method on one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorVector {
    pub method: String,
    pub feature: String,
    pub squared_errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub feature: String,
    pub method: String,
    pub baseline: String,
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
    pub significant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub subject_ids: Vec<u64>,
    pub errors: Vec<ErrorVector>,
    pub comparisons: Vec<Comparison>,
    pub alpha: f64,
    /// Free-form scalar summaries (e.g. selected `k`, R² per target).
    pub extras: BTreeMap<String, f64>,
}

/// Squared errors per subject for every `(method, feature)`; `truth` and
/// every prediction are rows × `features`.
pub fn mse_table(
    subject_ids: &[u64],
    truth: &[Vec<f64>],
    predictions: &[(&str, &Imputed)],
    features: &[&str],
) -> Result<EvalResult, EvalError> {
    let n = truth.len();
    if subject_ids.len() != n {
        return Err(EvalError::Shape { expected: n, got: subject_ids.len() });
    }
    let mut errors = Vec::new();
    for (method, pred) in predictions {
        if pred.len() != n {
            return Err(EvalError::Shape { expected: n, got: pred.len() });
        }
        for (f, name) in features.iter().enumerate() {
            let sq: Vec<f64> = truth
                .iter()
                .zip(pred.iter())
                .map(|(t, p)| {
                    if t.len() != features.len() || p.len() != features.len() {
                        Err(EvalError::Shape {
                            expected: features.len(),
                            got: if t.len() != features.len() { t.len() } else { p.len() },
                        })
                    } else {
                        Ok((t[f] - p[f]).powi(2))
                    }
                })
                .collect::<Result<_, _>>()?;
            let mean = sq.iter().sum::<f64>() / n.max(1) as f64;
            let median = if sq.is_empty() { f64::NAN } else { median_of(&mut sq.clone()) };
            errors.push(ErrorVector {
                method: method.to_string(),
                feature: name.to_string(),
                squared_errors: sq,
                mean,
                median,
            });
        }
    }
    Ok(EvalResult {
        subject_ids: subject_ids.to_vec(),
        errors,
        comparisons: Vec::new(),
        alpha: 0.05,
        extras: BTreeMap::new(),
    })
}

impl EvalResult {
    pub fn errors_of(&self, method: &str, feature: &str) -> Option<&ErrorVector> {
        self.errors.iter().find(|e| e.method == method && e.feature == feature)
    }

    /// Rank-sum test of `method` against each baseline per feature, with a
    /// Bonferroni correction over the baselines of each feature.
    pub fn compare(&mut self, method: &str, baselines: &[&str], features: &[&str], alpha: f64) -> Result<(), EvalError> {
        self.alpha = alpha;
        for f in features {
            let a = self
                .errors_of(method, f)
                .ok_or_else(|| EvalError::Shape { expected: 1, got: 0 })?
                .squared_errors
                .clone();
            let mut tests = Vec::with_capacity(baselines.len());
            for b in baselines {
                let other = self
                    .errors_of(b, f)
                    .ok_or_else(|| EvalError::Shape { expected: 1, got: 0 })?;
                tests.push((b, wilcoxon_rank_sum(&a, &other.squared_errors)?));
            }
            let ps: Vec<f64> = tests.iter().map(|t| t.1.p_value).collect();
            let flags = bonferroni(&ps, alpha)?;
            for ((b, t), flag) in tests.into_iter().zip(flags) {
                self.comparisons.push(Comparison {
                    feature: f.to_string(),
                    method: method.to_string(),
                    baseline: b.to_string(),
                    u: t.u,
                    p_value: t.p_value,
                    exact: t.exact,
                    significant: flag,
                });
            }
        }
        Ok(())
    }

    /// Long-format CSV: `method,feature,subject_id,squared_error`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "method,feature,subject_id,squared_error").map_err(io)?;
        for e in &self.errors {
            for (id, v) in self.subject_ids.iter().zip(&e.squared_errors) {
                writeln!(f, "{},{},{},{}", e.method, e.feature, id, v).map_err(io)?;
            }
        }
        f.flush().map_err(io)
    }

    /// JSON summary without the per-subject vectors.
    pub fn summary_json(&self) -> serde_json::Value {
        let mse: Vec<serde_json::Value> = self
            .errors
            .iter()
            .map(|e| serde_json::json!({"method": e.method, "feature": e.feature, "mean_mse": e.mean, "median_se": e.median}))
            .collect();
        serde_json::json!({
            "n_subjects": self.subject_ids.len(),
            "alpha": self.alpha,
            "mse": mse,
            "comparisons": self.comparisons,
            "extras": self.extras,
        })
    }
}

/// Rank-sum statistic and two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney `U` of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = pooled.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn validate(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.is_empty() || b.is_empty() {
        Err(EvalError::EmptySample)
    } else {
        Ok(())
    }
}

/// Two-sided rank-sum test: exact when `min(n₁, n₂) ≤ 20`, otherwise the
/// tie-corrected normal approximation with continuity correction.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult, EvalError> {
    validate(a, b)?;
    if a.len().min(b.len()) <= EXACT_MAX_MIN_N {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

/// Exact null distribution of the first sample's midrank sum, by dynamic
/// programming over the pooled midranks (doubled to integers).
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSumResult, EvalError> {
    validate(a, b)?;
    let n1 = a.len();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let u = ranks[..n1].iter().sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;
    if ties.len() == 1 {
        return Ok(RankSumResult { u, p_value: 1.0, exact: true });
    }
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled[..n1].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    // ways[c][s]: probability-scaled count of c-subsets with doubled sum s.
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for (seen, &r) in doubled.iter().enumerate() {
        for c in (1..=n1.min(seen + 1)).rev() {
            let (lo, hi) = ways.split_at_mut(c);
            let (prev, cur) = (&lo[c - 1], &mut hi[0]);
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &ways[n1];
    let total: f64 = dist.iter().sum();
    let lower: f64 = dist[..=observed].iter().sum();
    let upper: f64 = dist[observed..].iter().sum();
    let p = (2.0 * lower.min(upper) / total).min(1.0);
    Ok(RankSumResult { u, p_value: p, exact: true })
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult, EvalError> {
    validate(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let u = ranks[..a.len()].iter().sum::<f64>() - n1 * (n1 + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0)).max(1.0);
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term);
    if !(var > 0.0) {
        return Ok(RankSumResult { u, p_value: 1.0, exact: false });
    }
    let z = ((u - n1 * n2 / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(RankSumResult {
        u,
        p_value: (2.0 * normal_sf(z)).min(1.0),
        exact: false,
    })
}

/// `p_i < alpha / m`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, EvalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::InvalidAlpha(alpha));
    }
    let m = p_values.len().max(1) as f64;
    Ok(p_values.iter().map(|p| *p < alpha / m).collect())
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let m = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    1.0 - sse / sst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Column;
    use crate::numerics::Rng;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn sv_table(values: Vec<f64>) -> FeatureTable {
        let n = values.len();
        FeatureTable::new(
            (0..n as u64).collect(),
            vec![
                Column::new("sv", values),
                Column::new("mbp", (0..n).map(|i| i as f64).collect()),
            ],
        )
    }

    #[test]
    fn mean_and_median_fills() {
        let test = sv_table(vec![0.0, 0.0]);
        let t = sv_table(vec![60.0, 80.0, 100.0]);
        assert_eq!(impute_mean(&t, &test, &["sv"]).unwrap(), vec![vec![80.0]; 2]);
        assert_eq!(impute_median(&t, &test, &["sv"]).unwrap(), vec![vec![80.0]; 2]);
        let t = sv_table(vec![60.0, 80.0, 1000.0]);
        assert_eq!(impute_mean(&t, &test, &["sv"]).unwrap()[0][0], 380.0);
        assert_eq!(impute_median(&t, &test, &["sv"]).unwrap()[0][0], 80.0);
        let mut empty = sv_table(vec![1.0, 2.0]);
        empty.column_mut("sv").unwrap().mask_all();
        assert!(matches!(impute_mean(&empty, &test, &["sv"]), Err(EvalError::EmptyColumn(_))));
        assert!(matches!(impute_median(&empty, &test, &["sv"]), Err(EvalError::EmptyColumn(_))));
    }

    #[test]
    fn knn_exact_match_and_degenerate_mean() {
        let train = sv_table(vec![10.0, 20.0, 35.0, 41.0]);
        let test = FeatureTable::new(vec![9], vec![Column::new("sv", vec![f64::NAN]), Column::new("mbp", vec![2.0])]);
        assert_eq!(impute_knn(&train, &test, 1, &["mbp"], &["sv"]).unwrap(), vec![vec![35.0]]);
        assert_eq!(
            impute_knn(&train, &test, 4, &["mbp"], &["sv"]).unwrap(),
            impute_mean(&train, &test, &["sv"]).unwrap()
        );
        assert!(matches!(impute_knn(&train, &test, 5, &["mbp"], &["sv"]), Err(EvalError::KTooLarge { .. })));
        assert!(matches!(impute_knn(&train, &test, 0, &["mbp"], &["sv"]), Err(EvalError::ZeroK)));
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        // Training points at distance 1 on both sides of the query.
        let train = FeatureTable::new(
            vec![0, 1, 2],
            vec![Column::new("sv", vec![5.0, 7.0, 9.0]), Column::new("mbp", vec![3.0, 1.0, 10.0])],
        );
        let test = FeatureTable::new(vec![0], vec![Column::new("sv", vec![f64::NAN]), Column::new("mbp", vec![2.0])]);
        assert_eq!(impute_knn(&train, &test, 1, &["mbp"], &["sv"]).unwrap(), vec![vec![5.0]]);
    }

    #[test]
    fn cv_picks_minimum_of_its_own_table() {
        let t = crate::cohort::generate_cohort(200, 12).unwrap();
        let log = crate::cohort::fit_transforms(&t).unwrap();
        let s = log.apply_to(&t).unwrap();
        let dist: Vec<&str> = crate::cohort::X_OBS.iter().chain(&crate::cohort::NU).copied().collect();
        let cv = cross_validate_k(&s, &KNN_GRID, 10, &dist, &crate::cohort::X_HAT, 3).unwrap();
        let min = cv.mse.iter().copied().fold(f64::INFINITY, f64::min);
        let i = cv.grid.iter().position(|k| *k == cv.best_k).unwrap();
        assert_eq!(cv.mse[i], min);
        assert!(cross_validate_k(&s, &KNN_GRID, 1, &dist, &crate::cohort::X_HAT, 3).is_err());
    }

    #[test]
    fn mse_table_basics() {
        let truth = vec![vec![0.5, -1.0], vec![2.0, 0.0]];
        let plus_one: Imputed = truth.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        let r = mse_table(&[1, 2], &truth, &[("same", &truth), ("shift", &plus_one)], &["sv", "ef"]).unwrap();
        assert_eq!(r.errors_of("same", "sv").unwrap().squared_errors, vec![0.0, 0.0]);
        assert_eq!(r.errors_of("shift", "ef").unwrap().mean, 1.0);
        assert!(mse_table(&[1], &truth, &[("same", &truth)], &["sv", "ef"]).is_err());
        let short: Imputed = vec![vec![0.0, 0.0]];
        assert!(mse_table(&[1, 2], &truth, &[("bad", &short)], &["sv", "ef"]).is_err());
    }

    #[test]
    fn mean_imputation_mse_near_one_on_standardized_truth() {
        let mut rng = Rng::new(8);
        let n = 20_000;
        let v: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        let (train, test) = (sv_table(v[..n / 2].to_vec()), sv_table(v[n / 2..].to_vec()));
        let pred = impute_mean(&train, &test, &["sv"]).unwrap();
        let truth = test.matrix(&["sv"]).unwrap();
        let ids: Vec<u64> = (0..(n / 2) as u64).collect();
        let r = mse_table(&ids, &truth, &[("mean", &pred)], &["sv"]).unwrap();
        assert!((r.errors[0].mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn rank_sum_examples() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-15);
        assert_eq!(wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().p_value, 1.0);
        assert_eq!(wilcoxon_rank_sum(&[2.0; 4], &[2.0; 30]).unwrap().p_value, 1.0);
        assert_eq!(rank_sum_normal(&[2.0; 25], &[2.0; 25]).unwrap().p_value, 1.0);
        assert!(matches!(wilcoxon_rank_sum(&[], &[1.0]), Err(EvalError::EmptySample)));
    }

    #[test]
    fn exact_and_normal_agree_at_25() {
        let mut rng = Rng::new(31);
        for shift in [0.0, 0.3, 0.8] {
            let a: Vec<f64> = (0..25).map(|_| rng.normal(shift, 1.0)).collect();
            let b: Vec<f64> = (0..25).map(|_| rng.normal(0.0, 1.0)).collect();
            let e = rank_sum_exact(&a, &b).unwrap().p_value;
            let n = rank_sum_normal(&a, &b).unwrap().p_value;
            assert!((e - n).abs() < 0.01, "{e} vs {n}");
        }
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni(&[0.01, 0.02, 0.2], 0.05).unwrap(), vec![true, false, false]);
        assert_eq!(bonferroni(&[0.04], 0.05).unwrap(), vec![true]);
        assert_eq!(bonferroni(&[1.0, 1.0], 0.05).unwrap(), vec![false, false]);
        assert!(bonferroni(&[0.1], 1.0).is_err());
    }

    #[test]
    fn compare_and_write() {
        let truth = vec![vec![0.0]; 30];
        let good: Imputed = (0..30).map(|i| vec![0.01 * i as f64]).collect();
        let bad: Imputed = (0..30).map(|i| vec![1.0 + 0.01 * i as f64]).collect();
        let ids: Vec<u64> = (0..30).collect();
        let mut r = mse_table(&ids, &truth, &[("joint", &good), ("mean", &bad)], &["sv"]).unwrap();
        r.compare("joint", &["mean"], &["sv"], 0.05).unwrap();
        assert!(r.comparisons[0].significant);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mse.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 61);
        assert!(r.summary_json()["comparisons"][0]["p_value"].as_f64().unwrap() < 0.05);
    }

    proptest! {
        #[test]
        fn exact_p_invariant_under_monotone_transform(a in prop::collection::vec(-5i32..5, 1..8), b in prop::collection::vec(-5i32..5, 1..8)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let p = rank_sum_exact(&a, &b).unwrap().p_value;
            let g = |v: &f64| (0.7 * v).exp() + 3.0;
            let p2 = rank_sum_exact(&a.iter().map(g).collect::<Vec<_>>(), &b.iter().map(g).collect::<Vec<_>>()).unwrap().p_value;
            prop_assert_eq!(p, p2);
        }

        #[test]
        fn mse_table_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let n = 12;
            let truth: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(0.0, 1.0)]).collect();
            let pred: Imputed = (0..n).map(|_| vec![rng.normal(0.0, 1.0)]).collect();
            let ids: Vec<u64> = (0..n as u64).collect();
            let perm = rng.permutation(n);
            let r = mse_table(&ids, &truth, &[("m", &pred)], &["sv"]).unwrap();
            let tp: Vec<Vec<f64>> = perm.iter().map(|&i| truth[i].clone()).collect();
            let pp: Imputed = perm.iter().map(|&i| pred[i].clone()).collect();
            let ip: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
            let rp = mse_table(&ip, &tp, &[("m", &pp)], &["sv"]).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(rp.errors[0].squared_errors[k], r.errors[0].squared_errors[i]);
            }
            prop_assert!((rp.errors[0].mean - r.errors[0].mean).abs() < 1e-12);
        }
    }
}
