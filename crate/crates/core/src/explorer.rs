//! What-if sweeps along one conditioning variable: GP parameter bands from
//! the conditional prior, and lumped-model simulation at the band means.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortError, FeatureTable, NU, X_OBS, Y};
use crate::cvae::reparam_sample;
use crate::heart::{self, CardiacMeasurements, LumpedParams, SimSettings};
use crate::joint::JointModel;
use crate::numerics::Rng;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown sweep variable `{0}`; expected one of {NU:?}")]
    UnknownVariable(String),
    #[error("invalid sweep: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: String,
    pub n_points: usize,
    /// Physical-unit sweep bounds.
    pub range: (f64, f64),
    pub n_mc: usize,
}

impl SweepSpec {
    /// Range set to the 5th and 95th percentiles of `variable` in `cohort`.
    pub fn from_cohort(variable: &str, n_points: usize, n_mc: usize, cohort: &FeatureTable) -> Result<Self, SweepError> {
        check_variable(variable)?;
        let v = sorted_observed(cohort, variable)?;
        Ok(Self {
            variable: variable.to_string(),
            n_points,
            range: (percentile(&v, 5.0), percentile(&v, 95.0)),
            n_mc,
        })
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        check_variable(&self.variable)?;
        if self.n_points < 3 {
            return Err(SweepError::Invalid(format!("n_points = {} must be at least 3", self.n_points)));
        }
        if self.n_mc == 0 {
            return Err(SweepError::Invalid("n_mc must be at least 1".into()));
        }
        let (lo, hi) = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SweepError::Invalid(format!("range ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.range;
        let m = (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { hi } else { lo + (hi - lo) * i as f64 / m })
            .collect()
    }
}

fn check_variable(v: &str) -> Result<(), SweepError> {
    if NU.contains(&v) {
        Ok(())
    } else {
        Err(SweepError::UnknownVariable(v.to_string()))
    }
}

fn sorted_observed(cohort: &FeatureTable, name: &str) -> Result<Vec<f64>, SweepError> {
    let col = cohort
        .column(name)
        .ok_or_else(|| CohortError::MissingColumn(name.to_string()))?;
    let mut v: Vec<f64> = col.observed_values().collect();
    if v.is_empty() {
        return Err(SweepError::Invalid(format!("column `{name}` has no observed values")));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let (i, frac) = (h.floor() as usize, h - h.floor());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Mean and nested central bands of one parameter, physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower50: f64,
    pub upper50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// One band per mechanistic parameter, in `Y` order.
    pub params: Vec<Band>,
    pub pv_loop: Option<Vec<(f64, f64)>>,
    pub measurements: Option<CardiacMeasurements<f64>>,
    /// Simulation failure message; the point is kept and flagged.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub variable: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }
}

/// Model-space (transformed) mean of a column, summed in sorted order so the
/// result does not depend on row order.
fn model_space_mean<T: Scalar>(model: &JointModel<T>, cohort: &FeatureTable, name: &str) -> Result<f64, SweepError> {
    let mut v: Vec<f64> = sorted_observed(cohort, name)?
        .into_iter()
        .map(|x| model.transform_log.forward(name, x))
        .collect::<Result<_, _>>()?;
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Sweep `spec.variable` over its grid. Every grid point reuses the same
/// random stream, so differences between points come from the model only.
pub fn sweep<T: Scalar>(model: &JointModel<T>, cohort: &FeatureTable, spec: &SweepSpec, seed: u64) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    let x_obs: Vec<T> = X_OBS
        .iter()
        .map(|n| model_space_mean(model, cohort, n).map(T::lit))
        .collect::<Result<_, _>>()?;
    let mut nu: Vec<T> = NU
        .iter()
        .map(|n| model_space_mean(model, cohort, n).map(T::lit))
        .collect::<Result<_, _>>()?;
    let d = NU.iter().position(|n| *n == spec.variable).expect("validated");
    let log = &model.transform_log;
    let settings = SimSettings::<f64>::default();
    let model_err = |e: &dyn std::fmt::Display| SweepError::Model(e.to_string());
    let mut points = Vec::with_capacity(spec.n_points);
    for value in spec.grid() {
        nu[d] = T::lit(log.forward(&spec.variable, value)?);
        let prior = model.cvae.prior(&nu).map_err(|e| model_err(&e))?;
        let mut rng = Rng::new(seed);
        let mut samples = vec![Vec::with_capacity(spec.n_mc); Y.len()];
        let mut means = vec![0.0; Y.len()];
        let mut input = x_obs.clone();
        for _ in 0..spec.n_mc {
            let (z, _) = reparam_sample(&prior, &mut rng);
            input.truncate(x_obs.len());
            input.extend_from_slice(&z);
            let preds = model.gp.predict(&input).map_err(|e| model_err(&e))?;
            for (j, p) in preds.iter().enumerate() {
                let (m, var) = (p.mean.as_f64(), p.variance.as_f64());
                means[j] += m;
                samples[j].push(m + var.sqrt() * rng.standard_normal());
            }
        }
        let params: Vec<Band> = Y
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let s = &mut samples[j];
                s.sort_by(f64::total_cmp);
                // Transforms on targets are monotone increasing, so
                // percentiles map through them directly.
                let inv = |q: f64| log.invert(name, percentile(s, q));
                let mean = log.invert(name, means[j] / spec.n_mc as f64);
                let (lower, upper) = (inv(2.5).min(mean), inv(97.5).max(mean));
                Band {
                    mean,
                    lower,
                    upper,
                    lower50: inv(25.0).max(lower),
                    upper50: inv(75.0).min(upper),
                }
            })
            .collect();
        let lumped = LumpedParams::from_slice(&params.iter().map(|b| b.mean).collect::<Vec<_>>());
        let sim = heart::simulate(&lumped, &settings)
            .and_then(|trace| Ok((heart::measure(&trace)?, heart::pv_loop(&trace)?)));
        let (pv_loop, measurements, failure) = match sim {
            Ok((m, l)) => (Some(l), Some(m), None),
            Err(e) => {
                log::warn!("sweep {} = {value}: simulation failed: {e}", spec.variable);
                (None, None, Some(e.to_string()))
            }
        };
        points.push(SweepPoint {
            value,
            params,
            pv_loop,
            measurements,
            failure,
        });
    }
    Ok(SweepResult {
        variable: spec.variable.clone(),
        points,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, SweepError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SweepError {
    SweepError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn params_header() -> Vec<String> {
    let mut h = vec!["point".to_string(), "value".to_string()];
    for n in Y {
        for s in ["mean", "lower", "upper", "lower50", "upper50"] {
            h.push(format!("{n}_{s}"));
        }
    }
    h
}

/// Write `params_<var>.csv`, `loops_<var>.csv` and `measurements_<var>.csv`
/// into `out_dir`; returns the written paths.
pub fn export_sweep(result: &SweepResult, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, SweepError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let var = &result.variable;
    let params = out_dir.join(format!("params_{var}.csv"));
    let loops = out_dir.join(format!("loops_{var}.csv"));
    let meas = out_dir.join(format!("measurements_{var}.csv"));

    let mut f = create(&params)?;
    let w = |f: &mut std::io::BufWriter<std::fs::File>, p: &Path, line: String| writeln!(f, "{line}").map_err(|e| io_err(p, e));
    w(&mut f, &params, params_header().join(","))?;
    for (i, p) in result.points.iter().enumerate() {
        let mut row = vec![i.to_string(), p.value.to_string()];
        for b in &p.params {
            row.extend([b.mean, b.lower, b.upper, b.lower50, b.upper50].iter().map(f64::to_string));
        }
        w(&mut f, &params, row.join(","))?;
    }
    f.flush().map_err(|e| io_err(&params, e))?;

    let mut f = create(&loops)?;
    w(&mut f, &loops, "point,v,p".into())?;
    for (i, p) in result.points.iter().enumerate() {
        for (v, pr) in p.pv_loop.iter().flatten() {
            w(&mut f, &loops, format!("{i},{v},{pr}"))?;
        }
    }
    f.flush().map_err(|e| io_err(&loops, e))?;

    let mut f = create(&meas)?;
    w(&mut f, &meas, "point,value,sv,edv,esv,ef,sbp,dbp,mbp,failure".into())?;
    for (i, p) in result.points.iter().enumerate() {
        let line = match (&p.measurements, &p.failure) {
            (Some(m), _) => format!("{i},{},{},{},{},{},{},{},{},", p.value, m.sv, m.edv, m.esv, m.ef, m.sbp, m.dbp, m.mbp),
            (None, fail) => format!(
                "{i},{},,,,,,,,\"{}\"",
                p.value,
                fail.as_deref().unwrap_or("unknown").replace('"', "'")
            ),
        };
        w(&mut f, &meas, line)?;
    }
    f.flush().map_err(|e| io_err(&meas, e))?;
    Ok(vec![params, loops, meas])
}

/// Read back `params_<var>.csv` as `(value, bands)` rows.
pub fn read_params_csv(path: &Path) -> Result<Vec<(f64, Vec<Band>)>, SweepError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| io_err(path, e))?.iter().map(String::from).collect();
    if header != params_header() {
        return Err(io_err(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let nums: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| io_err(path, e)))
            .collect::<Result<_, _>>()?;
        let bands = nums[1..]
            .chunks(5)
            .map(|c| Band {
                mean: c[0],
                lower: c[1],
                upper: c[2],
                lower50: c[3],
                upper50: c[4],
            })
            .collect();
        out.push((nums[0], bands));
    }
    Ok(out)
}
