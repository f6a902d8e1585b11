//! File-based pipeline commands behind the `heartbrain` binary.
//!
//! Every command writes its artifacts and one `manifest.json` into its
//! output directory. Randomness derives from the command's `--seed` and a
//! fixed per-command tag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use heartbrain::baselines::{self, cross_validate_k, impute_knn, impute_mean, impute_median, mse_table, EvalResult, KNN_GRID};
use heartbrain::cohort::{self, TransformLog, NU, X_HAT, X_OBS, Y};
use heartbrain::explorer::{export_sweep, sweep, SweepSpec};
use heartbrain::joint::{infer_table, train, JointModel, TrainConfig};
use heartbrain::numerics::rng::derive_seed_tagged;
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_N_COMPLETE: usize = 2309;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COHORT_FILE: &str = "cohort.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ELBO_FILE: &str = "elbo.csv";
pub const MSE_FILE: &str = "mse.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or inputs that do not fit together (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<cohort::CohortError> for CliError {
    fn from(e: cohort::CohortError) -> Self {
        use cohort::CohortError::*;
        match e {
            Io { .. } | Simulation { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<heartbrain::joint::JointError> for CliError {
    fn from(e: heartbrain::joint::JointError) -> Self {
        use heartbrain::joint::JointError::*;
        match e {
            Config(_) | Data(_) | Cohort(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<baselines::EvalError> for CliError {
    fn from(e: baselines::EvalError) -> Self {
        match e {
            baselines::EvalError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<heartbrain::explorer::SweepError> for CliError {
    fn from(e: heartbrain::explorer::SweepError) -> Self {
        use heartbrain::explorer::SweepError::*;
        match e {
            UnknownVariable(_) | Invalid(_) | Cohort(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    /// Output hashes keyed by file name.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.outputs
            .iter()
            .map(|a| {
                let name = a.path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                (name, a.sha256.clone())
            })
            .collect()
    }
}

struct ManifestBuilder {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    derived: BTreeMap<String, u64>,
    inputs: Vec<Artifact>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &'static str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command,
            seed,
            config,
            derived: BTreeMap::new(),
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn derive(&mut self, tag: &str) -> u64 {
        let s = derive_seed_tagged(self.seed, &format!("{}/{tag}", self.command));
        self.derived.insert(tag.to_string(), s);
        s
    }

    fn input(&mut self, path: &Path) -> Result<String, CliError> {
        let a = Artifact::of(path)?;
        let h = a.sha256.clone();
        self.inputs.push(a);
        Ok(h)
    }

    fn finish(self, out_dir: &Path, outputs: &[PathBuf]) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            derived_seeds: self.derived,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        info!("{}: wrote {} artifacts and {}", manifest.command, outputs.len(), path.display());
        Ok(manifest)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Generate a synthetic cohort into `out/cohort.csv`.
pub fn cmd_generate(n: usize, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    let mb = ManifestBuilder::new("generate", seed, serde_json::json!({ "n": n }));
    let table = cohort::generate_cohort(n, seed)?;
    ensure_dir(out)?;
    let path = out.join(COHORT_FILE);
    cohort::write_csv(&table, &path)?;
    mb.finish(out, &[path])
}

/// Trained model plus what is needed to rebuild its data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: JointModel<f64>,
    pub n_complete: usize,
    pub split_seed: u64,
    pub cohort_sha256: String,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: not a checkpoint: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self).map_err(|e| io_err(path, e))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

pub fn read_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

/// Split, standardize and train; writes `checkpoint.json` and `elbo.csv`.
/// The config's own seed is replaced by one derived from `seed`.
pub fn cmd_train(cohort_path: &Path, n_complete: usize, config: &TrainConfig, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    let mut mb = ManifestBuilder::new(
        "train",
        seed,
        serde_json::json!({ "n_complete": n_complete, "train": config }),
    );
    let cohort_sha = mb.input(cohort_path)?;
    let split_seed = mb.derive("split");
    let mut config = config.clone();
    config.seed = mb.derive("model");
    config.validate()?;
    let table = cohort::read_csv(cohort_path)?;
    let split = cohort::split(&table, n_complete, split_seed)?;
    info!(
        "train: {} complete / {} incomplete subjects",
        split.complete.n_subjects(),
        split.incomplete.n_subjects()
    );
    let log = cohort::fit_transforms(&split.complete)?;
    let complete = log.apply_to(&split.complete)?;
    let (model, report) = train::<f64>(&complete, &config)?;
    heartbrain::joint::check_report(&report);
    ensure_dir(out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    Checkpoint {
        model,
        n_complete,
        split_seed,
        cohort_sha256: cohort_sha,
    }
    .write(&ckpt_path)?;
    let elbo_path = out.join(ELBO_FILE);
    report.write_csv(&elbo_path)?;
    mb.finish(out, &[ckpt_path, elbo_path])
}

/// Cohort and checkpoint loaded together, with the split rebuilt and the
/// standardization checked against the one stored at training time.
struct Loaded {
    ckpt: Checkpoint,
    split: cohort::Split,
}

fn load_pair(mb: &mut ManifestBuilder, cohort_path: &Path, ckpt_path: &Path) -> Result<Loaded, CliError> {
    let cohort_sha = mb.input(cohort_path)?;
    mb.input(ckpt_path)?;
    let ckpt = Checkpoint::read(ckpt_path)?;
    if ckpt.cohort_sha256 != cohort_sha {
        return Err(CliError::Validation(format!(
            "cohort {} (sha256 {cohort_sha}) is not the cohort the checkpoint was trained on ({})",
            cohort_path.display(),
            ckpt.cohort_sha256
        )));
    }
    let table = cohort::read_csv(cohort_path)?;
    let split = cohort::split(&table, ckpt.n_complete, ckpt.split_seed)?;
    let log: TransformLog = cohort::fit_transforms(&split.complete)?;
    if log != ckpt.model.transform_log {
        return Err(CliError::Validation(
            "standardization fitted on this cohort differs from the checkpoint's".into(),
        ));
    }
    Ok(Loaded { ckpt, split })
}

/// Joint inference and the mean/median/KNN baselines on the incomplete
/// partition, scored against the held-back truth in standardized units.
pub fn cmd_evaluate(cohort_path: &Path, ckpt_path: &Path, seed: u64, n_samples: usize, out: &Path) -> Result<RunManifest, CliError> {
    let mut mb = ManifestBuilder::new("evaluate", seed, serde_json::json!({ "n_samples": n_samples, "knn_grid": KNN_GRID, "folds": 10 }));
    let Loaded { ckpt, split } = load_pair(&mut mb, cohort_path, ckpt_path)?;
    let (infer_seed, cv_seed) = (mb.derive("infer"), mb.derive("knn_cv"));
    let log = &ckpt.model.transform_log;
    let train_std = log.apply_to(&split.complete)?;
    let test_std = log.apply_to(&split.incomplete)?;
    let truth_std = log.apply_to(&split.held_out)?;

    let inferred = infer_table(&ckpt.model, &test_std, n_samples, infer_seed)?;
    let joint_x: Vec<Vec<f64>> = inferred.iter().map(|i| i.x_hat.mean.clone()).collect();
    let joint_y: Vec<Vec<f64>> = inferred.iter().map(|i| i.y.mean.clone()).collect();

    let dist: Vec<&str> = X_OBS.iter().chain(&NU).copied().collect();
    let cv = cross_validate_k(&train_std, &KNN_GRID, 10, &dist, &X_HAT, cv_seed)?;
    info!("evaluate: KNN k = {} selected by 10-fold CV", cv.best_k);
    let mean = impute_mean(&train_std, &test_std, &X_HAT)?;
    let median = impute_median(&train_std, &test_std, &X_HAT)?;
    let knn = impute_knn(&train_std, &test_std, cv.best_k, &dist, &X_HAT)?;

    let ids = &split.held_out.subject_ids;
    let truth_x = truth_std.matrix(&X_HAT)?;
    let truth_y = truth_std.matrix(&Y)?;
    let mut result: EvalResult = mse_table(
        ids,
        &truth_x,
        &[("joint", &joint_x), ("mean", &mean), ("median", &median), ("knn", &knn)],
        &X_HAT,
    )?;
    result.errors.extend(mse_table(ids, &truth_y, &[("joint", &joint_y)], &Y)?.errors);
    result.compare("joint", &["mean", "median", "knn"], &X_HAT, 0.05)?;
    result.extras.insert("knn_k".into(), cv.best_k as f64);
    for (k, cv_mse) in cv.grid.iter().zip(&cv.mse) {
        result.extras.insert(format!("knn_cv_mse_k{k}"), *cv_mse);
    }
    for (j, name) in Y.iter().enumerate() {
        let t: Vec<f64> = truth_y.iter().map(|r| r[j]).collect();
        let p: Vec<f64> = joint_y.iter().map(|r| r[j]).collect();
        let r2 = baselines::r_squared(&t, &p);
        info!("evaluate: {name} R^2 = {r2:.3}");
        result.extras.insert(format!("r2_{name}"), r2);
    }

    ensure_dir(out)?;
    let mse_path = out.join(MSE_FILE);
    result.write_csv(&mse_path)?;
    let summary_path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&result.summary_json()).map_err(|e| io_err(&summary_path, e))?;
    std::fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;
    mb.finish(out, &[mse_path, summary_path])
}

/// Sweep one conditioning variable over the training partition's
/// 5th-95th percentile range and export the trajectories and PV loops.
pub fn cmd_sweep(
    ckpt_path: &Path,
    cohort_path: &Path,
    variable: &str,
    n_points: usize,
    n_mc: usize,
    seed: u64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let mut mb = ManifestBuilder::new(
        "sweep",
        seed,
        serde_json::json!({ "variable": variable, "n_points": n_points, "n_mc": n_mc }),
    );
    if !NU.contains(&variable) {
        return Err(CliError::Validation(format!(
            "unknown variable `{variable}`; valid names: {}",
            NU.join(", ")
        )));
    }
    let Loaded { ckpt, split } = load_pair(&mut mb, cohort_path, ckpt_path)?;
    let sweep_seed = mb.derive(variable);
    let spec = SweepSpec::from_cohort(variable, n_points, n_mc, &split.complete)?;
    let result = sweep(&ckpt.model, &split.complete, &spec, sweep_seed)?;
    let failed = result.points.iter().filter(|p| p.failure.is_some()).count();
    if failed > 0 {
        log::warn!("sweep {variable}: {failed} of {n_points} grid points failed to simulate");
    }
    let files = export_sweep(&result, out)?;
    mb.finish(out, &files)
}
