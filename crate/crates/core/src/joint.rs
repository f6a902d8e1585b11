//! Joint training of the conditional VAE and the GP emulator by stochastic
//! maximization of the evidence lower bound
//!
//! `E_q log p(y | x_obs, z) + E_q log p(x̂ | ν, z) − KL(q(z | x_obs, ν) ‖ p(z | ν))`,
//!
//! with the first term realized as the exact GP marginal likelihood of each
//! minibatch, and end-to-end inference on subjects missing `x̂` and `y`.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortError, FeatureTable, TransformLog, NU, X_HAT, X_OBS, Y};
use crate::cvae::{
    gaussian_log_likelihood_tape, kl_divergence_tape, reparam_tape, reparam_with_eps, Cvae, CvaeError, CvaeShape,
    CvaeVars,
};
use crate::gp::{self, lml_node, FitOptions, GPModel, GpError, KernelHyper, TargetHyper, POSITIVE_FLOOR};
use crate::numerics::{DenseMatrix, Rng, Tape, Var};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step} (non-finite objective)")]
    Diverged {
        epoch: usize,
        step: usize,
        /// JSON of the last parameters that produced a finite objective.
        last_good: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// How the GP hyperparameters are updated relative to the CVAE weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpUpdate {
    /// One optimizer step on all parameters.
    Joint,
    /// Even steps update the CVAE, odd steps the GP.
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub mc_samples: usize,
    pub kl_warmup_epochs: usize,
    /// Constant weight on the GP term.
    pub gp_weight: f64,
    pub gp_update: GpUpdate,
    pub latent_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Post-training hyperparameter refit on the frozen reference set.
    pub refit_steps: usize,
    pub refit_learning_rate: f64,
    pub refit_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 10.0,
            mc_samples: 1,
            kl_warmup_epochs: 50,
            gp_weight: 1.0,
            gp_update: GpUpdate::Joint,
            latent_dim: crate::cvae::LATENT_DIM,
            hidden: crate::cvae::HIDDEN,
            seed: 0,
            refit_steps: 200,
            refit_learning_rate: 0.02,
            refit_subset: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), JointError> {
        let err = |m: &str| Err(JointError::Config(m.to_string()));
        if self.mc_samples < 1 {
            return err("mc_samples must be at least 1");
        }
        if self.kl_warmup_epochs > self.epochs {
            return err("kl_warmup_epochs must not exceed epochs");
        }
        if self.batch_size < 2 {
            return err("batch_size must be at least 2 (the GP term needs two points)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err("lr_decay must lie in (0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return err("grad_clip must be positive");
        }
        if self.latent_dim < 1 || self.hidden < 1 {
            return err("latent_dim and hidden must be positive");
        }
        if self.refit_subset < 2 {
            return err("refit_subset must be at least 2");
        }
        Ok(())
    }

    /// KL weight during `epoch` (linear warm-up from 0).
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// Standardized per-subject arrays; masked cells are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub x_obs: Vec<Vec<T>>,
    pub nu: Vec<Vec<T>>,
    pub x_hat: Vec<Vec<T>>,
    pub y: Vec<Vec<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_table(table: &FeatureTable) -> Result<Self, JointError> {
        let grab = |names: &[&str]| -> Result<Vec<Vec<T>>, JointError> {
            Ok(table
                .matrix(names)?
                .into_iter()
                .map(|r| r.into_iter().map(T::lit).collect())
                .collect())
        };
        Ok(Self {
            x_obs: grab(&X_OBS)?,
            nu: grab(&NU)?,
            x_hat: grab(&X_HAT)?,
            y: grab(&Y)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_obs.is_empty()
    }

    fn require_complete(&self) -> Result<(), JointError> {
        let all_finite = |rows: &[Vec<T>]| rows.iter().flatten().all(|v| v.is_finite());
        if all_finite(&self.x_obs) && all_finite(&self.nu) && all_finite(&self.x_hat) && all_finite(&self.y) {
            Ok(())
        } else {
            Err(JointError::Data("training requires fully observed x_obs, ν, x̂ and y".into()))
        }
    }

    pub fn target_columns(&self, idx: &[usize]) -> Vec<Vec<T>> {
        let k = self.y.first().map_or(0, |r| r.len());
        (0..k).map(|j| idx.iter().map(|&i| self.y[i][j]).collect()).collect()
    }
}

/// Trainable state: CVAE weights plus unconstrained GP hyperparameters,
/// laid out per target as `[alpha, beta.., noise]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct JointParams<T> {
    pub cvae: Cvae<T>,
    pub gp_raw: Vec<T>,
    pub n_targets: usize,
}

impl<T: Scalar> JointParams<T> {
    pub fn new(cvae: Cvae<T>, hyper: &KernelHyper<T>) -> Self {
        Self {
            cvae,
            gp_raw: hyper.targets.iter().flat_map(|t| t.to_raw()).collect(),
            n_targets: hyper.n_targets(),
        }
    }

    /// GP input width `dim(x_obs) + L`.
    pub fn gp_dim(&self) -> usize {
        self.cvae.shape.x_obs_dim + self.cvae.shape.latent_dim
    }

    pub fn gp_hyper(&self) -> KernelHyper<T> {
        let w = self.gp_dim() + 2;
        KernelHyper {
            targets: self.gp_raw.chunks(w).map(TargetHyper::from_raw).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.cvae.n_params() + self.gp_raw.len()
    }

    pub fn flat(&self) -> Vec<T> {
        let mut v = self.cvae.flat_params();
        v.extend_from_slice(&self.gp_raw);
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let c = self.cvae.n_params();
        self.cvae.set_flat_params(&flat[..c]);
        self.gp_raw.copy_from_slice(&flat[c..]);
    }
}

/// Weights on the GP and KL terms (reconstruction always has weight 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub gp: f64,
    pub kl: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { gp: 1.0, kl: 1.0 }
    }
}

/// Unweighted ELBO terms, averaged per subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub gp: f64,
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    fn new(gp: f64, recon: f64, kl: f64) -> Self {
        Self {
            total: gp + recon - kl,
            gp,
            recon,
            kl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElboOutput<T> {
    /// `(w_gp·gp + recon − w_kl·kl) / B`.
    pub objective: T,
    pub terms: ElboTerms,
    /// Gradient of `objective` in [`JointParams::flat`] order.
    pub gradient: Vec<T>,
}

/// Standard-normal noise for `S` samples × `B` subjects × `L` latents.
pub fn draw_eps<T: Scalar>(rng: &mut Rng, samples: usize, subjects: usize, latent: usize) -> Vec<Vec<Vec<T>>> {
    (0..samples)
        .map(|_| {
            (0..subjects)
                .map(|_| (0..latent).map(|_| T::lit(rng.standard_normal())).collect())
                .collect()
        })
        .collect()
}

/// ELBO of the subjects `idx` with fresh reparametrization noise.
pub fn elbo_batch<T: Scalar>(
    params: &JointParams<T>,
    data: &Dataset<T>,
    idx: &[usize],
    weights: TermWeights,
    mc_samples: usize,
    rng: &mut Rng,
) -> Result<ElboOutput<T>, JointError> {
    let eps = draw_eps(rng, mc_samples, idx.len(), params.cvae.shape.latent_dim);
    elbo_batch_with_eps(&mut Tape::new(), params, data, idx, weights, &eps)
}

/// ELBO with frozen noise `eps[s][b][l]`; `tape` is scratch space.
pub fn elbo_batch_with_eps<T: Scalar>(
    tape: &mut Tape<T>,
    params: &JointParams<T>,
    data: &Dataset<T>,
    idx: &[usize],
    weights: TermWeights,
    eps: &[Vec<Vec<T>>],
) -> Result<ElboOutput<T>, JointError> {
    let b = idx.len();
    if b < 2 {
        return Err(JointError::Config(format!("batch of {b} subjects; the GP term needs at least 2")));
    }
    if eps.is_empty() || eps.iter().any(|s| s.len() != b) {
        return Err(JointError::Config("noise draws do not match the batch".into()));
    }
    let cvae = &params.cvae;
    let shape = cvae.shape;
    let d = params.gp_dim();
    tape.clear();

    let flat = params.flat();
    let pvars = tape.inputs(&flat);
    let cvars = CvaeVars::split(&pvars, cvae.param_sizes());
    let gp_vars = &pvars[cvae.n_params()..];
    // Positive hyperparameters on the tape: softplus(raw) + floor.
    let positive: Vec<Var> = gp_vars
        .iter()
        .map(|&v| {
            let s = tape.softplus(v);
            tape.shift(s, T::lit(POSITIVE_FLOOR))
        })
        .collect();

    let mut kl_terms = Vec::with_capacity(b);
    let mut q_stats = Vec::with_capacity(b);
    let mut x_obs_vars = Vec::with_capacity(b);
    let mut nu_vars = Vec::with_capacity(b);
    for &i in idx {
        let xo = tape.constants(&data.x_obs[i]);
        let nu = tape.constants(&data.nu[i]);
        let (qm, ql) = cvae.encode_tape(tape, &cvars, &xo, &nu);
        let (pm, pl) = cvae.prior_tape(tape, &cvars, &nu);
        kl_terms.push(kl_divergence_tape(tape, &qm, &ql, &pm, &pl));
        q_stats.push((qm, ql));
        x_obs_vars.push(xo);
        nu_vars.push(nu);
    }
    let kl = tape.sum(&kl_terms);

    let targets = data.target_columns(idx);
    let mut gp_terms = Vec::new();
    let mut recon_terms = Vec::new();
    for eps_s in eps {
        let mut rows = Vec::with_capacity(b);
        for (k, &i) in idx.iter().enumerate() {
            if eps_s[k].len() != shape.latent_dim {
                return Err(JointError::Config("noise draws do not match the latent dimension".into()));
            }
            let (qm, ql) = &q_stats[k];
            let z = reparam_tape(tape, qm, ql, &eps_s[k]);
            let (dm, dl) = cvae.decode_tape(tape, &cvars, &z, &nu_vars[k]);
            recon_terms.push(gaussian_log_likelihood_tape(tape, &data.x_hat[i], &dm, &dl));
            rows.push(x_obs_vars[k].iter().chain(&z).copied().collect::<Vec<Var>>());
        }
        for (j, y) in targets.iter().enumerate() {
            let h = &positive[j * (d + 2)..(j + 1) * (d + 2)];
            gp_terms.push(lml_node(tape, &rows, y, h[0], &h[1..=d], h[d + 1])?);
        }
    }
    let s = T::lit(eps.len() as f64);
    let gp_sum = tape.sum(&gp_terms);
    let recon_sum = tape.sum(&recon_terms);
    let inv = T::one() / (s * T::lit(b as f64));
    let gp_term = tape.scale(gp_sum, inv);
    let recon_term = tape.scale(recon_sum, inv);
    let kl_term = tape.scale(kl, T::one() / T::lit(b as f64));

    let wg = tape.scale(gp_term, T::lit(weights.gp));
    let wk = tape.scale(kl_term, T::lit(weights.kl));
    let partial = tape.add(wg, recon_term);
    let objective = tape.sub(partial, wk);

    let grads = tape.gradient(objective);
    Ok(ElboOutput {
        objective: tape.value(objective),
        terms: ElboTerms::new(
            tape.value(gp_term).as_f64(),
            tape.value(recon_term).as_f64(),
            tape.value(kl_term).as_f64(),
        ),
        gradient: grads.collect(&pvars),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboRow {
    pub epoch: usize,
    pub total: f64,
    pub gp: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Per-epoch means over batches of the unweighted ELBO terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub rows: Vec<ElboRow>,
}

impl ElboReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), JointError> {
        let io = |e: std::io::Error| JointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "epoch,total,gp,recon,kl").map_err(io)?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{}", r.epoch, r.total, r.gp, r.recon, r.kl).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    /// Trailing moving average with the given window.
    pub fn smoothed_totals(&self, window: usize) -> Vec<f64> {
        let t: Vec<f64> = self.rows.iter().map(|r| r.total).collect();
        (0..t.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                t[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Trained model bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct JointModel<T> {
    pub cvae: Cvae<T>,
    pub gp: GPModel<T>,
    pub config: TrainConfig,
    pub transform_log: TransformLog,
}

impl<T: Scalar> JointModel<T> {
    pub fn save(&self, path: &Path) -> Result<(), JointError> {
        let text = serde_json::to_string(self).map_err(|e| JointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| JointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, JointError> {
        let io = |m: String| JointError::Io {
            path: path.display().to_string(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// Minibatches over a permutation; a trailing batch of one subject is
/// merged into its predecessor.
pub fn minibatches(perm: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = perm.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn initial_params<T: Scalar>(data: &Dataset<T>, config: &TrainConfig, rng: &Rng) -> JointParams<T> {
    let shape = CvaeShape {
        x_obs_dim: data.x_obs[0].len(),
        nu_dim: data.nu[0].len(),
        x_hat_dim: data.x_hat[0].len(),
        latent_dim: config.latent_dim,
        hidden: config.hidden,
    };
    let cvae = Cvae::new(shape, &mut rng.derive(0));
    // GP inputs at initialization: x_obs with z drawn from the N(0, I)
    // posterior the zeroed output layers produce.
    let mut zr = rng.derive(1);
    let n = data.len();
    let mut cells = Vec::with_capacity(n * (shape.x_obs_dim + shape.latent_dim));
    for i in 0..n {
        cells.extend_from_slice(&data.x_obs[i]);
        cells.extend((0..shape.latent_dim).map(|_| T::lit(zr.standard_normal())));
    }
    let x = DenseMatrix::new(n, shape.x_obs_dim + shape.latent_dim, cells).expect("shape");
    let all: Vec<usize> = (0..n).collect();
    let hyper = KernelHyper::initial(&x, &data.target_columns(&all));
    JointParams::new(cvae, &hyper)
}

/// GP reference inputs `[x_obs, E_q z]` for every subject.
pub fn posterior_mean_inputs<T: Scalar>(cvae: &Cvae<T>, data: &Dataset<T>) -> Result<DenseMatrix<T>, JointError> {
    let d = cvae.shape.x_obs_dim + cvae.shape.latent_dim;
    let mut cells = Vec::with_capacity(data.len() * d);
    for i in 0..data.len() {
        let q = cvae.encode(&data.x_obs[i], &data.nu[i])?;
        cells.extend_from_slice(&data.x_obs[i]);
        cells.extend_from_slice(&q.mu);
    }
    Ok(DenseMatrix::new(data.len(), d, cells).map_err(GpError::from)?)
}

/// Minibatch stochastic ascent on the ELBO, then freezing of the GP on
/// the full training set at posterior-mean latents.
pub fn train<T: Scalar>(
    complete: &FeatureTable,
    config: &TrainConfig,
) -> Result<(JointModel<T>, ElboReport), JointError> {
    config.validate()?;
    let data: Dataset<T> = Dataset::from_table(complete)?;
    data.require_complete()?;
    if data.len() < 2 {
        return Err(JointError::Config("need at least 2 training subjects".into()));
    }
    let root = Rng::new(config.seed);
    let mut params = initial_params(&data, config, &root.derive(0));
    let mut report = ElboReport::default();
    let n_cvae = params.cvae.n_params();
    let mut opt = Optimizer::new(config.optimizer, params.n_params(), T::lit(config.learning_rate));
    let mut flat = params.flat();
    let mut eps_rng = root.derive(2);
    let mut tape = Tape::with_capacity(1 << 16, 1 << 21);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let perm = root.derive(1).derive(epoch as u64).permutation(data.len());
        let batches = minibatches(&perm, config.batch_size);
        let weights = TermWeights {
            gp: config.gp_weight,
            kl: config.kl_weight(epoch),
        };
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            let eps = draw_eps(&mut eps_rng, config.mc_samples, batch.len(), params.cvae.shape.latent_dim);
            let out = elbo_batch_with_eps(&mut tape, &params, &data, batch, weights, &eps)?;
            if !out.objective.is_finite() || out.gradient.iter().any(|g| !g.is_finite()) {
                return Err(JointError::Diverged {
                    epoch,
                    step,
                    last_good: serde_json::to_string(&params).unwrap_or_default(),
                });
            }
            let mut g = out.gradient;
            match config.gp_update {
                GpUpdate::Joint => {}
                GpUpdate::Alternate if step % 2 == 0 => g[n_cvae..].iter_mut().for_each(|v| *v = T::zero()),
                GpUpdate::Alternate => g[..n_cvae].iter_mut().for_each(|v| *v = T::zero()),
            }
            clip_grad_norm(&mut g, T::lit(config.grad_clip));
            opt.step(&mut flat, &g);
            params.set_flat(&flat);
            let t = out.terms;
            for (acc, v) in sums.iter_mut().zip([t.total, t.gp, t.recon, t.kl]) {
                *acc += v;
            }
            step += 1;
        }
        let nb = batches.len() as f64;
        let (gp, recon, kl) = (sums[1] / nb, sums[2] / nb, sums[3] / nb);
        report.rows.push(ElboRow {
            epoch,
            total: gp + recon - kl,
            gp,
            recon,
            kl,
        });
        if epoch % 25 == 0 || epoch + 1 == config.epochs {
            info!("epoch {epoch}: elbo {:.4} (gp {gp:.4}, recon {recon:.4}, kl {kl:.4})", gp + recon - kl);
        }
        opt.set_learning_rate(opt.learning_rate() * T::lit(config.lr_decay));
    }

    let gp = freeze_gp(&params, &data, config)?;
    Ok((
        JointModel {
            cvae: params.cvae,
            gp,
            config: config.clone(),
            transform_log: complete.transform_log.clone(),
        },
        report,
    ))
}

fn freeze_gp<T: Scalar>(params: &JointParams<T>, data: &Dataset<T>, config: &TrainConfig) -> Result<GPModel<T>, JointError> {
    let x = posterior_mean_inputs(&params.cvae, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let ys = data.target_columns(&all);
    let opts = FitOptions {
        steps: config.refit_steps,
        learning_rate: config.refit_learning_rate,
        subset: Some(config.refit_subset),
        seed: crate::numerics::rng::derive_seed(config.seed, 3),
    };
    let (model, fit_report) = gp::fit(&x, &ys, &params.gp_hyper(), &opts)?;
    let drops: usize = fit_report.non_monotone_steps.iter().sum();
    if drops > 0 {
        info!("GP refit: {drops} non-monotone minibatch steps (stochastic subsets)");
    }
    Ok(model)
}

/// Predictive mean and standard deviation per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub x_hat: Moments,
    pub y: Moments,
}

impl Inference {
    /// Map standardized moments back to physical units.
    pub fn to_physical(&self, log: &TransformLog) -> Self {
        let conv = |names: &[&str], m: &Moments| {
            let (mean, std) = names
                .iter()
                .enumerate()
                .map(|(k, n)| log.invert_with_std(n, m.mean[k], m.std[k]))
                .unzip();
            Moments { mean, std }
        };
        Self {
            x_hat: conv(&X_HAT, &self.x_hat),
            y: conv(&Y, &self.y),
        }
    }
}

/// Impute `x̂` and emulate `y` for one subject (standardized units).
///
/// Means average `n_samples` draws of `z ~ q(z | x_obs, ν)`. Variances
/// add the Monte Carlo spread of the means to the model variance: mean
/// decoder variance for `x̂`, GP predictive variance at the posterior-mean
/// latent for `y`.
pub fn infer<T: Scalar>(
    model: &JointModel<T>,
    x_obs: &[T],
    nu: &[T],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Inference, JointError> {
    if n_samples == 0 {
        return Err(JointError::Config("n_samples must be at least 1".into()));
    }
    let cvae = &model.cvae;
    let q = cvae.encode(x_obs, nu)?;
    let kx = cvae.shape.x_hat_dim;
    let ky = model.gp.n_targets();
    let mut xs = vec![(0.0f64, 0.0f64, 0.0f64); kx];
    let mut ys = vec![(0.0f64, 0.0f64); ky];
    let mut input: Vec<T> = x_obs.to_vec();
    input.extend_from_slice(&q.mu);
    for _ in 0..n_samples {
        let eps: Vec<T> = (0..q.mu.len()).map(|_| T::lit(rng.standard_normal())).collect();
        let z = reparam_with_eps(&q, &eps);
        let d = cvae.decode(&z, nu)?;
        for f in 0..kx {
            let m = d.mean[f].as_f64();
            xs[f].0 += m;
            xs[f].1 += m * m;
            xs[f].2 += d.log_var[f].exp().as_f64();
        }
        input[x_obs.len()..].copy_from_slice(&z);
        for (j, m) in model.gp.predict_mean(&input)?.into_iter().enumerate() {
            let m = m.as_f64();
            ys[j].0 += m;
            ys[j].1 += m * m;
        }
    }
    input[x_obs.len()..].copy_from_slice(&q.mu);
    let at_mean = model.gp.predict(&input)?;
    let n = n_samples as f64;
    let spread = |s: f64, s2: f64| (s2 / n - (s / n).powi(2)).max(0.0);
    Ok(Inference {
        x_hat: Moments {
            mean: xs.iter().map(|v| v.0 / n).collect(),
            std: xs.iter().map(|v| (v.2 / n + spread(v.0, v.1)).sqrt()).collect(),
        },
        y: Moments {
            mean: ys.iter().map(|v| v.0 / n).collect(),
            std: ys
                .iter()
                .zip(&at_mean)
                .map(|(v, p)| (p.variance.as_f64() + spread(v.0, v.1)).sqrt())
                .collect(),
        },
    })
}

/// [`infer`] for every row of a standardized table; subject `i` uses
/// stream `i` of `seed`.
pub fn infer_table<T: Scalar>(
    model: &JointModel<T>,
    table: &FeatureTable,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Inference>, JointError> {
    let data: Dataset<T> = Dataset::from_table(table)?;
    let root = Rng::new(seed);
    (0..data.len())
        .map(|i| infer(model, &data.x_obs[i], &data.nu[i], n_samples, &mut root.derive(i as u64)))
        .collect()
}

/// Log a warning if the report's decomposition identity fails.
pub fn check_report(report: &ElboReport) -> bool {
    let ok = report
        .rows
        .iter()
        .all(|r| (r.total - (r.gp + r.recon - r.kl)).abs() <= 1e-9 * r.total.abs().max(1.0));
    if !ok {
        warn!("ELBO report violates total = gp + recon - kl");
    }
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{fit_transforms, generate_cohort};
    use crate::gp::log_marginal_likelihood;

    fn random_params(shape: CvaeShape, n_targets: usize, seed: u64, scale: f64) -> JointParams<f64> {
        let mut rng = Rng::new(seed);
        let mut cvae = Cvae::new(shape, &mut rng);
        let flat: Vec<f64> = (0..cvae.n_params()).map(|_| rng.normal(0.0, scale)).collect();
        cvae.set_flat_params(&flat);
        let d = shape.x_obs_dim + shape.latent_dim;
        let hyper = KernelHyper {
            targets: (0..n_targets)
                .map(|_| TargetHyper {
                    alpha: rng.uniform_range(0.5, 1.5),
                    beta: (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect(),
                    noise: rng.uniform_range(0.3, 0.8),
                })
                .collect(),
        };
        JointParams::new(cvae, &hyper)
    }

    fn random_data(shape: CvaeShape, n_targets: usize, n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = Rng::new(seed);
        let mut rows = |k: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..k).map(|_| rng.normal(0.0, 1.0)).collect()).collect() };
        Dataset {
            x_obs: rows(shape.x_obs_dim),
            nu: rows(shape.nu_dim),
            x_hat: rows(shape.x_hat_dim),
            y: rows(n_targets),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = CvaeShape { latent_dim: 2, hidden: 8, ..Default::default() };
        let params = random_params(shape, 5, 1, 0.4);
        let data = random_data(shape, 5, 4, 2);
        let idx = [0, 1, 2, 3];
        let eps = draw_eps(&mut Rng::new(3), 2, 4, 2);
        let w = TermWeights { gp: 1.0, kl: 0.7 };
        let mut tape = Tape::new();
        let out = elbo_batch_with_eps(&mut tape, &params, &data, &idx, w, &eps).unwrap();
        let flat = params.flat();
        let mut p = params.clone();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut f = |delta: f64| {
                let mut v = flat.clone();
                v[k] += delta;
                p.set_flat(&v);
                elbo_batch_with_eps(&mut tape, &p, &data, &idx, w, &eps).unwrap().objective
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let g = out.gradient[k];
            assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: {g} vs {fd}");
        }
    }

    #[test]
    fn term_isolation_and_decomposition() {
        let shape = CvaeShape::default();
        let params = random_params(shape, 5, 4, 0.2);
        let data = random_data(shape, 5, 6, 5);
        let idx: Vec<usize> = (0..6).collect();
        let eps = draw_eps(&mut Rng::new(6), 1, 6, shape.latent_dim);
        let mut tape = Tape::new();
        let none = TermWeights { gp: 0.0, kl: 0.0 };
        let out = elbo_batch_with_eps(&mut tape, &params, &data, &idx, none, &eps).unwrap();
        // Reconstruction recomputed without the tape.
        let mut recon = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            let q = params.cvae.encode(&data.x_obs[i], &data.nu[i]).unwrap();
            let z = reparam_with_eps(&q, &eps[0][k]);
            recon += params.cvae.decode(&z, &data.nu[i]).unwrap().log_likelihood(&data.x_hat[i]);
        }
        assert!((out.objective - recon / 6.0).abs() < 1e-10);
        let full = elbo_batch_with_eps(&mut tape, &params, &data, &idx, TermWeights::default(), &eps).unwrap();
        let t = full.terms;
        assert!((t.total - (t.gp + t.recon - t.kl)).abs() < 1e-12);
        assert!((full.objective - t.total).abs() < 1e-10);
        assert!(t.kl >= 0.0);
    }

    #[test]
    fn kl_weight_zero_removes_kl_gradient() {
        let shape = CvaeShape { hidden: 8, ..Default::default() };
        let params = random_params(shape, 5, 7, 0.3);
        let data = random_data(shape, 5, 4, 8);
        let idx = [0, 1, 2, 3];
        let eps = draw_eps(&mut Rng::new(9), 1, 4, shape.latent_dim);
        let mut tape = Tape::new();
        let a = elbo_batch_with_eps(&mut tape, &params, &data, &idx, TermWeights { gp: 1.0, kl: 0.0 }, &eps).unwrap();
        let b = elbo_batch_with_eps(&mut tape, &params, &data, &idx, TermWeights { gp: 1.0, kl: 1.0 }, &eps).unwrap();
        // The prior network only enters through the KL term.
        let sizes = params.cvae.param_sizes();
        let prior = sizes.0..sizes.0 + sizes.1;
        assert!(a.gradient[prior.clone()].iter().all(|g| *g == 0.0));
        assert!(b.gradient[prior].iter().any(|g| *g != 0.0));
        let cfg = TrainConfig { kl_warmup_epochs: 50, ..Default::default() };
        assert_eq!(cfg.kl_weight(0), 0.0);
        assert_eq!(cfg.kl_weight(25), 0.5);
        assert_eq!(cfg.kl_weight(50), 1.0);
        assert_eq!(cfg.kl_weight(400), 1.0);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let shape = CvaeShape::default();
        let params = random_params(shape, 5, 1, 0.1);
        let data = random_data(shape, 5, 3, 1);
        let r = elbo_batch(&params, &data, &[0], TermWeights::default(), 1, &mut Rng::new(0));
        assert!(matches!(r, Err(JointError::Config(_))));
    }

    #[test]
    fn single_sample_is_bit_reproducible() {
        let shape = CvaeShape::default();
        let params = random_params(shape, 5, 2, 0.2);
        let data = random_data(shape, 5, 8, 3);
        let idx: Vec<usize> = (0..8).collect();
        let a = elbo_batch(&params, &data, &idx, TermWeights::default(), 1, &mut Rng::new(11)).unwrap();
        let b = elbo_batch(&params, &data, &idx, TermWeights::default(), 1, &mut Rng::new(11)).unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    /// Trapezoid log-evidence over the three latents of a one-dimensional toy.
    fn quadrature_log_evidence(params: &JointParams<f64>, data: &Dataset<f64>, n_grid: usize) -> f64 {
        let cvae = &params.cvae;
        let hyper = params.gp_hyper();
        let mut grids = Vec::new();
        let mut logf = Vec::new();
        for i in 0..3 {
            let p = cvae.prior(&data.nu[i]).unwrap();
            let (m, s) = (p.mu[0], (0.5 * p.log_var[0]).exp());
            let g: Vec<f64> = (0..n_grid).map(|k| m - 8.0 * s + 16.0 * s * k as f64 / (n_grid - 1) as f64).collect();
            let f: Vec<f64> = g
                .iter()
                .map(|&z| {
                    let lp = crate::numerics::special::normal_log_pdf(z, m, 2.0 * s.ln());
                    lp + cvae.decode(&[z], &data.nu[i]).unwrap().log_likelihood(&data.x_hat[i])
                })
                .collect();
            grids.push(g);
            logf.push(f);
        }
        let w = |g: &[f64], k: usize| {
            let dz = g[1] - g[0];
            if k == 0 || k + 1 == g.len() { 0.5 * dz } else { dz }
        };
        let y: Vec<f64> = data.y.iter().map(|r| r[0]).collect();
        let mut terms = Vec::with_capacity(n_grid.pow(3));
        for a in 0..n_grid {
            for b in 0..n_grid {
                for c in 0..n_grid {
                    let zs = [grids[0][a], grids[1][b], grids[2][c]];
                    let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![data.x_obs[i][0], zs[i]]).collect();
                    let x = DenseMatrix::from_rows(&rows).unwrap();
                    let lml = log_marginal_likelihood(&x, &y, &hyper.targets[0]).unwrap();
                    let lw = (w(&grids[0], a) * w(&grids[1], b) * w(&grids[2], c)).ln();
                    terms.push(lml + logf[0][a] + logf[1][b] + logf[2][c] + lw);
                }
            }
        }
        crate::numerics::special::log_sum_exp(&terms)
    }

    #[test]
    fn elbo_is_below_quadrature_evidence() {
        let shape = CvaeShape { x_obs_dim: 1, nu_dim: 1, x_hat_dim: 1, latent_dim: 1, hidden: 4 };
        for seed in 0..3 {
            let params = random_params(shape, 1, 100 + seed, 0.5);
            let data = random_data(shape, 1, 3, 200 + seed);
            let out = elbo_batch(&params, &data, &[0, 1, 2], TermWeights::default(), 4000, &mut Rng::new(seed)).unwrap();
            let evidence = quadrature_log_evidence(&params, &data, 61);
            assert!(3.0 * out.objective <= evidence + 1e-3, "{} > {evidence}", 3.0 * out.objective);
        }
    }

    #[test]
    fn minibatches_merge_singletons() {
        let perm: Vec<usize> = (0..9).collect();
        let b = minibatches(&perm, 4);
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
        assert_eq!(minibatches(&perm[..8], 4).len(), 2);
        assert!(minibatches(&perm, 128).len() == 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { mc_samples: 0, ..Default::default() },
            TrainConfig { epochs: 10, kl_warmup_epochs: 20, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(JointError::Config(_))));
        }
    }

    fn small_training_table() -> FeatureTable {
        let t = generate_cohort(80, 21).unwrap();
        fit_transforms(&t).unwrap().apply_to(&t).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let table = small_training_table();
        let cfg = TrainConfig { epochs: 0, kl_warmup_epochs: 0, refit_steps: 0, ..Default::default() };
        let (model, report) = train::<f64>(&table, &cfg).unwrap();
        assert!(report.rows.is_empty());
        let data: Dataset<f64> = Dataset::from_table(&table).unwrap();
        let init = initial_params(&data, &cfg, &Rng::new(cfg.seed).derive(0));
        assert_eq!(model.cvae, init.cvae);
        assert_eq!(model.gp.hyper, init.gp_hyper());
    }

    #[test]
    fn training_is_deterministic_and_reports_consistent() {
        let table = small_training_table();
        let cfg = TrainConfig {
            epochs: 3,
            kl_warmup_epochs: 2,
            batch_size: 16,
            refit_steps: 5,
            refit_subset: 32,
            ..Default::default()
        };
        let (a, ra) = train::<f64>(&table, &cfg).unwrap();
        let (b, rb) = train::<f64>(&table, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(check_report(&ra));
        for r in &ra.rows {
            assert!((r.total - (r.gp + r.recon - r.kl)).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        a.save(&p).unwrap();
        assert_eq!(JointModel::<f64>::load(&p).unwrap(), a);
        let csv = dir.path().join("elbo.csv");
        ra.write_csv(&csv).unwrap();
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn incomplete_training_data_is_rejected() {
        let mut table = small_training_table();
        table.column_mut("sv").unwrap().mask_all();
        assert!(matches!(train::<f64>(&table, &TrainConfig::default()), Err(JointError::Data(_))));
    }

    #[test]
    fn inference_is_deterministic_and_consistent() {
        let table = small_training_table();
        let cfg = TrainConfig { epochs: 2, kl_warmup_epochs: 1, batch_size: 16, refit_steps: 5, refit_subset: 32, ..Default::default() };
        let (model, _) = train::<f64>(&table, &cfg).unwrap();
        let a = infer_table(&model, &table, 8, 4).unwrap();
        assert_eq!(a, infer_table(&model, &table, 8, 4).unwrap());
        assert!(a.iter().all(|i| i.y.std.iter().chain(&i.x_hat.std).all(|s| *s > 0.0 && s.is_finite())));
        // One sample vs many: the mean moves by less than a few MC errors.
        let data: Dataset<f64> = Dataset::from_table(&table).unwrap();
        let one = infer(&model, &data.x_obs[0], &data.nu[0], 1, &mut Rng::new(1)).unwrap();
        let many = infer(&model, &data.x_obs[0], &data.nu[0], 64, &mut Rng::new(2)).unwrap();
        for k in 0..3 {
            assert!((one.x_hat.mean[k] - many.x_hat.mean[k]).abs() <= 4.0 * many.x_hat.std[k]);
        }
        assert!(infer(&model, &data.x_obs[0], &data.nu[0], 0, &mut Rng::new(1)).is_err());
        let phys = a[0].to_physical(&model.transform_log);
        assert!(phys.y.mean.iter().all(|v| *v > 0.0));
    }
}
