//! Independent per-target Gaussian-process regression with a zero prior
//! mean and an ARD squared-exponential kernel.

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::linalg::{cholesky_inverse, cholesky_log_det, forward_substitute};
use crate::numerics::special::{sigmoid, softplus, softplus_inverse, LN_2PI};
use crate::numerics::{cholesky_factor, cholesky_solve, DenseMatrix, NumericsError, Rng, Tape, Var};
use crate::Scalar;

/// Added to every Gram diagonal before factorization.
pub const JITTER: f64 = 1e-8;
/// Lower bound of every positive hyperparameter (`softplus(raw) + FLOOR`).
pub const POSITIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Gram matrix not positive definite at pivot {pivot} (noise floor too low?)")]
    Cholesky { pivot: usize },
    #[error("GP fit diverged for target {target} at step {step}")]
    Diverged { target: usize, step: usize },
    #[error("GP needs at least one training point")]
    Empty,
    #[error("GP model has no cached factors; rebuild before predicting")]
    Unfitted,
    #[error(transparent)]
    Numerics(NumericsError),
}

impl From<NumericsError> for GpError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NotPositiveDefinite { pivot } => GpError::Cholesky { pivot },
            NumericsError::DimensionMismatch { expected, got } => GpError::DimensionMismatch { expected, got },
            other => GpError::Numerics(other),
        }
    }
}

fn to_raw<T: Scalar>(v: T) -> T {
    softplus_inverse((v - T::lit(POSITIVE_FLOOR)).max(T::min_positive_value()))
}

fn from_raw<T: Scalar>(r: T) -> T {
    softplus(r) + T::lit(POSITIVE_FLOOR)
}

/// Hyperparameters of one target: amplitude, per-predictor length scales,
/// observation-noise standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TargetHyper<T> {
    pub alpha: T,
    pub beta: Vec<T>,
    pub noise: T,
}

impl<T: Scalar> TargetHyper<T> {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Unconstrained coordinates `[alpha, beta.., noise]`.
    pub fn to_raw(&self) -> Vec<T> {
        std::iter::once(self.alpha)
            .chain(self.beta.iter().copied())
            .chain(std::iter::once(self.noise))
            .map(to_raw)
            .collect()
    }

    pub fn from_raw(raw: &[T]) -> Self {
        let d = raw.len() - 2;
        Self {
            alpha: from_raw(raw[0]),
            beta: raw[1..=d].iter().map(|&r| from_raw(r)).collect(),
            noise: from_raw(raw[d + 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KernelHyper<T> {
    pub targets: Vec<TargetHyper<T>>,
}

impl<T: Scalar> KernelHyper<T> {
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    /// Scale-aware defaults: `alpha = std(y)`, `beta` = median pairwise
    /// distance per input dimension, `noise = 0.1·std(y)`.
    pub fn initial(x: &DenseMatrix<T>, ys: &[Vec<T>]) -> Self {
        let beta = median_pairwise_distance(x);
        let targets = ys
            .iter()
            .map(|y| {
                let s = std_dev(y).max(T::lit(1e-3));
                TargetHyper {
                    alpha: s,
                    beta: beta.clone(),
                    noise: T::lit(0.1) * s,
                }
            })
            .collect();
        Self { targets }
    }
}

fn std_dev<T: Scalar>(y: &[T]) -> T {
    let n = T::lit(y.len() as f64);
    let m = y.iter().copied().sum::<T>() / n;
    (y.iter().map(|v| (*v - m) * (*v - m)).sum::<T>() / n).sqrt()
}

fn median_pairwise_distance<T: Scalar>(x: &DenseMatrix<T>) -> Vec<T> {
    // Deterministic subsample keeps this quadratic step cheap.
    let n = x.rows().min(300);
    (0..x.cols())
        .map(|i| {
            let mut d: Vec<T> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
            for a in 0..n {
                for b in 0..a {
                    d.push((x[(a, i)] - x[(b, i)]).abs());
                }
            }
            if d.is_empty() {
                return T::one();
            }
            d.sort_by(|p, q| p.partial_cmp(q).expect("finite inputs"));
            let m = d[d.len() / 2];
            if m > T::zero() {
                m
            } else {
                T::one()
            }
        })
        .collect()
}

/// `α² · exp(−Σ_i (x_i − x'_i)² / (2β_i²))` for target `j`.
pub fn kernel<T: Scalar>(x: &[T], x2: &[T], j: usize, hyper: &KernelHyper<T>) -> Result<T, GpError> {
    let h = &hyper.targets[j];
    if x.len() != h.dim() || x2.len() != h.dim() {
        return Err(GpError::DimensionMismatch {
            expected: h.dim(),
            got: if x.len() != h.dim() { x.len() } else { x2.len() },
        });
    }
    Ok(kernel_unchecked(x, x2, h))
}

#[inline]
fn kernel_unchecked<T: Scalar>(x: &[T], x2: &[T], h: &TargetHyper<T>) -> T {
    let mut s = T::zero();
    for ((&a, &b), &beta) in x.iter().zip(x2).zip(&h.beta) {
        let d = (a - b) / beta;
        s = s + d * d;
    }
    h.alpha * h.alpha * (T::lit(-0.5) * s).exp()
}

/// Kernel part of the Gram matrix (no noise, no jitter).
pub fn gram<T: Scalar>(x: &DenseMatrix<T>, h: &TargetHyper<T>) -> DenseMatrix<T> {
    let n = x.rows();
    let mut k = DenseMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = kernel_unchecked(x.row(a), x.row(b), h);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

fn noisy_gram<T: Scalar>(kf: &DenseMatrix<T>, h: &TargetHyper<T>) -> DenseMatrix<T> {
    let mut k = kf.clone();
    k.add_diagonal(h.noise * h.noise + T::lit(JITTER));
    k
}

fn check_shapes<T: Scalar>(x: &DenseMatrix<T>, y: &[T], h: &TargetHyper<T>) -> Result<(), GpError> {
    if x.rows() == 0 {
        return Err(GpError::Empty);
    }
    if y.len() != x.rows() {
        return Err(GpError::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if x.cols() != h.dim() {
        return Err(GpError::DimensionMismatch {
            expected: h.dim(),
            got: x.cols(),
        });
    }
    Ok(())
}

/// `log N(y | 0, K + σ²I)` evaluated through a Cholesky factor.
pub fn log_marginal_likelihood<T: Scalar>(x: &DenseMatrix<T>, y: &[T], h: &TargetHyper<T>) -> Result<T, GpError> {
    check_shapes(x, y, h)?;
    let l = cholesky_factor(&noisy_gram(&gram(x, h), h))?;
    let a = cholesky_solve(&l, y)?;
    Ok(lml_value(y, &a, &l))
}

fn lml_value<T: Scalar>(y: &[T], a: &[T], l: &DenseMatrix<T>) -> T {
    let n = T::lit(y.len() as f64);
    let fit: T = y.iter().zip(a).map(|(p, q)| *p * *q).sum();
    T::lit(-0.5) * fit - cholesky_log_det(l) - T::lit(0.5) * n * T::lit(LN_2PI)
}

/// Log marginal likelihood with its analytic gradient.
#[derive(Debug, Clone)]
pub struct LmlGrad<T> {
    pub value: T,
    pub d_alpha: T,
    pub d_beta: Vec<T>,
    pub d_noise: T,
    /// `∂/∂x_ai`, present when requested.
    pub d_inputs: Option<DenseMatrix<T>>,
}

/// Value and gradient using `∂L/∂K = ½(a aᵀ − K⁻¹)`, `a = K⁻¹y`.
pub fn lml_and_grad<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &[T],
    h: &TargetHyper<T>,
    input_grad: bool,
) -> Result<LmlGrad<T>, GpError> {
    check_shapes(x, y, h)?;
    let (n, d) = (x.rows(), x.cols());
    let kf = gram(x, h);
    let l = cholesky_factor(&noisy_gram(&kf, h))?;
    let a = cholesky_solve(&l, y)?;
    let value = lml_value(y, &a, &l);
    let kinv = cholesky_inverse(&l);
    let half = T::lit(0.5);
    let two = T::lit(2.0);

    let mut d_alpha = T::zero();
    let mut d_beta = vec![T::zero(); d];
    let mut d_noise = T::zero();
    let mut d_inputs = input_grad.then(|| DenseMatrix::zeros(n, d));
    let inv_beta2: Vec<T> = h.beta.iter().map(|b| T::one() / (*b * *b)).collect();
    let inv_beta3: Vec<T> = h.beta.iter().map(|b| T::one() / (*b * *b * *b)).collect();
    for p in 0..n {
        let xp = x.row(p);
        // Diagonal: the kernel part depends on alpha only.
        let w_pp = half * (a[p] * a[p] - kinv[(p, p)]);
        d_alpha = d_alpha + w_pp * two * kf[(p, p)] / h.alpha;
        d_noise = d_noise + w_pp * two * h.noise;
        for q in 0..p {
            // Off-diagonal pairs counted twice by symmetry.
            let wk = (a[p] * a[q] - kinv[(p, q)]) * kf[(p, q)];
            d_alpha = d_alpha + wk * two / h.alpha;
            let xq = x.row(q);
            for i in 0..d {
                let diff = xp[i] - xq[i];
                d_beta[i] = d_beta[i] + wk * diff * diff * inv_beta3[i];
                if let Some(g) = d_inputs.as_mut() {
                    let gi = wk * diff * inv_beta2[i];
                    g[(p, i)] = g[(p, i)] - gi;
                    g[(q, i)] = g[(q, i)] + gi;
                }
            }
        }
    }
    Ok(LmlGrad {
        value,
        d_alpha,
        d_beta,
        d_noise,
        d_inputs,
    })
}

/// Log marginal likelihood as a single tape node whose parents are the
/// positive hyperparameters `alpha`, `beta`, `noise` and every input cell.
pub fn lml_node<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &[Vec<Var>],
    y: &[T],
    alpha: Var,
    beta: &[Var],
    noise: Var,
) -> Result<Var, GpError> {
    let n = inputs.len();
    let d = beta.len();
    let mut data = Vec::with_capacity(n * d);
    for row in inputs {
        if row.len() != d {
            return Err(GpError::DimensionMismatch { expected: d, got: row.len() });
        }
        data.extend(row.iter().map(|v| tape.value(*v)));
    }
    let x = DenseMatrix::new(n, d, data)?;
    let h = TargetHyper {
        alpha: tape.value(alpha),
        beta: tape.values(beta),
        noise: tape.value(noise),
    };
    let g = lml_and_grad(&x, y, &h, true)?;
    let gx = g.d_inputs.expect("requested");
    let mut parents = Vec::with_capacity(2 + d + n * d);
    let mut partials = Vec::with_capacity(parents.capacity());
    parents.push(alpha);
    partials.push(g.d_alpha);
    parents.extend_from_slice(beta);
    partials.extend_from_slice(&g.d_beta);
    parents.push(noise);
    partials.push(g.d_noise);
    for (row, grow) in inputs.iter().zip(0..n) {
        parents.extend_from_slice(row);
        partials.extend_from_slice(gx.row(grow));
    }
    Ok(tape.custom(g.value, &parents, &partials))
}

/// Posterior predictive moments of one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub mean: T,
    pub variance: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct GpCheckpoint<T> {
    hyper: KernelHyper<T>,
    ref_inputs: DenseMatrix<T>,
    ref_targets: Vec<Vec<T>>,
}

/// Fitted GP with cached Cholesky factors of `K + σ²I` per target.
/// Serializes hyperparameters and reference data; factors are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "GpCheckpoint<T>", into = "GpCheckpoint<T>")]
pub struct GPModel<T> {
    pub hyper: KernelHyper<T>,
    pub ref_inputs: DenseMatrix<T>,
    pub ref_targets: Vec<Vec<T>>,
    chol_cache: Vec<DenseMatrix<T>>,
    weights: Vec<Vec<T>>,
}

impl<T: Scalar> From<GPModel<T>> for GpCheckpoint<T> {
    fn from(m: GPModel<T>) -> Self {
        Self {
            hyper: m.hyper,
            ref_inputs: m.ref_inputs,
            ref_targets: m.ref_targets,
        }
    }
}

impl<T: Scalar> TryFrom<GpCheckpoint<T>> for GPModel<T> {
    type Error = GpError;
    fn try_from(c: GpCheckpoint<T>) -> Result<Self, GpError> {
        GPModel::new(c.hyper, c.ref_inputs, c.ref_targets)
    }
}

impl<T: Scalar> GPModel<T> {
    /// Condition on `(ref_inputs, ref_targets)` and build the factor cache.
    pub fn new(hyper: KernelHyper<T>, ref_inputs: DenseMatrix<T>, ref_targets: Vec<Vec<T>>) -> Result<Self, GpError> {
        if ref_targets.len() != hyper.n_targets() {
            return Err(GpError::DimensionMismatch {
                expected: hyper.n_targets(),
                got: ref_targets.len(),
            });
        }
        let mut m = Self {
            hyper,
            ref_inputs,
            ref_targets,
            chol_cache: Vec::new(),
            weights: Vec::new(),
        };
        m.rebuild_cache()?;
        Ok(m)
    }

    pub fn rebuild_cache(&mut self) -> Result<(), GpError> {
        let mut chol = Vec::with_capacity(self.hyper.n_targets());
        let mut weights = Vec::with_capacity(self.hyper.n_targets());
        for (h, y) in self.hyper.targets.iter().zip(&self.ref_targets) {
            check_shapes(&self.ref_inputs, y, h)?;
            let l = cholesky_factor(&noisy_gram(&gram(&self.ref_inputs, h), h))?;
            weights.push(cholesky_solve(&l, y)?);
            chol.push(l);
        }
        self.chol_cache = chol;
        self.weights = weights;
        Ok(())
    }

    pub fn chol_cache(&self) -> &[DenseMatrix<T>] {
        &self.chol_cache
    }

    pub fn n_targets(&self) -> usize {
        self.hyper.n_targets()
    }

    pub fn input_dim(&self) -> usize {
        self.ref_inputs.cols()
    }

    fn check_query(&self, x: &[T]) -> Result<(), GpError> {
        if self.chol_cache.len() != self.n_targets() {
            return Err(GpError::Unfitted);
        }
        if x.len() != self.input_dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn cross_kernel(&self, x: &[T], h: &TargetHyper<T>) -> Vec<T> {
        let inv: Vec<T> = h.beta.iter().map(|b| T::one() / *b).collect();
        let a2 = h.alpha * h.alpha;
        let half = T::lit(-0.5);
        (0..self.ref_inputs.rows())
            .map(|r| {
                let mut s = T::zero();
                for ((&a, &b), &ib) in x.iter().zip(self.ref_inputs.row(r)).zip(&inv) {
                    let d = (a - b) * ib;
                    s = s + d * d;
                }
                a2 * (half * s).exp()
            })
            .collect()
    }

    /// Posterior means only (no triangular solves).
    pub fn predict_mean(&self, x: &[T]) -> Result<Vec<T>, GpError> {
        self.check_query(x)?;
        Ok(self
            .hyper
            .targets
            .iter()
            .zip(&self.weights)
            .map(|(h, w)| {
                let ks = self.cross_kernel(x, h);
                ks.iter().zip(w).map(|(k, a)| *k * *a).sum()
            })
            .collect())
    }

    /// Posterior mean and predictive variance (including noise) per target.
    pub fn predict(&self, x: &[T]) -> Result<Vec<Prediction<T>>, GpError> {
        self.check_query(x)?;
        let mut out = Vec::with_capacity(self.n_targets());
        for ((h, w), l) in self.hyper.targets.iter().zip(&self.weights).zip(&self.chol_cache) {
            let ks = self.cross_kernel(x, h);
            let mean = ks.iter().zip(w).map(|(k, a)| *k * *a).sum();
            let v = forward_substitute(l, &ks)?;
            let explained: T = v.iter().map(|e| *e * *e).sum();
            let latent = (h.alpha * h.alpha - explained).max(T::zero());
            out.push(Prediction {
                mean,
                variance: latent + h.noise * h.noise,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Random subset size per step; `None` uses every point.
    pub subset: Option<usize>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            subset: None,
            seed: 0,
        }
    }
}

/// Per-target training curves (log marginal likelihood per point).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub curves: Vec<Vec<f64>>,
    pub non_monotone_steps: Vec<usize>,
}

/// Independent gradient ascent (Adam, softplus coordinates) on each
/// target's log marginal likelihood, then conditioning on all points.
pub fn fit<T: Scalar>(
    x: &DenseMatrix<T>,
    ys: &[Vec<T>],
    init: &KernelHyper<T>,
    opts: &FitOptions,
) -> Result<(GPModel<T>, FitReport), GpError> {
    if ys.len() != init.n_targets() {
        return Err(GpError::DimensionMismatch {
            expected: init.n_targets(),
            got: ys.len(),
        });
    }
    let n = x.rows();
    let master = Rng::new(opts.seed);
    let mut report = FitReport::default();
    let mut hyper = init.clone();
    for (j, y) in ys.iter().enumerate() {
        check_shapes(x, y, &init.targets[j])?;
        let mut curve: Vec<f64> = Vec::with_capacity(opts.steps);
        let mut non_monotone = 0;
        if opts.steps > 0 {
            let mut raw = init.targets[j].to_raw();
            let mut opt = crate::optim::Optimizer::new(crate::optim::OptimizerKind::Adam, raw.len(), T::lit(opts.learning_rate));
            let mut rng = master.derive(j as u64);
            for step in 0..opts.steps {
                let h = TargetHyper::from_raw(&raw);
                let g = match opts.subset {
                    Some(m) if m < n => {
                        let mut idx = rng.permutation(n);
                        idx.truncate(m);
                        idx.sort_unstable();
                        let xs = select_rows(x, &idx);
                        let yv: Vec<T> = idx.iter().map(|&i| y[i]).collect();
                        lml_and_grad(&xs, &yv, &h, false)?
                    }
                    _ => lml_and_grad(x, y, &h, false)?,
                };
                let per_point = g.value.as_f64() / opts.subset.unwrap_or(n).min(n) as f64;
                if !per_point.is_finite() {
                    return Err(GpError::Diverged { target: j, step });
                }
                if let Some(&prev) = curve.last() {
                    if per_point < prev - 1e-9 * prev.abs().max(1.0) {
                        non_monotone += 1;
                        debug!("gp target {j}: objective decreased at step {step} ({prev} -> {per_point})");
                    }
                }
                curve.push(per_point);
                let chain: Vec<T> = std::iter::once(g.d_alpha)
                    .chain(g.d_beta.iter().copied())
                    .chain(std::iter::once(g.d_noise))
                    .zip(&raw)
                    .map(|(d, r)| d * sigmoid(*r))
                    .collect();
                opt.step(&mut raw, &chain);
            }
            hyper.targets[j] = TargetHyper::from_raw(&raw);
        }
        report.curves.push(curve);
        report.non_monotone_steps.push(non_monotone);
    }
    let model = GPModel::new(hyper, x.clone(), ys.to_vec())?;
    Ok((model, report))
}

pub(crate) fn select_rows<T: Scalar>(x: &DenseMatrix<T>, idx: &[usize]) -> DenseMatrix<T> {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    DenseMatrix::new(idx.len(), x.cols(), data).expect("consistent shape")
}
