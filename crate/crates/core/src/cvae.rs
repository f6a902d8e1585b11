//! Conditional VAE over the cardiac features: encoder `q(z | x_obs, ν)`,
//! conditional prior `p(z | ν)` and decoder `p(x̂ | ν, z)`, all diagonal
//! Gaussians produced by small tanh MLPs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::special::normal_log_pdf;
use crate::numerics::{Rng, Tape, Var};
use crate::Scalar;

pub const LATENT_DIM: usize = 4;
pub const HIDDEN: usize = 32;
pub const LOG_VAR_CLAMP: (f64, f64) = (-12.0, 6.0);

#[derive(Debug, Error, PartialEq)]
pub enum CvaeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("n_samples must be at least 1")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// Fully connected network stored as one flat parameter vector; layer `k`
/// holds a row-major `sizes[k+1] × sizes[k]` weight block then its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MlpParams<T> {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn n_params_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Uniform fan-in initialization; the output layer starts at zero.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(Self::n_params_for(sizes));
        let last = sizes.len() - 2;
        for (k, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(if k == last {
                    T::zero()
                } else {
                    T::lit(rng.uniform_range(-bound, bound))
                });
            }
        }
        Self {
            sizes: sizes.to_vec(),
            activation: Activation::Tanh,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, CvaeError> {
        if x.len() != self.input_dim() {
            return Err(CvaeError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CvaeError::NonFinite);
        }
        let mut h = x.to_vec();
        let mut off = 0;
        let n_layers = self.sizes.len() - 1;
        for k in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let s = row.iter().zip(&h).fold(b[o], |acc, (a, c)| acc + *a * *c);
                next.push(if k + 1 < n_layers { s.tanh() } else { s });
            }
            h = next;
        }
        Ok(h)
    }

    /// Forward pass on a tape; `params` are the tape variables of `self.params`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, params: &[Var], x: &[Var]) -> Vec<Var> {
        debug_assert_eq!(params.len(), self.params.len());
        let mut h = x.to_vec();
        let mut off = 0;
        let n_layers = self.sizes.len() - 1;
        for k in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let bias_off = off + fan_in * fan_out;
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &params[off + o * fan_in..off + (o + 1) * fan_in];
                let s = tape.dot_plus(row, &h, params[bias_off + o]);
                next.push(if k + 1 < n_layers { tape.tanh(s) } else { s });
            }
            off = bias_off + fan_out;
            h = next;
        }
        h
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GaussianLatent<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
}

/// Per-feature Gaussian likelihood head over `x̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DecodedFeatures<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> DecodedFeatures<T> {
    pub fn log_likelihood(&self, x_hat: &[T]) -> T {
        x_hat
            .iter()
            .zip(self.mean.iter().zip(&self.log_var))
            .map(|(x, (m, lv))| normal_log_pdf(*x, *m, *lv))
            .sum()
    }
}

fn clamp_log_var<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOG_VAR_CLAMP.0)).min(T::lit(LOG_VAR_CLAMP.1))
}

/// Split a `2·k` head into `(mean, clamped log-variance)`.
fn split_head<T: Scalar>(out: Vec<T>) -> (Vec<T>, Vec<T>) {
    let k = out.len() / 2;
    let lv = out[k..].iter().map(|v| clamp_log_var(*v)).collect();
    let mut mu = out;
    mu.truncate(k);
    (mu, lv)
}

/// Tape version of the clamp: out-of-range values become constants.
pub fn clamp_log_var_tape<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Var {
    let x = tape.value(v);
    let c = clamp_log_var(x);
    if c == x {
        v
    } else {
        tape.constant(c)
    }
}

fn split_head_tape<T: Scalar>(tape: &mut Tape<T>, out: Vec<Var>) -> (Vec<Var>, Vec<Var>) {
    let k = out.len() / 2;
    let lv = out[k..].iter().map(|v| clamp_log_var_tape(tape, *v)).collect();
    (out[..k].to_vec(), lv)
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_divergence<T: Scalar>(q: &GaussianLatent<T>, p: &GaussianLatent<T>) -> Result<T, CvaeError> {
    if q.mu.len() != p.mu.len() || q.log_var.len() != q.mu.len() || p.log_var.len() != p.mu.len() {
        return Err(CvaeError::DimensionMismatch {
            expected: q.mu.len(),
            got: p.mu.len(),
        });
    }
    let half = T::lit(0.5);
    Ok((0..q.mu.len())
        .map(|l| {
            let (mq, lq, mp, lp) = (q.mu[l], q.log_var[l], p.mu[l], p.log_var[l]);
            let d = mq - mp;
            half * ((lq - lp).exp() + d * d / lp.exp() - T::one() + lp - lq)
        })
        .sum())
}

/// Tape version of [`kl_divergence`].
pub fn kl_divergence_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q_mu: &[Var],
    q_lv: &[Var],
    p_mu: &[Var],
    p_lv: &[Var],
) -> Var {
    let terms: Vec<Var> = (0..q_mu.len())
        .map(|l| {
            let dlv = tape.sub(q_lv[l], p_lv[l]);
            let ratio = tape.exp(dlv);
            let d = tape.sub(q_mu[l], p_mu[l]);
            let d2 = tape.square(d);
            let neg_lp = tape.neg(p_lv[l]);
            let inv_vp = tape.exp(neg_lp);
            let maha = tape.mul(d2, inv_vp);
            let s1 = tape.add(ratio, maha);
            let s2 = tape.sub(s1, dlv);
            tape.affine(s2, T::lit(0.5), T::lit(-0.5))
        })
        .collect();
    tape.sum(&terms)
}

/// `z = mu + exp(½ log_var) ⊙ ε` with the noise returned alongside.
pub fn reparam_sample<T: Scalar>(latent: &GaussianLatent<T>, rng: &mut Rng) -> (Vec<T>, Vec<T>) {
    let eps: Vec<T> = (0..latent.mu.len()).map(|_| T::lit(rng.standard_normal())).collect();
    (reparam_with_eps(latent, &eps), eps)
}

pub fn reparam_with_eps<T: Scalar>(latent: &GaussianLatent<T>, eps: &[T]) -> Vec<T> {
    latent
        .mu
        .iter()
        .zip(&latent.log_var)
        .zip(eps)
        .map(|((m, lv), e)| *m + (T::lit(0.5) * clamp_log_var(*lv)).exp() * *e)
        .collect()
}

/// Tape version of [`reparam_with_eps`] with frozen noise.
pub fn reparam_tape<T: Scalar>(tape: &mut Tape<T>, mu: &[Var], log_var: &[Var], eps: &[T]) -> Vec<Var> {
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| {
            let half = tape.scale(lv, T::lit(0.5));
            let sd = tape.exp(half);
            let noise = tape.scale(sd, e);
            tape.add(m, noise)
        })
        .collect()
}

/// Sizes of the three networks for given input widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeShape {
    pub x_obs_dim: usize,
    pub nu_dim: usize,
    pub x_hat_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for CvaeShape {
    fn default() -> Self {
        Self {
            x_obs_dim: 2,
            nu_dim: 6,
            x_hat_dim: 3,
            latent_dim: LATENT_DIM,
            hidden: HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Cvae<T> {
    pub shape: CvaeShape,
    pub encoder: MlpParams<T>,
    pub prior: MlpParams<T>,
    pub decoder: MlpParams<T>,
    pub log_var_clamp: (f64, f64),
}

/// Per-feature imputation in model (standardized) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Imputation<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Cvae<T> {
    pub fn new(shape: CvaeShape, rng: &mut Rng) -> Self {
        let h = shape.hidden;
        let l = shape.latent_dim;
        Self {
            shape,
            encoder: MlpParams::init(&[shape.x_obs_dim + shape.nu_dim, h, h, 2 * l], &mut rng.derive(0)),
            prior: MlpParams::init(&[shape.nu_dim, h, h, 2 * l], &mut rng.derive(1)),
            decoder: MlpParams::init(&[l + shape.nu_dim, h, h, 2 * shape.x_hat_dim], &mut rng.derive(2)),
            log_var_clamp: LOG_VAR_CLAMP,
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.params.len() + self.prior.params.len() + self.decoder.params.len()
    }

    /// Encoder, prior and decoder parameters concatenated.
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.encoder.params);
        v.extend_from_slice(&self.prior.params);
        v.extend_from_slice(&self.decoder.params);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.n_params());
        let (a, b) = (self.encoder.params.len(), self.prior.params.len());
        self.encoder.params.copy_from_slice(&flat[..a]);
        self.prior.params.copy_from_slice(&flat[a..a + b]);
        self.decoder.params.copy_from_slice(&flat[a + b..]);
    }

    pub fn encode(&self, x_obs: &[T], nu: &[T]) -> Result<GaussianLatent<T>, CvaeError> {
        check_len(x_obs, self.shape.x_obs_dim)?;
        check_len(nu, self.shape.nu_dim)?;
        let input: Vec<T> = x_obs.iter().chain(nu).copied().collect();
        let (mu, log_var) = split_head(self.encoder.forward(&input)?);
        Ok(GaussianLatent { mu, log_var })
    }

    pub fn prior(&self, nu: &[T]) -> Result<GaussianLatent<T>, CvaeError> {
        let (mu, log_var) = split_head(self.prior.forward(nu)?);
        Ok(GaussianLatent { mu, log_var })
    }

    /// Decoder sees `(z, ν)` only.
    pub fn decode(&self, z: &[T], nu: &[T]) -> Result<DecodedFeatures<T>, CvaeError> {
        check_len(z, self.shape.latent_dim)?;
        check_len(nu, self.shape.nu_dim)?;
        let input: Vec<T> = z.iter().chain(nu).copied().collect();
        let (mean, log_var) = split_head(self.decoder.forward(&input)?);
        Ok(DecodedFeatures { mean, log_var })
    }

    /// Monte Carlo over `z ~ q(z | x_obs, ν)`: mean of decoder means and the
    /// total predictive std (mean decoder variance plus spread of means).
    pub fn impute(&self, x_obs: &[T], nu: &[T], n_samples: usize, rng: &mut Rng) -> Result<Imputation<T>, CvaeError> {
        if n_samples == 0 {
            return Err(CvaeError::NoSamples);
        }
        let q = self.encode(x_obs, nu)?;
        let k = self.shape.x_hat_dim;
        let mut sum = vec![T::zero(); k];
        let mut sum_sq = vec![T::zero(); k];
        let mut var_sum = vec![T::zero(); k];
        for _ in 0..n_samples {
            let (z, _) = reparam_sample(&q, rng);
            let d = self.decode(&z, nu)?;
            for f in 0..k {
                sum[f] = sum[f] + d.mean[f];
                sum_sq[f] = sum_sq[f] + d.mean[f] * d.mean[f];
                var_sum[f] = var_sum[f] + d.log_var[f].exp();
            }
        }
        let n = T::lit(n_samples as f64);
        let mean: Vec<T> = sum.iter().map(|s| *s / n).collect();
        let std = (0..k)
            .map(|f| {
                let spread = (sum_sq[f] / n - mean[f] * mean[f]).max(T::zero());
                (var_sum[f] / n + spread).sqrt()
            })
            .collect();
        Ok(Imputation { mean, std })
    }
}

fn check_len<T>(v: &[T], n: usize) -> Result<(), CvaeError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(CvaeError::DimensionMismatch { expected: n, got: v.len() })
    }
}

/// Tape variables of a [`Cvae`]'s parameters, in `flat_params` order.
pub struct CvaeVars {
    pub encoder: Vec<Var>,
    pub prior: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl CvaeVars {
    pub fn split(vars: &[Var], cvae_sizes: (usize, usize, usize)) -> Self {
        let (a, b, c) = cvae_sizes;
        Self {
            encoder: vars[..a].to_vec(),
            prior: vars[a..a + b].to_vec(),
            decoder: vars[a + b..a + b + c].to_vec(),
        }
    }
}

/// Tape outputs `(mu, log_var)` for encoder, prior, decoder.
impl<T: Scalar> Cvae<T> {
    pub fn param_sizes(&self) -> (usize, usize, usize) {
        (self.encoder.params.len(), self.prior.params.len(), self.decoder.params.len())
    }

    pub fn encode_tape(&self, tape: &mut Tape<T>, vars: &CvaeVars, x_obs: &[Var], nu: &[Var]) -> (Vec<Var>, Vec<Var>) {
        let input: Vec<Var> = x_obs.iter().chain(nu).copied().collect();
        let out = self.encoder.forward_tape(tape, &vars.encoder, &input);
        split_head_tape(tape, out)
    }

    pub fn prior_tape(&self, tape: &mut Tape<T>, vars: &CvaeVars, nu: &[Var]) -> (Vec<Var>, Vec<Var>) {
        let out = self.prior.forward_tape(tape, &vars.prior, nu);
        split_head_tape(tape, out)
    }

    pub fn decode_tape(&self, tape: &mut Tape<T>, vars: &CvaeVars, z: &[Var], nu: &[Var]) -> (Vec<Var>, Vec<Var>) {
        let input: Vec<Var> = z.iter().chain(nu).copied().collect();
        let out = self.decoder.forward_tape(tape, &vars.decoder, &input);
        split_head_tape(tape, out)
    }
}

/// `Σ_f log N(x_f | mean_f, exp(log_var_f))` on a tape.
pub fn gaussian_log_likelihood_tape<T: Scalar>(tape: &mut Tape<T>, x: &[T], mean: &[Var], log_var: &[Var]) -> Var {
    let terms: Vec<Var> = x
        .iter()
        .zip(mean.iter().zip(log_var))
        .map(|(&xv, (&m, &lv))| {
            let d = tape.shift(m, -xv);
            let d2 = tape.square(d);
            let neg = tape.neg(lv);
            let prec = tape.exp(neg);
            let maha = tape.mul(d2, prec);
            let s = tape.add(maha, lv);
            tape.affine(s, T::lit(-0.5), T::lit(-0.5 * crate::numerics::special::LN_2PI))
        })
        .collect();
    tape.sum(&terms)
}
