use serde::{Deserialize, Serialize};

use super::CohortError;

/// Candidate exponents −2.0, −1.9, …, 2.0.
pub const LAMBDA_GRID: [f64; 41] = {
    let mut g = [0.0; 41];
    let mut i = 0;
    while i < 41 {
        g[i] = (i as f64 - 20.0) / 10.0;
        i += 1;
    }
    g
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoxTransform {
    pub lambda: f64,
    /// Added to inputs before transforming.
    pub shift: f64,
}

impl BoxCoxTransform {
    pub fn apply(&self, x: f64) -> Result<f64, CohortError> {
        let v = x + self.shift;
        if !(v > 0.0) {
            return Err(CohortError::NonPositive(v));
        }
        Ok(if self.lambda == 0.0 {
            v.ln()
        } else {
            (v.powf(self.lambda) - 1.0) / self.lambda
        })
    }

    pub fn invert(&self, y: f64) -> f64 {
        let v = if self.lambda == 0.0 {
            y.exp()
        } else {
            (self.lambda * y + 1.0).powf(1.0 / self.lambda)
        };
        v - self.shift
    }
}

fn auto_shift(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (1e-6 - min).max(0.0)
}

/// Profile log-likelihood of exponent `lambda` for strictly positive `values`.
pub fn box_cox_log_likelihood(values: &[f64], lambda: f64) -> f64 {
    let n = values.len() as f64;
    let t = BoxCoxTransform { lambda, shift: 0.0 };
    let ys: Vec<f64> = values.iter().map(|&x| t.apply(x).unwrap_or(f64::NAN)).collect();
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let log_jacobian: f64 = values.iter().map(|x| x.ln()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * log_jacobian
}

/// Transform with the grid exponent maximising the profile likelihood.
pub fn box_cox(values: &[f64]) -> Result<(Vec<f64>, BoxCoxTransform), CohortError> {
    let shift = auto_shift(values);
    let shifted: Vec<f64> = values.iter().map(|x| x + shift).collect();
    if let Some(bad) = shifted.iter().find(|v| !(**v > 0.0)) {
        return Err(CohortError::NonPositive(*bad));
    }
    let mut best = (f64::NEG_INFINITY, 1.0);
    for &lambda in &LAMBDA_GRID {
        let ll = box_cox_log_likelihood(&shifted, lambda);
        if ll > best.0 {
            best = (ll, lambda);
        }
    }
    box_cox_with_lambda(values, best.1)
}

/// Transform with a fixed exponent (shift still chosen automatically).
pub fn box_cox_with_lambda(values: &[f64], lambda: f64) -> Result<(Vec<f64>, BoxCoxTransform), CohortError> {
    let t = BoxCoxTransform {
        lambda,
        shift: auto_shift(values),
    };
    let out = values.iter().map(|&x| t.apply(x)).collect::<Result<_, _>>()?;
    Ok((out, t))
}
