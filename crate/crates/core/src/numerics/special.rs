//! Gaussian densities, distribution functions, and smooth positivity maps.

use statrs::function::erf;

use crate::Scalar;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse<T: Scalar>(y: T) -> T {
    // ln(eʸ - 1) = y + ln(1 - e⁻ʸ)
    y + (-(-y).exp()).ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log N(x | mu, exp(log_var)).
pub fn normal_log_pdf<T: Scalar>(x: T, mu: T, log_var: T) -> T {
    let d = x - mu;
    -T::lit(0.5) * (T::lit(LN_2PI) + log_var + d * d / log_var.exp())
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `P(Z > x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6f64, 0.01, 0.5, 3.0, 40.0] {
            assert_abs_diff_eq!(softplus(softplus_inverse(y)), y, epsilon = 1e-12 * y.max(1.0));
        }
        assert_abs_diff_eq!(softplus(0.0f64), 2f64.ln(), epsilon = 1e-15);
        assert!(softplus(800.0f64).is_finite());
    }

    #[test]
    fn cdf_and_quantile() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(1.959_963_984_540_054), 0.975, epsilon = 1e-10);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959_963_984_540_054, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_sf(1.0) + normal_cdf(1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_pdf_standard() {
        assert_abs_diff_eq!(normal_log_pdf(0.0, 0.0, 0.0), -0.5 * LN_2PI, epsilon = 1e-15);
    }
}
