//! Scalar special functions and log-space helpers.

use std::f64::consts::{LN_2, PI};

pub use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Digamma function for `x > 0`.
///
/// Shifts the argument above 10 with the recurrence `ψ(x) = ψ(x+1) − 1/x`,
/// then sums the asymptotic series through the `x^-14` Bernoulli term.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k) coefficients
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// `ln Γ_D(a)`, the log multivariate gamma function.
pub fn ln_multigamma(a: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let mut s = d * (d - 1.0) / 4.0 * PI.ln();
    for i in 0..dim {
        s += ln_gamma(a - i as f64 / 2.0);
    }
    s
}

/// `Σ_{i=1}^{D} ψ((a + 1 − i)/2)`, the digamma part of `E[ln|W|]` for a Wishart.
pub fn wishart_digamma_sum(dof: f64, dim: usize) -> f64 {
    (1..=dim).map(|i| digamma((dof + 1.0 - i as f64) / 2.0)).sum()
}

/// `E[ln|W|]` for `W ~ Wishart(dof, scale = B⁻¹)`, given `ln|B|`.
pub fn wishart_expected_log_det(dof: f64, ln_det_b: f64, dim: usize) -> f64 {
    wishart_digamma_sum(dof, dim) + dim as f64 * LN_2 - ln_det_b
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn normalize_log_weights(logw: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logw);
    if lse.is_finite() {
        for w in logw.iter_mut() {
            *w = (*w - lse).exp();
        }
    }
    lse
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `e^v / (1 + e^v)`.
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln P(y | v)` under the logistic link.
pub fn log_logistic_lik(v: f64, y: bool) -> f64 {
    if y {
        -softplus(-v)
    } else {
        -softplus(v)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        // ψ(1) = −γ, ψ(1/2) = −γ − 2 ln 2, ψ(n+1) = H_n − γ
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * LN_2).abs() < 1e-14);
        let h10: f64 = (1..=10).map(|k| 1.0 / k as f64).sum();
        assert!((digamma(11.0) - (h10 - EULER_GAMMA)).abs() < 1e-14);
        // large argument against the recurrence from a shifted point
        let x = 123.456;
        assert!(((digamma(x + 1.0) - digamma(x)) - 1.0 / x).abs() < 1e-14);
    }

    #[test]
    fn digamma_matches_derivative_of_ln_gamma() {
        for &x in &[0.01f64, 0.3, 1.7, 4.2, 9.9, 25.0, 300.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!(
                (digamma(x) - fd).abs() < 1e-6 * digamma(x).abs().max(1.0),
                "x={x}"
            );
        }
    }

    #[test]
    fn multigamma_reduces_to_gamma_in_one_dimension() {
        assert!((ln_multigamma(3.7, 1) - ln_gamma(3.7)).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn logistic_saturates_without_overflow() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(700.0) >= 1.0 - 1e-12);
        assert!(logistic(-700.0) > 0.0);
        assert!((logistic(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((log_logistic_lik(0.0, true) + LN_2).abs() < 1e-15);
    }
}
