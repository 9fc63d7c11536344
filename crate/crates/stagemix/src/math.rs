//! Numerically stable scalar math shared across the likelihood, sampler
//! and metric code.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.8378770664093456;

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// ln sigmoid(x) = -softplus(-x).
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// ln(1 - e^{-d}) for d > 0; -inf at d = 0 (an underflowed increment
/// during sampling lands here and is treated as a rejected region).
pub fn log1mexp(d: f64) -> f64 {
    if d <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if d <= std::f64::consts::LN_2 {
        (-(-d).exp_m1()).ln()
    } else {
        (-(-d).exp()).ln_1p()
    }
}

/// ln(e^a + e^b).
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

/// Standard normal log-density.
pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// ln Phi(x), accurate into the deep lower tail.
///
/// Uses erfc down to x ~ -37 (where erfc is still representable) and the
/// asymptotic expansion of the Mills ratio below that.
pub fn norm_logcdf(x: f64) -> f64 {
    if x > -37.0 {
        let p = 0.5 * erfc(-x / std::f64::consts::SQRT_2);
        if p > 1e-300 {
            if x > 5.0 {
                // ln(1 - Phi(-x)) with Phi(-x) tiny
                (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
            } else {
                p.ln()
            }
        } else {
            norm_logcdf_tail(x)
        }
    } else {
        norm_logcdf_tail(x)
    }
}

fn norm_logcdf_tail(x: f64) -> f64 {
    // Phi(x) ~ phi(x)/|x| * (1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8)
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
        + 105.0 / (x2 * x2 * x2 * x2);
    norm_logpdf(x) - (-x).ln() + series.ln()
}

/// d/dx ln Phi(x) = phi(x)/Phi(x), stable for very negative x.
pub fn norm_logcdf_grad(x: f64) -> f64 {
    (norm_logpdf(x) - norm_logcdf(x)).exp()
}

/// ln(y!) for counts.
pub fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// Type-7 (linear interpolation) quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    quantile_sorted(&sorted, q)
}

/// Type-7 quantile of an already-sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample mean.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with n-1 denominator.
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Mean and standard deviation of a normal truncated to [lo, hi].
pub fn truncated_normal_moments(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z = norm_cdf(b) - norm_cdf(a);
    let m = mu + sigma * (phi(a) - phi(b)) / z;
    let var = sigma * sigma
        * (1.0 + (a * phi(a) - b * phi(b)) / z - ((phi(a) - phi(b)) / z).powi(2));
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_matches_naive_in_bulk() {
        for &x in &[-5.0, -1.0, 0.0, 0.5, 3.0] {
            assert_relative_eq!(sigmoid(x), 1.0 / (1.0 + (-x as f64).exp()), epsilon = 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn norm_cdf_reference_values() {
        assert_relative_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(norm_cdf(1.959963984540054), 0.975, epsilon = 1e-8);
        assert_relative_eq!(norm_cdf(0.11), 0.543795313749947, epsilon = 1e-8);
    }

    #[test]
    fn norm_logcdf_tail_agrees_with_erfc_region() {
        // overlap region: both paths should agree
        for &x in &[-8.0, -15.0, -25.0, -34.0] {
            let via_erfc = (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln();
            assert_relative_eq!(norm_logcdf(x), via_erfc, max_relative = 1e-9);
        }
        // far tail stays finite and monotone
        assert!(norm_logcdf(-100.0) < norm_logcdf(-50.0));
        assert!(norm_logcdf(-100.0).is_finite());
    }

    #[test]
    fn norm_logcdf_grad_is_mills_ratio() {
        for &x in &[-30.0, -5.0, -1.0, 0.0, 2.0, 10.0] {
            let h = 1e-6;
            let fd = (norm_logcdf(x + h) - norm_logcdf(x - h)) / (2.0 * h);
            assert_relative_eq!(norm_logcdf_grad(x), fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn quantile_type7_examples() {
        // frozen from the linear-interpolation percentile rule
        let draws = [1.0, 2.0, 3.0];
        assert_relative_eq!(quantile(&draws, 0.5), 2.0);
        assert_relative_eq!(quantile(&draws, 0.025), 1.05, epsilon = 1e-12);
        assert_relative_eq!(quantile(&draws, 0.975), 2.95, epsilon = 1e-12);
    }

    #[test]
    fn log1mexp_both_branches() {
        assert_relative_eq!(log1mexp(0.5), (1.0 - (-0.5f64).exp()).ln(), epsilon = 1e-14);
        assert_relative_eq!(log1mexp(5.0), (1.0 - (-5.0f64).exp()).ln(), epsilon = 1e-14);
    }

    #[test]
    fn truncated_moments_match_untruncated_for_wide_bounds() {
        let (m, s) = truncated_normal_moments(33.0, 4.5, -1000.0, 1000.0);
        assert_relative_eq!(m, 33.0, epsilon = 1e-9);
        assert_relative_eq!(s, 4.5, epsilon = 1e-9);
    }

    #[test]
    fn ln_factorial_small_values() {
        assert_relative_eq!(ln_factorial(0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(ln_factorial(3), 6.0f64.ln(), epsilon = 1e-12);
    }
}
