//! Per-observation log-likelihood terms for the six submodels, plus the
//! latent prior and the hyperpriors.

use thiserror::Error;

use crate::math::{
    ln_factorial, log1mexp, log_sigmoid, norm_logcdf, norm_logpdf, sigmoid, LN_2PI,
};
use crate::model::covariance::LatentCovariance;
use crate::model::params::ParameterSet;

/// Linear predictors of the count submodels are capped here before
/// exponentiation; activation is surfaced so a fit can reject clamped
/// post-warmup draws.
pub const LOG_RATE_CLAMP: f64 = 30.0;

/// Prior scale for the count and ordinal regression coefficients and the
/// ordinal thresholds.
pub const PRIOR_SD_WEAK: f64 = 1000.0;
/// Prior scale for the probit regression coefficients (latent variance 1).
pub const PRIOR_SD_PROBIT: f64 = 2.0;
/// Half-Cauchy scale for the free latent standard deviations.
pub const PRIOR_CAUCHY_SCALE: f64 = 2.5;

#[derive(Debug, Error, PartialEq)]
pub enum LoglikError {
    #[error("fertilisation offset undefined: oocyte count is 0")]
    ZeroOffset,
    #[error("ordinal grade {0} outside 1..=4")]
    BadGrade(u8),
    #[error("latent probit value inconsistent with observed outcome")]
    InconsistentLatent,
}

pub(crate) fn dot(x: &[f64], beta: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), beta.len());
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// Poisson log-pmf at log-rate eta, with the clamp guard.
/// Returns (loglik, residual y - lambda, clamped).
pub(crate) fn poisson_term(y: u32, eta: f64) -> (f64, f64, bool) {
    let clamped = eta > LOG_RATE_CLAMP;
    let lambda = if clamped {
        LOG_RATE_CLAMP.exp()
    } else {
        eta.exp()
    };
    let ll = f64::from(y) * eta - lambda - ln_factorial(u64::from(y));
    (ll, f64::from(y) - lambda, clamped)
}

/// Oocyte-count submodel: Poisson with log-rate x.beta + z.
pub fn oocyte_loglik(y: u32, x: &[f64], beta_o: &[f64], z_o: f64) -> f64 {
    poisson_term(y, dot(x, beta_o) + z_o).0
}

/// Fertilisation submodel: Poisson with a log(oocyte count) offset.
pub fn fertilisation_loglik(
    y_m: u32,
    y_o: u32,
    x: &[f64],
    beta_m: &[f64],
    z_m: f64,
) -> Result<f64, LoglikError> {
    if y_o == 0 {
        return Err(LoglikError::ZeroOffset);
    }
    Ok(poisson_term(y_m, f64::from(y_o).ln() + dot(x, beta_m) + z_m).0)
}

/// Cumulative-logit category probabilities for an ordinal 1..4 grade.
///
/// gamma_k = logistic(alpha_k - linpred); positive covariate effects push
/// the grade upward.
pub fn ordinal_category_probs(alpha: &[f64; 3], linpred: f64) -> [f64; 4] {
    let g1 = sigmoid(alpha[0] - linpred);
    let g2 = sigmoid(alpha[1] - linpred);
    let g3 = sigmoid(alpha[2] - linpred);
    [g1, g2 - g1, g3 - g2, 1.0 - g3]
}

/// Log category probability of a 1..=4 grade, evaluated in log space.
pub fn ordinal_loglik(grade: u8, alpha: &[f64; 3], linpred: f64) -> Result<f64, LoglikError> {
    if !(1..=4).contains(&grade) {
        return Err(LoglikError::BadGrade(grade));
    }
    Ok(ordinal_term(grade, alpha, linpred).0)
}

/// (loglik, d/dlinpred, d/dalpha) of one ordinal observation.
///
/// The interior categories use log(sigmoid(a) - sigmoid(b)) =
/// logsigmoid(a) + logsigmoid(-b) + log(1 - e^{b-a}) for stability.
pub(crate) fn ordinal_term(grade: u8, alpha: &[f64; 3], linpred: f64) -> (f64, f64, [f64; 3]) {
    let a = [
        alpha[0] - linpred,
        alpha[1] - linpred,
        alpha[2] - linpred,
    ];
    let mut dalpha = [0.0; 3];
    let dens = |t: f64| sigmoid(t) * sigmoid(-t);
    match grade {
        1 => {
            let ll = log_sigmoid(a[0]);
            let d = sigmoid(-a[0]);
            dalpha[0] = d;
            (ll, -d, dalpha)
        }
        4 => {
            let ll = log_sigmoid(-a[2]);
            let d = sigmoid(a[2]);
            dalpha[2] = -d;
            (ll, d, dalpha)
        }
        g => {
            let (hi, lo) = if g == 2 { (1, 0) } else { (2, 1) };
            let ll = log_sigmoid(a[hi]) + log_sigmoid(-a[lo]) + log1mexp(a[hi] - a[lo]);
            let p = ll.exp().max(1e-300);
            let d_hi = dens(a[hi]);
            let d_lo = dens(a[lo]);
            dalpha[hi] = d_hi / p;
            dalpha[lo] = -d_lo / p;
            (ll, -(d_hi - d_lo) / p, dalpha)
        }
    }
}

/// Data contribution of a probit stage inside the joint model: zero when
/// the realized latent is consistent with the observed binary, an error
/// otherwise (a sampler bug).
pub fn probit_indicator_loglik(y: bool, lin: f64, z: f64) -> Result<f64, LoglikError> {
    let implied = lin + z >= 0.0;
    if implied == y {
        Ok(0.0)
    } else {
        Err(LoglikError::InconsistentLatent)
    }
}

/// Collapsed probit likelihood with the latent integrated out:
/// ln Phi(lin) for y = 1, ln Phi(-lin) for y = 0.
pub fn probit_collapsed_loglik(y: bool, lin: f64) -> f64 {
    norm_logcdf(if y { lin } else { -lin })
}

/// Mean-zero multivariate normal log-density of a 6-vector.
pub fn latent_prior_logpdf(z: &[f64; 6], cov: &LatentCovariance) -> f64 {
    // forward solve L v = z
    let l = &cov.chol;
    let mut v = [0.0; 6];
    for i in 0..6 {
        let mut s = z[i];
        for k in 0..i {
            s -= l[i][k] * v[k];
        }
        v[i] = s / l[i][i];
    }
    let quad: f64 = v.iter().map(|t| t * t).sum();
    let logdet: f64 = 2.0 * (0..6).map(|i| l[i][i].ln()).sum::<f64>();
    -0.5 * quad - 0.5 * logdet - 3.0 * LN_2PI
}

fn normal_logpdf_scaled(x: f64, sd: f64) -> f64 {
    norm_logpdf(x / sd) - sd.ln()
}

/// Half-Cauchy(0, scale) log-density at t > 0.
pub(crate) fn half_cauchy_logpdf(t: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2
        - std::f64::consts::PI.ln()
        - scale.ln()
        - (1.0 + (t / scale) * (t / scale)).ln()
}

/// Log-density of the hyperpriors: weak normals on the count/ordinal
/// coefficients and thresholds, tighter normals on the probit
/// coefficients, half-Cauchy on the latent scales, and LKJ(1) on the
/// correlation matrix (uniform; its constant is omitted).
pub fn hyperprior_logpdf(params: &ParameterSet) -> f64 {
    let mut lp = 0.0;
    for betas in [&params.beta_o, &params.beta_m, &params.beta_e, &params.beta_f] {
        for &b in betas.iter() {
            lp += normal_logpdf_scaled(b, PRIOR_SD_WEAK);
        }
    }
    for alphas in [&params.alpha_e, &params.alpha_f] {
        for &a in alphas.iter() {
            lp += normal_logpdf_scaled(a, PRIOR_SD_WEAK);
        }
    }
    for betas in [&params.beta_d, &params.beta_l] {
        for &b in betas.iter() {
            lp += normal_logpdf_scaled(b, PRIOR_SD_PROBIT);
        }
    }
    for &t in params.theta.iter() {
        lp += half_cauchy_logpdf(t, PRIOR_CAUCHY_SCALE);
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::covariance::build_covariance;
    use crate::model::params::{Corr, N_ETA};
    use approx::assert_relative_eq;

    #[test]
    fn poisson_frozen_values() {
        // Poisson(1) at 0 -> ln e^{-1} = -1
        assert_relative_eq!(oocyte_loglik(0, &[0.0], &[0.0], 0.0), -1.0, epsilon = 1e-12);
        // y=3, rate 2: 3 ln 2 - 2 - ln 6
        let expected = 3.0 * 2f64.ln() - 2.0 - 6f64.ln();
        assert_relative_eq!(
            oocyte_loglik(3, &[1.0], &[2f64.ln()], 0.0),
            expected,
            epsilon = 1e-12
        );
        assert_relative_eq!(expected, -1.7123179275482194, epsilon = 1e-12);
        // intercept-only rate exp(2.09) = 8.085
        assert_relative_eq!(2.09f64.exp(), 8.085, epsilon = 1e-3);
    }

    #[test]
    fn fertilisation_offset_behaviour() {
        // 10 oocytes, intercept -1.04: rate 3.535
        assert_relative_eq!(10.0 * (-1.04f64).exp(), 3.535, epsilon = 1e-3);
        // y_O = 1, everything zero, y_M = 0 -> Poisson(1) at 0
        assert_relative_eq!(
            fertilisation_loglik(0, 1, &[1.0], &[0.0], 0.0).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_eq!(
            fertilisation_loglik(0, 0, &[1.0], &[0.0], 0.0),
            Err(LoglikError::ZeroOffset)
        );
        // doubling the offset doubles the rate: adjusting beta by -ln 2
        // compensates exactly
        let a = fertilisation_loglik(3, 10, &[1.0], &[0.2], 0.1).unwrap();
        let b = fertilisation_loglik(3, 20, &[1.0], &[0.2 - 2f64.ln()], 0.1).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn ordinal_probs_frozen_values() {
        // thresholds from the evenness separate pre-treatment column
        let alpha = [-4.23, -1.28, 1.43];
        let p = ordinal_category_probs(&alpha, 0.0);
        assert_relative_eq!(p[0], 0.0144, epsilon = 1e-4);
        assert_relative_eq!(p[1], 0.2032, epsilon = 1e-4);
        assert_relative_eq!(p[2], 0.5893, epsilon = 1e-4);
        assert_relative_eq!(p[3], 0.1931, epsilon = 1e-4);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // grade 4 log-probability
        assert_relative_eq!(
            ordinal_loglik(4, &alpha, 0.0).unwrap(),
            p[3].ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(p[3].ln(), -1.6446, epsilon = 1e-3);
    }

    #[test]
    fn ordinal_limits_and_symmetry() {
        let alpha = [-4.23, -1.28, 1.43];
        let p = ordinal_category_probs(&alpha, 60.0);
        assert!(p[3] > 0.999999);
        // alpha with huge surrogates: p ~ (0, 0.5, 0.5, 0)
        let p = ordinal_category_probs(&[-40.0, 0.0, 40.0], 0.0);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-9);
        assert_relative_eq!(p[2], 0.5, epsilon = 1e-9);
        // grade 1 with alpha_1 = linpred
        assert_relative_eq!(
            ordinal_loglik(1, &[0.0, 1.0, 2.0], 0.0).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        // normalization across grades
        let total: f64 = (1..=4)
            .map(|g| ordinal_loglik(g, &alpha, 0.7).unwrap().exp())
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(ordinal_loglik(5, &alpha, 0.0), Err(LoglikError::BadGrade(5)));
    }

    #[test]
    fn ordinal_term_gradients_match_fd() {
        let alpha = [-1.5, 0.2, 1.9];
        for grade in 1..=4u8 {
            for &lin in &[-2.0, 0.0, 1.3] {
                let (_, dlin, dalpha) = ordinal_term(grade, &alpha, lin);
                let h = 1e-6;
                let fd_lin = (ordinal_term(grade, &alpha, lin + h).0
                    - ordinal_term(grade, &alpha, lin - h).0)
                    / (2.0 * h);
                assert_relative_eq!(dlin, fd_lin, max_relative = 1e-6, epsilon = 1e-9);
                for k in 0..3 {
                    let mut ap = alpha;
                    ap[k] += h;
                    let mut am = alpha;
                    am[k] -= h;
                    let fd = (ordinal_term(grade, &ap, lin).0 - ordinal_term(grade, &am, lin).0)
                        / (2.0 * h);
                    assert_relative_eq!(dalpha[k], fd, max_relative = 1e-6, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn ordinal_monotone_in_positive_covariate() {
        let alpha = [-4.23, -1.28, 1.43];
        let p_lo = ordinal_category_probs(&alpha, 0.0)[3];
        let p_hi = ordinal_category_probs(&alpha, 1.0)[3];
        assert!(p_hi > p_lo);
    }

    #[test]
    fn probit_frozen_values() {
        assert_relative_eq!(
            probit_collapsed_loglik(true, 0.0),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        // DET intercept 0.11: Phi(0.11) = 0.5438
        assert_relative_eq!(
            probit_collapsed_loglik(true, 0.11),
            0.5438f64.ln(),
            epsilon = 1e-4
        );
        assert_relative_eq!(probit_collapsed_loglik(true, 0.11), -0.6092, epsilon = 1e-4);
        // y = 0 at beta mirrors y = 1 at -beta
        assert_relative_eq!(
            probit_collapsed_loglik(false, 0.7),
            probit_collapsed_loglik(true, -0.7),
            epsilon = 1e-14
        );
    }

    #[test]
    fn probit_indicator_checks_consistency() {
        assert_eq!(probit_indicator_loglik(true, 0.3, 0.1), Ok(0.0));
        assert_eq!(
            probit_indicator_loglik(false, 0.3, 0.1),
            Err(LoglikError::InconsistentLatent)
        );
        assert_eq!(probit_indicator_loglik(false, 0.3, -0.5), Ok(0.0));
    }

    #[test]
    fn latent_prior_frozen_values() {
        let cov = build_covariance(&[1.0; 4], &Corr::identity()).unwrap();
        // standard 6-dim normal at the origin: -3 ln(2 pi)
        assert_relative_eq!(
            latent_prior_logpdf(&[0.0; 6], &cov),
            -3.0 * LN_2PI,
            epsilon = 1e-12
        );
        assert_relative_eq!(-3.0 * LN_2PI, -5.513631199228036, epsilon = 1e-12);
        // independence: equals sum of univariate densities
        let z = [0.3, -1.2, 0.5, 2.0, -0.7, 0.1];
        let sum: f64 = z.iter().map(|&t| norm_logpdf(t)).sum();
        assert_relative_eq!(latent_prior_logpdf(&z, &cov), sum, epsilon = 1e-12);
        // symmetry under z -> -z
        let zn: [f64; 6] = std::array::from_fn(|i| -z[i]);
        let corr = Corr::from_etas(&[0.2; N_ETA]).unwrap();
        let cov = build_covariance(&[0.5, 0.3, 0.8, 0.8], &corr).unwrap();
        assert_relative_eq!(
            latent_prior_logpdf(&z, &cov),
            latent_prior_logpdf(&zn, &cov),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hyperprior_frozen_values() {
        // N(0, 2^2) at 0: -0.5 ln(8 pi)
        let n0 = normal_logpdf_scaled(0.0, 2.0);
        assert_relative_eq!(n0, -0.5 * (8.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert_relative_eq!(n0, -1.6120857137646466, epsilon = 1e-10);
        // half-Cauchy density at 0+: 2 / (pi * 2.5)
        let hc = half_cauchy_logpdf(1e-300, 2.5);
        assert_relative_eq!(hc, (2.0 / (std::f64::consts::PI * 2.5)).ln(), epsilon = 1e-12);
        assert_relative_eq!(hc, -1.3678734, epsilon = 1e-6);
        // LKJ(1) is flat: hyperprior differences vanish across corr values
        let base = ParameterSet {
            beta_o: vec![0.5],
            beta_m: vec![0.1],
            beta_e: vec![],
            beta_f: vec![],
            beta_d: vec![0.2],
            beta_l: vec![-0.3],
            alpha_e: [-1.0, 0.0, 1.0],
            alpha_f: [-1.0, 0.0, 1.0],
            theta: [0.5, 0.3, 0.8, 0.8],
            corr: Corr::identity(),
        };
        let mut other = base.clone();
        other.corr = Corr::from_etas(&[0.25; N_ETA]).unwrap();
        assert_relative_eq!(
            hyperprior_logpdf(&base),
            hyperprior_logpdf(&other),
            epsilon = 1e-12
        );
    }
}
