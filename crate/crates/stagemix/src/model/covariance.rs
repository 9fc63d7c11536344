//! Latent covariance: scale/correlation factorization, Cholesky, and the
//! unconstrained parameterization of the correlation matrix.
//!
//! The correlation matrix is parameterized by canonical partial
//! correlations: 15 unconstrained reals map through tanh to CPCs, which
//! build the rows of a lower Cholesky factor with unit row norms. The
//! log-Jacobian of the full map combined with the LKJ(1) density reduces
//! to a weighted sum of ln(1 - z^2) terms with column-only weights.

use thiserror::Error;

use crate::model::params::{Corr, ParamError, N_ETA, N_THETA};

#[derive(Debug, Error)]
pub enum CovarianceError {
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Covariance of the 6-dimensional latent stage vector together with its
/// lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct LatentCovariance {
    pub sigma: [[f64; 6]; 6],
    pub chol: [[f64; 6]; 6],
}

/// Lower Cholesky factorization of a symmetric 6x6 matrix, or None if it
/// is not positive definite.
pub fn cholesky6(a: &[[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let mut l = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Sigma = diag(theta_O, theta_M, theta_E, theta_F, 1, 1) * corr * diag(...).
pub fn build_covariance(
    theta: &[f64; N_THETA],
    corr: &Corr,
) -> Result<LatentCovariance, CovarianceError> {
    if theta.iter().any(|&t| !(t > 0.0)) {
        return Err(ParamError::NonPositiveScale(*theta).into());
    }
    let d = scales(theta);
    let r = corr.matrix();
    let mut sigma = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            sigma[i][j] = d[i] * r[i][j] * d[j];
        }
    }
    let chol = cholesky6(&sigma).ok_or(ParamError::NotPositiveDefinite)?;
    Ok(LatentCovariance { sigma, chol })
}

/// Scale vector (theta padded with the two fixed unit probit scales).
pub fn scales(theta: &[f64; N_THETA]) -> [f64; 6] {
    [theta[0], theta[1], theta[2], theta[3], 1.0, 1.0]
}

/// Row-major lower-triangle pairs used for the CPC vector.
const CPC_PAIRS: [(usize, usize); N_ETA] = [
    (1, 0),
    (2, 0),
    (2, 1),
    (3, 0),
    (3, 1),
    (3, 2),
    (4, 0),
    (4, 1),
    (4, 2),
    (4, 3),
    (5, 0),
    (5, 1),
    (5, 2),
    (5, 3),
    (5, 4),
];

/// Weight of ln(1 - z^2) for a CPC in column j (0-based), combining the
/// tanh Jacobian, the CPC-to-Cholesky Jacobian, and the LKJ(1) Cholesky
/// density. For K = 6 the row index cancels out.
fn lkj_weight(col: usize) -> f64 {
    1.0 + (4 - col) as f64 / 2.0
}

/// Forward evaluation of the unconstrained-to-Cholesky correlation map.
#[derive(Debug, Clone)]
pub struct CorrTransform {
    /// Canonical partial correlations tanh(y), row-major lower triangle.
    z: [f64; N_ETA],
    /// Lower Cholesky factor of the correlation matrix (unit row norms).
    pub w: [[f64; 6]; 6],
}

impl CorrTransform {
    pub fn forward(y: &[f64; N_ETA]) -> CorrTransform {
        let z: [f64; N_ETA] = std::array::from_fn(|k| y[k].tanh());
        let mut w = [[0.0; 6]; 6];
        w[0][0] = 1.0;
        let mut k = 0;
        for i in 1..6 {
            let mut rem = 1.0f64; // remaining row norm
            for j in 0..i {
                w[i][j] = z[k] * rem;
                rem *= (1.0 - z[k] * z[k]).sqrt();
                k += 1;
            }
            w[i][i] = rem;
        }
        CorrTransform { z, w }
    }

    /// Correlation matrix R = W W^T.
    pub fn corr(&self) -> Corr {
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += self.w[i][k] * self.w[j][k];
                }
                m[i][j] = s;
            }
            m[i][i] = 1.0;
        }
        Corr::from_matrix(m).expect("CPC construction always yields a valid correlation")
    }

    /// Combined log-density contribution of the LKJ(1) prior on the
    /// unconstrained scale (transform Jacobians included).
    pub fn log_prior(&self) -> f64 {
        let mut lp = 0.0;
        for (k, &(_, j)) in CPC_PAIRS.iter().enumerate() {
            lp += lkj_weight(j) * (1.0 - self.z[k] * self.z[k]).ln();
        }
        lp
    }

    /// Accumulate d(lp)/dy into `y_bar`, where lp includes both an
    /// external adjoint `w_bar` on the Cholesky factor and `log_prior`.
    pub fn backward(&self, w_bar: &[[f64; 6]; 6], y_bar: &mut [f64; N_ETA]) {
        let mut k_row_start = 0;
        for i in 1..6 {
            // prefix products P_j = prod_{m<j} sqrt(1 - z_m^2) for this row
            let mut prefix = [1.0f64; 6];
            for j in 1..=i {
                let zk = self.z[k_row_start + j - 1];
                prefix[j] = prefix[j - 1] * (1.0 - zk * zk).sqrt();
            }
            for j in 0..i {
                let k = k_row_start + j;
                let z = self.z[k];
                // downstream row entries scaled by this z through the prefix
                let mut tail = 0.0;
                for j2 in (j + 1)..=i {
                    tail += w_bar[i][j2] * self.w[i][j2];
                }
                y_bar[k] += (1.0 - z * z) * prefix[j] * w_bar[i][j]
                    - z * tail
                    - 2.0 * lkj_weight(j) * z;
            }
            k_row_start += i;
        }
    }

    /// Inverse map: CPC unconstrained vector reproducing a correlation
    /// matrix (via its Cholesky factor).
    pub fn inverse(corr: &Corr) -> Result<[f64; N_ETA], ParamError> {
        let w = cholesky6(corr.matrix()).ok_or(ParamError::NotPositiveDefinite)?;
        let mut y = [0.0; N_ETA];
        let mut k = 0;
        for i in 1..6 {
            let mut rem = 1.0f64;
            for j in 0..i {
                let z = (w[i][j] / rem).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                y[k] = z.atanh();
                rem *= (1.0 - z * z).sqrt();
                k += 1;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ETA_PAIRS;
    use approx::assert_relative_eq;

    #[test]
    fn identity_cases() {
        let cov = build_covariance(&[1.0; 4], &Corr::identity()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(cov.sigma[i][j], expected);
                assert_relative_eq!(cov.chol[i][j], expected);
            }
        }
    }

    #[test]
    fn diagonal_scaling() {
        let cov = build_covariance(&[2.0, 1.0, 1.0, 1.0], &Corr::identity()).unwrap();
        assert_relative_eq!(cov.sigma[0][0], 4.0);
        for k in 1..6 {
            assert_relative_eq!(cov.sigma[k][k], 1.0);
        }
    }

    #[test]
    fn det_lbe_entry_carries_eta15() {
        let mut etas = [0.0; N_ETA];
        etas[14] = 0.5;
        let corr = Corr::from_etas(&etas).unwrap();
        let cov = build_covariance(&[1.0; 4], &corr).unwrap();
        assert_relative_eq!(cov.sigma[4][5], 0.5);
        assert_relative_eq!(cov.sigma[4][4], 1.0);
        assert_relative_eq!(cov.sigma[5][5], 1.0);
    }

    #[test]
    fn probit_entries_stay_unit_for_any_scales() {
        let corr = Corr::from_etas(&[0.3; N_ETA]).unwrap();
        let cov = build_covariance(&[0.4, 2.5, 0.9, 1.7], &corr).unwrap();
        assert_relative_eq!(cov.sigma[4][4], 1.0);
        assert_relative_eq!(cov.sigma[5][5], 1.0);
        // chol reproduces sigma
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..6 {
                    s += cov.chol[i][k] * cov.chol[j][k];
                }
                assert_relative_eq!(s, cov.sigma[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn non_positive_definite_rejected() {
        // eta matrix with an infeasible triple never constructs
        let mut etas = [0.0; N_ETA];
        etas[0] = 0.95;
        etas[1] = 0.95;
        etas[5] = -0.95;
        assert!(Corr::from_etas(&etas).is_err());
    }

    #[test]
    fn cpc_round_trip() {
        let y: [f64; N_ETA] = std::array::from_fn(|k| 0.3 * ((k as f64) * 0.7).sin());
        let t = CorrTransform::forward(&y);
        let corr = t.corr();
        let y_back = CorrTransform::inverse(&corr).unwrap();
        for k in 0..N_ETA {
            assert_relative_eq!(y[k], y_back[k], epsilon = 1e-10);
        }
        // unit row norms make W a Cholesky factor of a correlation matrix
        for i in 0..6 {
            let norm: f64 = (0..=i).map(|j| t.w[i][j] * t.w[i][j]).sum();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // scalar function: g(y) = log_prior(y) + sum a_ij W_ij
        let a: [[f64; 6]; 6] = std::array::from_fn(|i| {
            std::array::from_fn(|j| if j <= i { ((i * 7 + j * 3) as f64).sin() } else { 0.0 })
        });
        let g = |y: &[f64; N_ETA]| {
            let t = CorrTransform::forward(y);
            let mut v = t.log_prior();
            for i in 0..6 {
                for j in 0..=i {
                    v += a[i][j] * t.w[i][j];
                }
            }
            v
        };
        let y0: [f64; N_ETA] = std::array::from_fn(|k| 0.4 * ((k as f64) - 7.0) / 15.0);
        let t = CorrTransform::forward(&y0);
        let mut grad = [0.0; N_ETA];
        t.backward(&a, &mut grad);
        let h = 1e-6;
        for k in 0..N_ETA {
            let mut yp = y0;
            yp[k] += h;
            let mut ym = y0;
            ym[k] -= h;
            let fd = (g(&yp) - g(&ym)) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn eta_pairs_and_cpc_pairs_cover_the_triangle() {
        let mut seen = [[false; 6]; 6];
        for &(i, j) in ETA_PAIRS.iter() {
            assert!(i < j);
            seen[i][j] = true;
        }
        assert_eq!(
            ETA_PAIRS.len(),
            15,
            "eta pairs enumerate the full upper triangle"
        );
        assert!(seen.iter().flatten().filter(|&&b| b).count() == 15);
    }
}
