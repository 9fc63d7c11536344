//! Full parameter set of the six linked submodels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DesignMatrices, Submodel};

/// Number of latent components (one per submodel).
pub const N_STAGES: usize = 6;
/// Free correlation parameters of a 6x6 correlation matrix.
pub const N_ETA: usize = 15;
/// Free latent scales (the two probit stages are fixed at 1).
pub const N_THETA: usize = 4;

/// Pairs (row, col), row < col, in the conventional eta numbering:
/// eta[0] is the O-M entry, ..., eta[14] the D-L entry.
pub const ETA_PAIRS: [(usize, usize); N_ETA] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (0, 4),
    (0, 5),
    (1, 2),
    (1, 3),
    (1, 4),
    (1, 5),
    (2, 3),
    (2, 4),
    (2, 5),
    (3, 4),
    (3, 5),
    (4, 5),
];

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("thresholds must be strictly increasing: {0:?}")]
    ThresholdOrder([f64; 3]),
    #[error("latent scales must be positive: {0:?}")]
    NonPositiveScale([f64; 4]),
    #[error("correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("correlation matrix has off-unit diagonal or asymmetry")]
    NotCorrelation,
    #[error("coefficient vector for {submodel:?} has length {found}, design has {expected} columns")]
    CoefficientLength {
        submodel: Submodel,
        found: usize,
        expected: usize,
    },
}

/// 6x6 correlation matrix of the latent stage effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct Corr {
    m: [[f64; 6]; 6],
}

impl Corr {
    pub fn identity() -> Corr {
        let mut m = [[0.0; 6]; 6];
        for (k, row) in m.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        Corr { m }
    }

    /// Build from the 15 off-diagonal entries in eta order.
    pub fn from_etas(etas: &[f64; N_ETA]) -> Result<Corr, ParamError> {
        let mut c = Corr::identity();
        for (k, &(i, j)) in ETA_PAIRS.iter().enumerate() {
            c.m[i][j] = etas[k];
            c.m[j][i] = etas[k];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_matrix(m: [[f64; 6]; 6]) -> Result<Corr, ParamError> {
        let c = Corr { m };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), ParamError> {
        for i in 0..6 {
            if (self.m[i][i] - 1.0).abs() > 1e-9 {
                return Err(ParamError::NotCorrelation);
            }
            for j in 0..i {
                if (self.m[i][j] - self.m[j][i]).abs() > 1e-9 {
                    return Err(ParamError::NotCorrelation);
                }
            }
        }
        if crate::model::covariance::cholesky6(&self.m).is_none() {
            return Err(ParamError::NotPositiveDefinite);
        }
        Ok(())
    }

    pub fn matrix(&self) -> &[[f64; 6]; 6] {
        &self.m
    }

    /// eta[k] for k in 0..15 (0-based; eta[14] is the D-L correlation).
    pub fn eta(&self, k: usize) -> f64 {
        let (i, j) = ETA_PAIRS[k];
        self.m[i][j]
    }

    pub fn etas(&self) -> [f64; N_ETA] {
        std::array::from_fn(|k| self.eta(k))
    }
}

impl From<Corr> for Vec<f64> {
    fn from(c: Corr) -> Vec<f64> {
        c.etas().to_vec()
    }
}

impl TryFrom<Vec<f64>> for Corr {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Corr, String> {
        let arr: [f64; N_ETA] = v
            .try_into()
            .map_err(|v: Vec<f64>| format!("expected 15 correlations, found {}", v.len()))?;
        Corr::from_etas(&arr).map_err(|e| e.to_string())
    }
}

/// Regression coefficients, ordinal thresholds, latent scales and latent
/// correlations for all six submodels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub beta_o: Vec<f64>,
    pub beta_m: Vec<f64>,
    pub beta_e: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_d: Vec<f64>,
    pub beta_l: Vec<f64>,
    pub alpha_e: [f64; 3],
    pub alpha_f: [f64; 3],
    /// Latent scales (theta_O, theta_M, theta_E, theta_F).
    pub theta: [f64; N_THETA],
    pub corr: Corr,
}

impl ParameterSet {
    pub fn beta(&self, s: Submodel) -> &[f64] {
        match s {
            Submodel::Oocytes => &self.beta_o,
            Submodel::Fertilisation => &self.beta_m,
            Submodel::Evenness => &self.beta_e,
            Submodel::Fragmentation => &self.beta_f,
            Submodel::Det => &self.beta_d,
            Submodel::Lbe => &self.beta_l,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        for alpha in [&self.alpha_e, &self.alpha_f] {
            if !(alpha[0] < alpha[1] && alpha[1] < alpha[2]) {
                return Err(ParamError::ThresholdOrder(*alpha));
            }
        }
        if self.theta.iter().any(|&t| !(t > 0.0)) {
            return Err(ParamError::NonPositiveScale(self.theta));
        }
        self.corr.validate()
    }

    /// Check coefficient lengths against a design.
    pub fn validate_for(&self, design: &DesignMatrices) -> Result<(), ParamError> {
        self.validate()?;
        for s in Submodel::ALL {
            let expected = design.design(s).n_cols();
            let found = self.beta(s).len();
            if expected != found {
                return Err(ParamError::CoefficientLength {
                    submodel: s,
                    found,
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Shape of the reported (non-latent) parameter block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub p: [usize; 6],
}

impl ParamLayout {
    pub fn of_design(design: &DesignMatrices) -> ParamLayout {
        ParamLayout {
            p: [
                design.o.n_cols(),
                design.m.n_cols(),
                design.e.n_cols(),
                design.f.n_cols(),
                design.d.n_cols(),
                design.l.n_cols(),
            ],
        }
    }

    pub fn n_beta(&self) -> usize {
        self.p.iter().sum()
    }

    /// Total reported parameters: betas + 2x3 thresholds + 4 scales + 15
    /// correlations.
    pub fn n_reported(&self) -> usize {
        self.n_beta() + 6 + N_THETA + N_ETA
    }

    /// Offset of the beta block for submodel index s (0..6).
    pub fn beta_offset(&self, s: usize) -> usize {
        self.p[..s].iter().sum()
    }

    pub fn alpha_e_offset(&self) -> usize {
        self.n_beta()
    }

    pub fn alpha_f_offset(&self) -> usize {
        self.n_beta() + 3
    }

    pub fn theta_offset(&self) -> usize {
        self.n_beta() + 6
    }

    pub fn eta_offset(&self) -> usize {
        self.n_beta() + 6 + N_THETA
    }

    /// 1-indexed bracket names in reported order: beta_O[1].. beta_L[p],
    /// alpha_E[1..3], alpha_F[1..3], theta[1..4], eta[1..15].
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_reported());
        for (s, &p) in Submodel::ALL.iter().zip(self.p.iter()) {
            for k in 1..=p {
                names.push(format!("beta_{}[{}]", s.tag(), k));
            }
        }
        for k in 1..=3 {
            names.push(format!("alpha_E[{k}]"));
        }
        for k in 1..=3 {
            names.push(format!("alpha_F[{k}]"));
        }
        for k in 1..=N_THETA {
            names.push(format!("theta[{k}]"));
        }
        for k in 1..=N_ETA {
            names.push(format!("eta[{k}]"));
        }
        names
    }

    /// Pack a parameter set into the reported constrained order.
    pub fn pack(&self, params: &ParameterSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_reported());
        out.extend_from_slice(&params.beta_o);
        out.extend_from_slice(&params.beta_m);
        out.extend_from_slice(&params.beta_e);
        out.extend_from_slice(&params.beta_f);
        out.extend_from_slice(&params.beta_d);
        out.extend_from_slice(&params.beta_l);
        out.extend_from_slice(&params.alpha_e);
        out.extend_from_slice(&params.alpha_f);
        out.extend_from_slice(&params.theta);
        out.extend_from_slice(&params.corr.etas());
        out
    }

    /// Decode a reported constrained vector back into a parameter set.
    pub fn unpack(&self, v: &[f64]) -> Result<ParameterSet, ParamError> {
        assert_eq!(v.len(), self.n_reported(), "reported vector length mismatch");
        let beta = |s: usize| v[self.beta_offset(s)..self.beta_offset(s) + self.p[s]].to_vec();
        let tri = |off: usize| [v[off], v[off + 1], v[off + 2]];
        let theta_off = self.theta_offset();
        let eta_off = self.eta_offset();
        let mut etas = [0.0; N_ETA];
        etas.copy_from_slice(&v[eta_off..eta_off + N_ETA]);
        let params = ParameterSet {
            beta_o: beta(0),
            beta_m: beta(1),
            beta_e: beta(2),
            beta_f: beta(3),
            beta_d: beta(4),
            beta_l: beta(5),
            alpha_e: tri(self.alpha_e_offset()),
            alpha_f: tri(self.alpha_f_offset()),
            theta: [v[theta_off], v[theta_off + 1], v[theta_off + 2], v[theta_off + 3]],
            corr: Corr::from_etas(&etas)?,
        };
        params.validate()?;
        Ok(params)
    }
}
