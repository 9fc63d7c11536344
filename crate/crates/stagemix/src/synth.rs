//! Forward generative simulator: synthetic cohorts drawn from a ground
//! truth parameter set, for parameter-recovery tests and demos.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{run_cascade, ObservedPrefix, StageDesign, UpstreamState};
use crate::data::{Attempt, CycleRecord, Dataset, EmbryoRecord};
use crate::math::truncated_normal_moments;
use crate::model::covariance::build_covariance;
use crate::model::params::{Corr, ParamError, ParameterSet, N_ETA};
use crate::rng::{substream, StreamLabel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("abandonment probability {0} outside [0, 0.1]")]
    Abandonment(f64),
    #[error("attempt probabilities must be nonnegative and sum to 1")]
    AttemptProbs,
    #[error("population bounds must satisfy lo < hi with positive sd")]
    Population,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Covariance(#[from] crate::model::covariance::CovarianceError),
    #[error("simulated cohort failed validation: {0}")]
    Invalid(#[from] crate::data::DataError),
}

/// Covariate-generating population: truncated normal ages, categorical
/// attempt numbers, a per-cycle fertilisation-method coin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_range: (f64, f64),
    pub partner_mean: f64,
    pub partner_sd: f64,
    pub partner_range: (f64, f64),
    pub attempt_probs: [f64; 4],
    pub icsi_prob: f64,
}

impl Population {
    /// Analytic mean/SD of the truncated age distributions, used to put
    /// simulated covariates on the standardized scale the coefficients
    /// are expressed in.
    pub fn age_moments(&self) -> (f64, f64) {
        truncated_normal_moments(self.age_mean, self.age_sd, self.age_range.0, self.age_range.1)
    }

    pub fn partner_moments(&self) -> (f64, f64) {
        truncated_normal_moments(
            self.partner_mean,
            self.partner_sd,
            self.partner_range.0,
            self.partner_range.1,
        )
    }
}

/// Everything the simulator needs: coefficients on the standardized
/// scale, the covariate population, and the abandonment probability
/// (cycles with oocytes that are nevertheless not mixed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: ParameterSet,
    pub population: Population,
    pub abandonment_prob: f64,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.params.validate()?;
        if !(0.0..=0.1).contains(&self.abandonment_prob) {
            return Err(SynthError::Abandonment(self.abandonment_prob));
        }
        let p = &self.population.attempt_probs;
        if p.iter().any(|&x| x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::AttemptProbs);
        }
        for (lo, hi, sd) in [
            (self.population.age_range.0, self.population.age_range.1, self.population.age_sd),
            (
                self.population.partner_range.0,
                self.population.partner_range.1,
                self.population.partner_sd,
            ),
        ] {
            if !(lo < hi && sd > 0.0) {
                return Err(SynthError::Population);
            }
        }
        Ok(())
    }
}

/// Reported pre-treatment joint-model point estimates, with the age
/// slopes rescaled from per-year units to the standardized scale by the
/// population SDs, and documented defaults for the unreported latent
/// scales and correlations.
pub fn default_ground_truth() -> GroundTruth {
    let population = Population {
        age_mean: 33.0,
        age_sd: 4.45,
        age_range: (21.0, 43.0),
        partner_mean: 35.0,
        partner_sd: 5.2,
        partner_range: (19.0, 72.0),
        attempt_probs: [0.72, 0.22, 0.05, 0.01],
        icsi_prob: 0.5,
    };
    let (_, s_age) = population.age_moments();
    let (_, s_par) = population.partner_moments();
    let params = ParameterSet {
        beta_o: vec![2.10, -0.04 * s_age, 0.01 * s_par, 0.06, 0.14, 0.04],
        beta_m: vec![-0.95, 0.02 * s_age, 0.0],
        beta_e: vec![0.0, 0.01 * s_par, -0.27],
        beta_f: vec![-0.03 * s_age, 0.01 * s_par, -0.33],
        beta_d: vec![0.13, 0.02 * s_age, -0.01 * s_par, 0.23, 0.44, 0.60],
        beta_l: vec![-0.49, -0.02 * s_age, -0.01 * s_par],
        alpha_e: [-4.35, -1.38, 1.33],
        alpha_f: [-5.11, -2.44, -0.33],
        theta: [0.5, 0.3, 0.8, 0.8],
        corr: Corr::from_etas(&[0.2; N_ETA]).expect("default correlations are PSD"),
    };
    GroundTruth {
        params,
        population,
        abandonment_prob: 0.005,
    }
}

struct SimulatedCovariates {
    age: f64,
    partner_age: f64,
    attempt: Attempt,
    icsi: bool,
}

fn draw_truncated_normal(
    mean: f64,
    sd: f64,
    range: (f64, f64),
    rng: &mut ChaCha12Rng,
) -> f64 {
    loop {
        let n: f64 = rng.sample(StandardNormal);
        let x = mean + sd * n;
        if x >= range.0 && x <= range.1 {
            return x;
        }
    }
}

fn draw_covariates(pop: &Population, rng: &mut ChaCha12Rng) -> SimulatedCovariates {
    let age = draw_truncated_normal(pop.age_mean, pop.age_sd, pop.age_range, rng);
    let partner_age =
        draw_truncated_normal(pop.partner_mean, pop.partner_sd, pop.partner_range, rng);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut attempt = Attempt::FourthOrFifth;
    for (k, &p) in pop.attempt_probs.iter().enumerate() {
        cum += p;
        if u < cum {
            attempt = match k {
                0 => Attempt::First,
                1 => Attempt::Second,
                2 => Attempt::Third,
                _ => Attempt::FourthOrFifth,
            };
            break;
        }
    }
    let icsi = rng.gen::<f64>() < pop.icsi_prob;
    SimulatedCovariates {
        age,
        partner_age,
        attempt,
        icsi,
    }
}

/// Pre-treatment stage designs built from baseline covariates on the
/// standardized scale.
pub(crate) struct PretreatmentDesign {
    pub o: Vec<f64>,
    pub m: Vec<f64>,
    pub ef: Vec<f64>,
    pub d: Vec<f64>,
    pub l: Vec<f64>,
}

impl PretreatmentDesign {
    pub fn new(age_std: f64, partner_std: f64, attempt: Attempt, icsi: bool) -> PretreatmentDesign {
        let dummies = attempt.dummies();
        let with_attempt = vec![
            1.0,
            age_std,
            partner_std,
            dummies[0],
            dummies[1],
            dummies[2],
        ];
        PretreatmentDesign {
            o: with_attempt.clone(),
            m: vec![1.0, age_std, partner_std],
            ef: vec![age_std, partner_std, f64::from(icsi as u8)],
            d: with_attempt,
            l: vec![1.0, age_std, partner_std],
        }
    }
}

impl StageDesign for PretreatmentDesign {
    fn x_o(&self) -> &[f64] {
        &self.o
    }
    fn x_m(&self) -> &[f64] {
        &self.m
    }
    fn x_ef(&self, _: &UpstreamState) -> Vec<f64> {
        self.ef.clone()
    }
    fn x_d(&self, _: &UpstreamState) -> Vec<f64> {
        self.d.clone()
    }
    fn x_l(&self, _: &UpstreamState) -> Vec<f64> {
        self.l.clone()
    }
}

/// Draw a six-component latent vector z = L e with standard-normal
/// innovations e.
pub(crate) fn draw_latent(chol: &[[f64; 6]; 6], rng: &mut ChaCha12Rng) -> [f64; 6] {
    let e: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut z = [0.0; 6];
    for i in 0..6 {
        for (m, &em) in e.iter().enumerate().take(i + 1) {
            z[i] += chol[i][m] * em;
        }
    }
    z
}

/// Simulate a cohort of `n_cycles` initiated cycles. Identical
/// (ground truth, n, seed) yield identical datasets; cycles use
/// independent counter-derived substreams.
pub fn simulate_cohort(gt: &GroundTruth, n_cycles: usize, seed: u64) -> Result<Dataset, SynthError> {
    gt.validate()?;
    let cov = build_covariance(&gt.params.theta, &gt.params.corr)?;
    let (m_age, s_age) = gt.population.age_moments();
    let (m_par, s_par) = gt.population.partner_moments();

    let mut cycles = Vec::with_capacity(n_cycles);
    let mut embryos = Vec::new();
    for i in 0..n_cycles {
        let mut rng = substream(seed, StreamLabel::Simulate, i as u64);
        let c = draw_covariates(&gt.population, &mut rng);
        let design = PretreatmentDesign::new(
            (c.age - m_age) / s_age,
            (c.partner_age - m_par) / s_par,
            c.attempt,
            c.icsi,
        );
        let z = draw_latent(&cov.chol, &mut rng);
        let out = run_cascade(
            &gt.params,
            &design,
            &z,
            gt.abandonment_prob,
            &ObservedPrefix::default(),
            &mut rng,
        );
        let cycle_id = format!("c{:06}", i + 1);
        for &(ev, fr) in &out.grades {
            embryos.push(EmbryoRecord {
                cycle_id: cycle_id.clone(),
                evenness: ev,
                fragmentation: fr,
                icsi: c.icsi,
            });
        }
        cycles.push(CycleRecord {
            cycle_id,
            age: c.age,
            partner_age: c.partner_age,
            attempt: c.attempt,
            n_oocytes: Some(out.n_oocytes),
            oocytes_mixed: out.mixed,
            n_embryos: out.n_embryos,
            transfer_done: out.transfer,
            det: out.det,
            lbe: out.lbe,
        });
    }
    Ok(Dataset::from_records(cycles, embryos)?)
}
