//! The sequential outcome cascade shared by the forward cohort simulator
//! and posterior-predictive simulation: draw or pass through each stage
//! in order, propagating failure deterministically.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};

use crate::model::loglik::{dot, ordinal_category_probs, LOG_RATE_CLAMP};
use crate::model::params::ParameterSet;

/// Upstream values available when building stage covariate rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpstreamState {
    pub n_oocytes: u32,
    pub n_embryos: u32,
    pub fert_rate: f64,
    pub mean_evenness: f64,
    pub mean_fragmentation: f64,
    pub det: bool,
}

/// Stage covariate rows for one patient. Pre-treatment designs ignore the
/// upstream state; dynamic designs condition on it.
pub trait StageDesign {
    fn x_o(&self) -> &[f64];
    fn x_m(&self) -> &[f64];
    fn x_ef(&self, state: &UpstreamState) -> Vec<f64>;
    fn x_d(&self, state: &UpstreamState) -> Vec<f64>;
    fn x_l(&self, state: &UpstreamState) -> Vec<f64>;
}

/// Observed stage outcomes to pass through instead of simulating.
/// Must be a prefix of the cascade.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservedPrefix {
    pub n_oocytes: Option<u32>,
    pub n_embryos: Option<u32>,
    /// (evenness, fragmentation) per embryo.
    pub grades: Option<Vec<(u8, u8)>>,
    pub det: Option<bool>,
}

impl ObservedPrefix {
    /// Check the prefix property: each observed stage requires all
    /// upstream stages observed, and grade counts match the embryo count.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_embryos.is_some() && self.n_oocytes.is_none() {
            return Err("observed embryo count without observed oocyte count".into());
        }
        if let Some(g) = &self.grades {
            match self.n_embryos {
                None => return Err("observed grades without observed embryo count".into()),
                Some(n) if g.len() != n as usize => {
                    return Err(format!("{} grade pairs for {} embryos", g.len(), n));
                }
                _ => {}
            }
        }
        if self.det.is_some() && self.grades.is_none() {
            return Err("observed transfer decision without observed grades".into());
        }
        if let (Some(e), Some(o)) = (self.n_embryos, self.n_oocytes) {
            if e > o {
                return Err("observed embryo count exceeds oocyte count".into());
            }
        }
        Ok(())
    }
}

/// One simulated draw through the cascade. Downstream stages are absent
/// where failure propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    pub n_oocytes: u32,
    pub mixed: bool,
    pub n_embryos: Option<u32>,
    pub grades: Vec<(u8, u8)>,
    pub transfer: bool,
    pub det: Option<bool>,
    pub lbe: Option<bool>,
}

impl CascadeOutcome {
    pub fn mean_grades(&self) -> Option<(f64, f64)> {
        if self.grades.is_empty() {
            return None;
        }
        let n = self.grades.len() as f64;
        let me = self.grades.iter().map(|&(e, _)| f64::from(e)).sum::<f64>() / n;
        let mf = self.grades.iter().map(|&(_, f)| f64::from(f)).sum::<f64>() / n;
        Some((me, mf))
    }
}

fn draw_poisson(rate: f64, rng: &mut ChaCha12Rng) -> u32 {
    if rate < 1e-12 {
        return 0;
    }
    let rate = rate.min(LOG_RATE_CLAMP.exp());
    let draw: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
    draw.min(f64::from(u32::MAX)) as u32
}

fn draw_grade(alpha: &[f64; 3], linpred: f64, rng: &mut ChaCha12Rng) -> u8 {
    let p = ordinal_category_probs(alpha, linpred);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        cum += pk;
        if u < cum {
            return (k + 1) as u8;
        }
    }
    4
}

/// Simulate (or pass through) the stages in order.
///
/// `z` holds the six latent stage effects; the caller decides whether
/// they come from the full latent distribution, from independent draws,
/// or are zeroed. `abandonment_prob` is the chance a cycle with oocytes
/// is nevertheless not mixed (cohort simulation only; prediction passes 0).
pub fn run_cascade<D: StageDesign + ?Sized>(
    params: &ParameterSet,
    design: &D,
    z: &[f64; 6],
    abandonment_prob: f64,
    prefix: &ObservedPrefix,
    rng: &mut ChaCha12Rng,
) -> CascadeOutcome {
    // stage O: oocyte count
    let n_oocytes = match prefix.n_oocytes {
        Some(y) => y,
        None => {
            let eta = dot(design.x_o(), &params.beta_o) + z[0];
            draw_poisson(eta.min(LOG_RATE_CLAMP).exp(), rng)
        }
    };

    // mixing decision (abandonment only applies when not observed)
    let mixed = if prefix.n_oocytes.is_some() {
        // observed path: mixing is implied by the downstream observations
        n_oocytes >= 1 && (prefix.n_embryos.is_some() || abandonment_prob == 0.0 || {
            rng.gen::<f64>() >= abandonment_prob
        })
    } else {
        n_oocytes >= 1 && (abandonment_prob == 0.0 || rng.gen::<f64>() >= abandonment_prob)
    };

    if !mixed {
        return CascadeOutcome {
            n_oocytes,
            mixed: false,
            n_embryos: None,
            grades: Vec::new(),
            transfer: false,
            det: None,
            lbe: None,
        };
    }

    // stage M: embryo count, right-truncated at the oocyte count
    let n_embryos = match prefix.n_embryos {
        Some(y) => y,
        None => {
            let eta = f64::from(n_oocytes).ln() + dot(design.x_m(), &params.beta_m) + z[1];
            let rate = eta.min(LOG_RATE_CLAMP).exp();
            let mut y = draw_poisson(rate, rng);
            let mut tries = 0;
            while y > n_oocytes && tries < 10_000 {
                y = draw_poisson(rate, rng);
                tries += 1;
            }
            y.min(n_oocytes)
        }
    };

    if n_embryos == 0 {
        return CascadeOutcome {
            n_oocytes,
            mixed: true,
            n_embryos: Some(0),
            grades: Vec::new(),
            transfer: false,
            det: None,
            lbe: None,
        };
    }

    // embryo grading
    let mut state = UpstreamState {
        n_oocytes,
        n_embryos,
        fert_rate: f64::from(n_embryos) / f64::from(n_oocytes),
        ..UpstreamState::default()
    };
    let grades = match &prefix.grades {
        Some(g) => g.clone(),
        None => {
            let x_ef = design.x_ef(&state);
            let lin_e = dot(&x_ef, &params.beta_e) + z[2];
            let lin_f = dot(&x_ef, &params.beta_f) + z[3];
            (0..n_embryos)
                .map(|_| {
                    let e = draw_grade(&params.alpha_e, lin_e, rng);
                    let f = draw_grade(&params.alpha_f, lin_f, rng);
                    (e, f)
                })
                .collect()
        }
    };
    let n = grades.len() as f64;
    state.mean_evenness = grades.iter().map(|&(e, _)| f64::from(e)).sum::<f64>() / n;
    state.mean_fragmentation = grades.iter().map(|&(_, f)| f64::from(f)).sum::<f64>() / n;

    // transfer happens whenever embryos exist
    let det = match prefix.det {
        Some(v) => v,
        None => {
            let raw = dot(&design.x_d(&state), &params.beta_d) + z[4] >= 0.0;
            // transferring two embryos requires having two
            raw && n_embryos >= 2
        }
    };
    state.det = det;

    let lbe = dot(&design.x_l(&state), &params.beta_l) + z[5] >= 0.0;

    CascadeOutcome {
        n_oocytes,
        mixed: true,
        n_embryos: Some(n_embryos),
        grades,
        transfer: true,
        det: Some(det),
        lbe: Some(lbe),
    }
}
