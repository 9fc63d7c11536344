//! Sequential posterior-predictive simulation for new or in-progress
//! patients: pre-treatment (baseline covariates only, failure propagated
//! through simulated stages) and dynamic (conditioning on observed
//! upstream outcomes as covariates).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::cascade::ObservedPrefix;
use crate::cascade::{run_cascade, StageDesign, UpstreamState};
use crate::data::{Attempt, Dataset, Setting, StandardizationParams};
use crate::fits::PosteriorFit;
use crate::math::quantile;
use crate::model::covariance::{build_covariance, LatentCovariance};
use crate::model::params::ParameterSet;
use crate::rng::{substream2, StreamLabel};
use crate::synth::{draw_latent, PretreatmentDesign};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("fit setting is {fit}, request needs {requested}")]
    SettingMismatch { fit: Setting, requested: Setting },
    #[error("patient {patient}: {message}")]
    Patient { patient: usize, message: String },
    #[error("joint-event estimates require the per-cycle-started denominator")]
    NeedsStartedDenominator,
    #[error("predicate touched embryo grades on a zero-embryo draw (guard with the Option accessors)")]
    UnguardedGrades,
    #[error(transparent)]
    Param(#[from] crate::model::params::ParamError),
    #[error(transparent)]
    Covariance(#[from] crate::model::covariance::CovarianceError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("predictive draws file {path}: {message}")]
    File { path: String, message: String },
}

/// Denominator convention for patient-level outcome rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// All initiated cycles; pre-transfer failures count as non-events.
    PerCycleStarted,
    /// Only units reaching the stage in question.
    ConditionalOnStage,
}

impl std::fmt::Display for Denominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Denominator::PerCycleStarted => write!(f, "per_cycle_started"),
            Denominator::ConditionalOnStage => write!(f, "conditional_on_stage"),
        }
    }
}

/// Covariates (raw scale) of one patient to predict for, plus any
/// observed upstream outcomes for dynamic prediction.
#[derive(Debug, Clone)]
pub struct PredictPatient {
    pub age: f64,
    pub partner_age: f64,
    pub attempt: Attempt,
    /// Planned fertilisation method (embryo-level covariate, decided
    /// prospectively).
    pub icsi: bool,
    pub observed: ObservedPrefix,
}

/// Last stage whose outcome is taken as observed when building dynamic
/// prediction requests from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserveUpTo {
    Nothing,
    Oocytes,
    Embryos,
    Grades,
    Det,
}

/// Extract prediction patients from a dataset, conditioning on stages up
/// to `upto` where observed. The fertilisation-method plan is taken from
/// the cycle's embryos (false when it has none).
pub fn patients_from_dataset(ds: &Dataset, upto: ObserveUpTo) -> Vec<PredictPatient> {
    ds.cycles()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let embryos = ds.embryos_of(i);
            let icsi = embryos.first().map(|e| e.icsi).unwrap_or(false);
            let mut observed = ObservedPrefix::default();
            if upto >= ObserveUpTo::Oocytes {
                observed.n_oocytes = c.n_oocytes;
            }
            // a non-mixed cycle truncates the observable prefix at oocytes
            if upto >= ObserveUpTo::Embryos && c.oocytes_mixed {
                observed.n_embryos = c.n_embryos;
            }
            if upto >= ObserveUpTo::Grades && !embryos.is_empty() {
                observed.grades =
                    Some(embryos.iter().map(|e| (e.evenness, e.fragmentation)).collect());
            }
            if upto >= ObserveUpTo::Det && c.transfer_done {
                observed.det = c.det;
            }
            PredictPatient {
                age: c.age,
                partner_age: c.partner_age,
                attempt: c.attempt,
                icsi,
                observed,
            }
        })
        .collect()
}

impl PartialOrd for ObserveUpTo {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ObserveUpTo {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// What to simulate.
pub struct PredictionRequest<'a> {
    pub fit: &'a PosteriorFit,
    pub patients: &'a [PredictPatient],
    pub include_random_effects: bool,
    /// Predictive draws per patient; mapped over the pooled posterior
    /// draws with even spacing.
    pub n_draws: usize,
    pub denominator: Denominator,
    pub seed: u64,
}

/// One simulated draw for one patient, with absent markers where failure
/// propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellOutcome {
    pub n_oocytes: u32,
    pub n_embryos: Option<u32>,
    pub transfer: bool,
    pub det: Option<bool>,
    pub lbe: Option<bool>,
    /// Embryo counts by evenness grade 1..=4.
    pub evenness_counts: [u32; 4],
    /// Embryo counts by fragmentation grade 1..=4.
    pub fragmentation_counts: [u32; 4],
}

impl CellOutcome {
    /// Embryo count under the per-cycle-started convention (0 on failure).
    pub fn embryos_started(&self) -> u32 {
        self.n_embryos.unwrap_or(0)
    }

    /// DET under the per-cycle-started convention.
    pub fn det_started(&self) -> bool {
        self.det.unwrap_or(false)
    }

    /// LBE under the per-cycle-started convention.
    pub fn lbe_started(&self) -> bool {
        self.lbe.unwrap_or(false)
    }

    pub fn total_graded(&self) -> u32 {
        self.evenness_counts.iter().sum()
    }

    /// Mean evenness grade; None where no embryos exist.
    pub fn mean_evenness(&self) -> Option<f64> {
        let n = self.total_graded();
        if n == 0 {
            return None;
        }
        let s: u32 = self
            .evenness_counts
            .iter()
            .enumerate()
            .map(|(k, &c)| (k as u32 + 1) * c)
            .sum();
        Some(f64::from(s) / f64::from(n))
    }

    pub fn mean_fragmentation(&self) -> Option<f64> {
        let n = self.total_graded();
        if n == 0 {
            return None;
        }
        let s: u32 = self
            .fragmentation_counts
            .iter()
            .enumerate()
            .map(|(k, &c)| (k as u32 + 1) * c)
            .sum();
        Some(f64::from(s) / f64::from(n))
    }
}

/// Per-patient, per-draw simulated sequential outcomes.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub n_patients: usize,
    pub n_draws: usize,
    pub denominator: Denominator,
    cells: Vec<CellOutcome>,
}

impl PredictiveDraws {
    pub fn cell(&self, patient: usize, draw: usize) -> &CellOutcome {
        &self.cells[patient * self.n_draws + draw]
    }

    pub fn cells_of_draw(&self, draw: usize) -> impl Iterator<Item = &CellOutcome> {
        (0..self.n_patients).map(move |p| self.cell(p, draw))
    }

    pub fn cells_of_patient(&self, patient: usize) -> &[CellOutcome] {
        &self.cells[patient * self.n_draws..(patient + 1) * self.n_draws]
    }

    pub fn all_cells(&self) -> &[CellOutcome] {
        &self.cells
    }

    /// Aggregate live-birth rate under a denominator convention.
    pub fn lbe_rate(&self, denominator: Denominator) -> f64 {
        match denominator {
            Denominator::PerCycleStarted => {
                self.cells.iter().filter(|c| c.lbe_started()).count() as f64
                    / self.cells.len() as f64
            }
            Denominator::ConditionalOnStage => {
                let reached: Vec<&CellOutcome> =
                    self.cells.iter().filter(|c| c.lbe.is_some()).collect();
                reached.iter().filter(|c| c.lbe == Some(true)).count() as f64
                    / reached.len() as f64
            }
        }
    }
}

/// Map predictive draw k onto a pooled posterior draw index.
fn posterior_index(k: usize, n_draws: usize, n_pooled: usize) -> usize {
    if n_draws <= n_pooled {
        (k * n_pooled) / n_draws
    } else {
        k % n_pooled
    }
}

struct DynamicDesign<'a> {
    base: PretreatmentDesign,
    icsi: f64,
    params: &'a StandardizationParams,
}

impl StageDesign for DynamicDesign<'_> {
    fn x_o(&self) -> &[f64] {
        self.base.x_o()
    }

    fn x_m(&self) -> &[f64] {
        self.base.x_m()
    }

    fn x_ef(&self, s: &UpstreamState) -> Vec<f64> {
        let mut x = vec![self.base.ef[0], self.base.ef[1], self.icsi];
        x.push(self.params.standardize("n_oocytes", f64::from(s.n_oocytes)));
        x.push(self.params.standardize("fert_rate", s.fert_rate));
        x
    }

    fn x_d(&self, s: &UpstreamState) -> Vec<f64> {
        let mut x = self.base.d.clone();
        x.extend(self.dynamic_extras(s));
        x
    }

    fn x_l(&self, s: &UpstreamState) -> Vec<f64> {
        let mut x = self.base.l.clone();
        x.extend(self.dynamic_extras(s));
        x.push(f64::from(s.det as u8));
        x
    }
}

impl DynamicDesign<'_> {
    fn dynamic_extras(&self, s: &UpstreamState) -> [f64; 4] {
        [
            self.params.standardize("n_oocytes", f64::from(s.n_oocytes)),
            self.params.standardize("fert_rate", s.fert_rate),
            self.params.standardize("mean_evenness", s.mean_evenness),
            self.params.standardize("mean_fragmentation", s.mean_fragmentation),
        ]
    }
}

/// Pre-treatment sequential prediction: simulate the whole cascade from
/// baseline covariates for each posterior draw.
pub fn predict_pretreatment(request: &PredictionRequest<'_>) -> Result<PredictiveDraws, PredictError> {
    if request.fit.setting != Setting::Pretreatment {
        return Err(PredictError::SettingMismatch {
            fit: request.fit.setting,
            requested: Setting::Pretreatment,
        });
    }
    for (i, p) in request.patients.iter().enumerate() {
        if p.observed != ObservedPrefix::default() {
            return Err(PredictError::Patient {
                patient: i,
                message: "pre-treatment prediction takes baseline covariates only".into(),
            });
        }
    }
    simulate(request)
}

/// Dynamic sequential prediction: stages already observed pass through;
/// downstream stages condition on them as covariates.
pub fn predict_dynamic(request: &PredictionRequest<'_>) -> Result<PredictiveDraws, PredictError> {
    if request.fit.setting != Setting::Dynamic {
        return Err(PredictError::SettingMismatch {
            fit: request.fit.setting,
            requested: Setting::Dynamic,
        });
    }
    for (i, p) in request.patients.iter().enumerate() {
        p.observed.validate().map_err(|message| PredictError::Patient {
            patient: i,
            message,
        })?;
    }
    simulate(request)
}

fn simulate(request: &PredictionRequest<'_>) -> Result<PredictiveDraws, PredictError> {
    let fit = request.fit;
    let n_pooled = fit.n_draws();
    let n_draws = request.n_draws;

    // materialize the parameter draws (and their covariance factors) once
    let mut used: Vec<usize> = (0..n_draws)
        .map(|k| posterior_index(k, n_draws, n_pooled))
        .collect();
    used.sort_unstable();
    used.dedup();
    let mut cache: Vec<(usize, ParameterSet, LatentCovariance)> = Vec::with_capacity(used.len());
    for idx in used {
        let params = fit.parameter_draw(idx)?;
        let cov = build_covariance(&params.theta, &params.corr)?;
        cache.push((idx, params, cov));
    }
    let lookup = |k: usize| -> &(usize, ParameterSet, LatentCovariance) {
        let target = posterior_index(k, n_draws, n_pooled);
        let pos = cache
            .binary_search_by(|probe| probe.0.cmp(&target))
            .expect("cached posterior draw");
        &cache[pos]
    };

    let std = &fit.standardization;
    let mut cells = Vec::with_capacity(request.patients.len() * n_draws);
    for (i, patient) in request.patients.iter().enumerate() {
        let age_std = std.standardize("age", patient.age);
        let partner_std = std.standardize("partner_age", patient.partner_age);
        let base = PretreatmentDesign::new(age_std, partner_std, patient.attempt, patient.icsi);
        let dynamic = DynamicDesign {
            base: PretreatmentDesign::new(age_std, partner_std, patient.attempt, patient.icsi),
            icsi: f64::from(patient.icsi as u8),
            params: std,
        };
        for k in 0..n_draws {
            let (_, params, cov) = lookup(k);
            let mut rng = substream2(request.seed, StreamLabel::Predict, i as u64, k as u64);
            let z = if request.include_random_effects {
                draw_latent(&cov.chol, &mut rng)
            } else {
                // free random effects zeroed; the unit-variance probit
                // noise is intrinsic and always drawn
                let d: f64 = rng.sample(StandardNormal);
                let l: f64 = rng.sample(StandardNormal);
                [0.0, 0.0, 0.0, 0.0, d, l]
            };
            let out = match fit.setting {
                Setting::Pretreatment => {
                    run_cascade(params, &base, &z, 0.0, &patient.observed, &mut rng)
                }
                Setting::Dynamic => {
                    run_cascade(params, &dynamic, &z, 0.0, &patient.observed, &mut rng)
                }
            };
            let mut ev = [0u32; 4];
            let mut fr = [0u32; 4];
            for &(e, f) in &out.grades {
                ev[(e - 1) as usize] += 1;
                fr[(f - 1) as usize] += 1;
            }
            cells.push(CellOutcome {
                n_oocytes: out.n_oocytes,
                n_embryos: out.n_embryos,
                transfer: out.transfer,
                det: out.det,
                lbe: out.lbe,
                evenness_counts: ev,
                fragmentation_counts: fr,
            });
        }
    }
    Ok(PredictiveDraws {
        n_patients: request.patients.len(),
        n_draws,
        denominator: request.denominator,
        cells,
    })
}

/// Population estimate of a joint outcome event with a 95% interval:
/// per posterior draw, the cohort proportion satisfying the predicate;
/// reported as the median and 2.5/97.5 percentiles across draws.
pub fn joint_event_probability<F>(
    draws: &PredictiveDraws,
    predicate: F,
) -> Result<EventEstimate, PredictError>
where
    F: Fn(&CellOutcome) -> Result<bool, PredictError>,
{
    if draws.denominator != Denominator::PerCycleStarted {
        return Err(PredictError::NeedsStartedDenominator);
    }
    let mut proportions = Vec::with_capacity(draws.n_draws);
    for k in 0..draws.n_draws {
        let mut hits = 0usize;
        for cell in draws.cells_of_draw(k) {
            if predicate(cell)? {
                hits += 1;
            }
        }
        proportions.push(hits as f64 / draws.n_patients as f64);
    }
    Ok(EventEstimate {
        median: quantile(&proportions, 0.5),
        lo: quantile(&proportions, 0.025),
        hi: quantile(&proportions, 0.975),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventEstimate {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// The "safe and successful" joint event: fewer than 15 oocytes and a
/// live birth, failures counted as non-events.
pub fn safe_and_successful(cell: &CellOutcome) -> Result<bool, PredictError> {
    Ok(cell.n_oocytes < 15 && cell.lbe_started())
}

const COUNT_BUCKETS: usize = 26;

fn count_bucket(v: u32) -> usize {
    (v as usize).min(COUNT_BUCKETS - 1)
}

fn bucket_label(b: usize) -> String {
    if b == COUNT_BUCKETS - 1 {
        "25+".into()
    } else {
        b.to_string()
    }
}

/// Observed-vs-predicted calibration table: per outcome, the observed
/// cohort distribution next to 2.5/50/97.5 predictive percentiles.
/// Counts are bucketed 0..24, 25+; binaries are event proportions per
/// cycle started; grades are category frequencies over graded embryos.
pub fn calibration_export(
    draws: &PredictiveDraws,
    observed: &Dataset,
    path: impl AsRef<Path>,
) -> Result<(), PredictError> {
    assert_eq!(
        draws.n_patients,
        observed.n_cycles(),
        "draws and observations must align by patient"
    );
    let path = path.as_ref();
    let io = |source| PredictError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut rows: Vec<(String, String, f64, [f64; 3])> = Vec::new();

    let n = draws.n_patients as f64;
    // count outcomes, bucketed
    for (name, obs_of, pred_of) in [
        (
            "n_oocytes",
            Box::new(|c: &crate::data::CycleRecord| c.n_oocytes.unwrap_or(0))
                as Box<dyn Fn(&crate::data::CycleRecord) -> u32>,
            Box::new(|cell: &CellOutcome| cell.n_oocytes) as Box<dyn Fn(&CellOutcome) -> u32>,
        ),
        (
            "n_embryos",
            Box::new(|c: &crate::data::CycleRecord| c.n_embryos.unwrap_or(0)),
            Box::new(|cell: &CellOutcome| cell.embryos_started()),
        ),
    ] {
        let mut obs = [0f64; COUNT_BUCKETS];
        for c in observed.cycles() {
            obs[count_bucket(obs_of(c))] += 1.0;
        }
        let mut pred = vec![[0f64; COUNT_BUCKETS]; draws.n_draws];
        for (k, row) in pred.iter_mut().enumerate() {
            for cell in draws.cells_of_draw(k) {
                row[count_bucket(pred_of(cell))] += 1.0;
            }
        }
        for b in 0..COUNT_BUCKETS {
            let per_draw: Vec<f64> = pred.iter().map(|row| row[b] / n).collect();
            rows.push((
                name.to_string(),
                bucket_label(b),
                obs[b] / n,
                [
                    quantile(&per_draw, 0.025),
                    quantile(&per_draw, 0.5),
                    quantile(&per_draw, 0.975),
                ],
            ));
        }
    }

    // binary outcomes per cycle started
    for (name, obs_of, pred_of) in [
        (
            "transfer",
            Box::new(|c: &crate::data::CycleRecord| c.transfer_done)
                as Box<dyn Fn(&crate::data::CycleRecord) -> bool>,
            Box::new(|cell: &CellOutcome| cell.transfer) as Box<dyn Fn(&CellOutcome) -> bool>,
        ),
        (
            "det",
            Box::new(|c: &crate::data::CycleRecord| c.det.unwrap_or(false)),
            Box::new(|cell: &CellOutcome| cell.det_started()),
        ),
        (
            "lbe",
            Box::new(|c: &crate::data::CycleRecord| c.lbe.unwrap_or(false)),
            Box::new(|cell: &CellOutcome| cell.lbe_started()),
        ),
    ] {
        let obs = observed.cycles().iter().filter(|c| obs_of(c)).count() as f64 / n;
        let per_draw: Vec<f64> = (0..draws.n_draws)
            .map(|k| draws.cells_of_draw(k).filter(|c| pred_of(c)).count() as f64 / n)
            .collect();
        rows.push((
            name.to_string(),
            "event".into(),
            obs,
            [
                quantile(&per_draw, 0.025),
                quantile(&per_draw, 0.5),
                quantile(&per_draw, 0.975),
            ],
        ));
    }

    // grade category frequencies, conditional on embryos existing
    for (name, obs_grade, pred_counts) in [
        (
            "evenness",
            Box::new(|e: &crate::data::EmbryoRecord| e.evenness)
                as Box<dyn Fn(&crate::data::EmbryoRecord) -> u8>,
            Box::new(|cell: &CellOutcome| cell.evenness_counts)
                as Box<dyn Fn(&CellOutcome) -> [u32; 4]>,
        ),
        (
            "fragmentation",
            Box::new(|e: &crate::data::EmbryoRecord| e.fragmentation),
            Box::new(|cell: &CellOutcome| cell.fragmentation_counts),
        ),
    ] {
        let total_obs = observed.n_embryos() as f64;
        for g in 1..=4u8 {
            let obs = if total_obs > 0.0 {
                observed.embryos().iter().filter(|e| obs_grade(e) == g).count() as f64 / total_obs
            } else {
                0.0
            };
            let mut per_draw = Vec::with_capacity(draws.n_draws);
            for k in 0..draws.n_draws {
                let mut count = 0u64;
                let mut total = 0u64;
                for cell in draws.cells_of_draw(k) {
                    count += u64::from(pred_counts(cell)[(g - 1) as usize]);
                    total += u64::from(cell.total_graded());
                }
                if total > 0 {
                    per_draw.push(count as f64 / total as f64);
                }
            }
            let q = if per_draw.is_empty() {
                [f64::NAN; 3]
            } else {
                [
                    quantile(&per_draw, 0.025),
                    quantile(&per_draw, 0.5),
                    quantile(&per_draw, 0.975),
                ]
            };
            rows.push((name.to_string(), format!("grade_{g}"), obs, q));
        }
    }

    (|| -> std::io::Result<()> {
        writeln!(out, "outcome,bucket,observed,lo,mid,hi")?;
        for (outcome, bucket, obs, q) in rows {
            writeln!(
                out,
                "{outcome},{bucket},{obs:.16e},{:.16e},{:.16e},{:.16e}",
                q[0], q[1], q[2]
            )?;
        }
        out.flush()
    })()
    .map_err(io)?;
    Ok(())
}

impl PredictiveDraws {
    /// Persist in long format (patient, draw, outcome, value) with empty
    /// values where failure propagated.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictError> {
        let path = path.as_ref();
        let io = |source| PredictError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        (|| -> std::io::Result<()> {
            writeln!(out, "patient,draw,outcome,value")?;
            let opt_u32 = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
            let opt_bool =
                |v: Option<bool>| v.map(|x| u8::from(x).to_string()).unwrap_or_default();
            for p in 0..self.n_patients {
                for k in 0..self.n_draws {
                    let c = self.cell(p, k);
                    writeln!(out, "{p},{k},n_oocytes,{}", c.n_oocytes)?;
                    writeln!(out, "{p},{k},n_embryos,{}", opt_u32(c.n_embryos))?;
                    writeln!(out, "{p},{k},transfer,{}", u8::from(c.transfer))?;
                    writeln!(out, "{p},{k},det,{}", opt_bool(c.det))?;
                    writeln!(out, "{p},{k},lbe,{}", opt_bool(c.lbe))?;
                    for g in 0..4 {
                        let (e, f) = (c.evenness_counts[g], c.fragmentation_counts[g]);
                        if c.total_graded() > 0 {
                            writeln!(out, "{p},{k},evenness_{},{e}", g + 1)?;
                            writeln!(out, "{p},{k},fragmentation_{},{f}", g + 1)?;
                        } else {
                            writeln!(out, "{p},{k},evenness_{},", g + 1)?;
                            writeln!(out, "{p},{k},fragmentation_{},", g + 1)?;
                        }
                    }
                }
            }
            out.flush()
        })()
        .map_err(io)?;
        Ok(())
    }

    /// Reload draws persisted by `save`.
    pub fn load(path: impl AsRef<Path>, denominator: Denominator) -> Result<PredictiveDraws, PredictError> {
        let path = path.as_ref();
        let fail = |message: String| PredictError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|source| PredictError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some("patient,draw,outcome,value") => {}
            other => return Err(fail(format!("unexpected header {other:?}"))),
        }
        let mut n_patients = 0usize;
        let mut n_draws = 0usize;
        let mut parsed: Vec<(usize, usize, String, Option<u32>)> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let mut parts = line.splitn(4, ',');
            let err = || fail(format!("malformed row {}", ln + 2));
            let p: usize = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
            let k: usize = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
            let outcome = parts.next().ok_or_else(err)?.to_string();
            let raw = parts.next().ok_or_else(err)?;
            let value = if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<u32>().map_err(|_| err())?)
            };
            n_patients = n_patients.max(p + 1);
            n_draws = n_draws.max(k + 1);
            parsed.push((p, k, outcome, value));
        }
        let mut cells = vec![
            CellOutcome {
                n_oocytes: 0,
                n_embryos: None,
                transfer: false,
                det: None,
                lbe: None,
                evenness_counts: [0; 4],
                fragmentation_counts: [0; 4],
            };
            n_patients * n_draws
        ];
        for (p, k, outcome, value) in parsed {
            let cell = &mut cells[p * n_draws + k];
            match outcome.as_str() {
                "n_oocytes" => cell.n_oocytes = value.unwrap_or(0),
                "n_embryos" => cell.n_embryos = value,
                "transfer" => cell.transfer = value == Some(1),
                "det" => cell.det = value.map(|v| v == 1),
                "lbe" => cell.lbe = value.map(|v| v == 1),
                other => {
                    if let Some(g) = other.strip_prefix("evenness_") {
                        let g: usize = g.parse().map_err(|_| fail(format!("bad outcome {other}")))?;
                        cell.evenness_counts[g - 1] = value.unwrap_or(0);
                    } else if let Some(g) = other.strip_prefix("fragmentation_") {
                        let g: usize = g.parse().map_err(|_| fail(format!("bad outcome {other}")))?;
                        cell.fragmentation_counts[g - 1] = value.unwrap_or(0);
                    } else {
                        return Err(fail(format!("unknown outcome {other}")));
                    }
                }
            }
        }
        Ok(PredictiveDraws {
            n_patients,
            n_draws,
            denominator,
            cells,
        })
    }
}
