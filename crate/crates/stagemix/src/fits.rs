//! Orchestration of the four model variants (separate/joint x
//! pre-treatment/dynamic): run the samplers, collect diagnostics,
//! summarize coefficient tables, persist and reload fits.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_design, DataError, Dataset, DesignMatrices, Setting, StandardizationParams, Submodel,
};
use crate::math::quantile;
use crate::model::joint::JointPosterior;
use crate::model::params::{ParamError, ParamLayout, ParameterSet, N_ETA, N_THETA};
use crate::model::separate::SeparateModel;
use crate::rng::derive_seed;
use crate::sampler::{
    run_chains_with_parallelism, PosteriorDraws, SamplerConfig, SamplerError, Target, TargetEval,
};

/// Convergence gate on the potential scale reduction factor.
pub const RHAT_GATE: f64 = 1.05;

const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Separate,
    Joint,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Separate => write!(f, "separate"),
            Mode::Joint => write!(f, "joint"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("count submodel linear predictor clamped after warm-up; fit is unreliable")]
    ClampedPostWarmup,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fit artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("fit artifact version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FitError + '_ {
    move |source| FitError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// What to fit and how.
pub struct FitRequest<'a> {
    /// Dataset with baseline covariates already standardized.
    pub dataset: &'a Dataset,
    pub mode: Mode,
    pub setting: Setting,
    pub sampler: SamplerConfig,
    /// Moments used to standardize the baseline covariates.
    pub standardization: StandardizationParams,
}

/// Posterior draws plus everything needed to interpret and reuse them.
#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub mode: Mode,
    pub setting: Setting,
    /// One entry in joint mode; six (submodel order) in separate mode.
    pub draws: Vec<PosteriorDraws>,
    pub layout: ParamLayout,
    /// Column labels per submodel design.
    pub columns: [Vec<String>; 6],
    /// Baseline moments merged with the dynamic-covariate moments.
    pub standardization: StandardizationParams,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub rhat: Vec<(String, Option<f64>)>,
    pub max_rhat: Option<f64>,
    pub divergences: usize,
    pub converged: bool,
    pub wall_time: Duration,
}

impl Target for JointPosterior<'_> {
    fn dim(&self) -> usize {
        JointPosterior::dim(self)
    }

    fn logp_grad_raw(&self, x: &[f64], grad: &mut [f64]) -> TargetEval {
        match self.logp_grad(x, grad) {
            Ok(eval) => TargetEval {
                value: eval.value,
                clamped: eval.clamped,
            },
            Err(_) => TargetEval {
                value: f64::NEG_INFINITY,
                clamped: false,
            },
        }
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.layout().pack(&self.decode(x))
    }

    fn param_names(&self) -> Vec<String> {
        self.layout().names()
    }
}

impl Target for SeparateModel {
    fn dim(&self) -> usize {
        SeparateModel::dim(self)
    }

    fn logp_grad_raw(&self, x: &[f64], grad: &mut [f64]) -> TargetEval {
        match self.logp_grad(x, grad) {
            Ok(eval) => TargetEval {
                value: eval.value,
                clamped: eval.clamped,
            },
            Err(_) => TargetEval {
                value: f64::NEG_INFINITY,
                clamped: false,
            },
        }
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        SeparateModel::constrain(self, x)
    }

    fn param_names(&self) -> Vec<String> {
        self.names()
    }
}

fn design_columns(design: &DesignMatrices) -> [Vec<String>; 6] {
    [
        design.o.columns.clone(),
        design.m.columns.clone(),
        design.e.columns.clone(),
        design.f.columns.clone(),
        design.d.columns.clone(),
        design.l.columns.clone(),
    ]
}

/// Fit the requested model variant. A fit that fails the Rhat gate is
/// returned flagged, not rejected; a count-model clamp after warm-up is
/// an error.
pub fn fit(request: &FitRequest<'_>) -> Result<PosteriorFit, FitError> {
    fit_with_parallelism(request, true)
}

pub fn fit_with_parallelism(
    request: &FitRequest<'_>,
    parallel: bool,
) -> Result<PosteriorFit, FitError> {
    let start = Instant::now();
    let design = build_design(request.dataset, request.setting)?;
    let layout = ParamLayout::of_design(&design);
    let columns = design_columns(&design);

    let draws = match request.mode {
        Mode::Joint => {
            let post = JointPosterior::new(&design);
            vec![run_chains_with_parallelism(&post, &request.sampler, parallel)?]
        }
        Mode::Separate => {
            let mut all = Vec::with_capacity(6);
            for (k, s) in Submodel::ALL.iter().enumerate() {
                let model = SeparateModel::new(*s, &design);
                let mut config = request.sampler;
                config.seed = derive_seed(request.sampler.seed, k as u64 + 1);
                all.push(run_chains_with_parallelism(&model, &config, parallel)?);
            }
            all
        }
    };

    if draws.iter().any(|d| d.any_clamped()) {
        return Err(FitError::ClampedPostWarmup);
    }

    let mut rhat = Vec::new();
    for d in &draws {
        rhat.extend(d.rhat_table());
    }
    let max_rhat = rhat
        .iter()
        .map(|(_, r)| *r)
        .collect::<Option<Vec<f64>>>()
        .map(|rs| rs.into_iter().fold(f64::NEG_INFINITY, f64::max));
    let divergences = draws.iter().map(|d| d.divergences()).sum();
    let converged = matches!(max_rhat, Some(m) if m < RHAT_GATE);

    Ok(PosteriorFit {
        mode: request.mode,
        setting: request.setting,
        draws,
        layout,
        columns,
        standardization: request.standardization.merged(&design.derived_params),
        diagnostics: FitDiagnostics {
            rhat,
            max_rhat,
            divergences,
            converged,
            wall_time: start.elapsed(),
        },
    })
}

impl PosteriorFit {
    /// Build a fit-shaped object from known parameter sets, e.g. a ground
    /// truth for oracle predictions. Diagnostics are vacuous.
    pub fn from_known(
        params: Vec<ParameterSet>,
        setting: Setting,
        columns: [Vec<String>; 6],
        standardization: StandardizationParams,
    ) -> Result<PosteriorFit, ParamError> {
        assert!(!params.is_empty());
        let layout = ParamLayout {
            p: [
                params[0].beta_o.len(),
                params[0].beta_m.len(),
                params[0].beta_e.len(),
                params[0].beta_f.len(),
                params[0].beta_d.len(),
                params[0].beta_l.len(),
            ],
        };
        let mut draws = Vec::with_capacity(params.len());
        for p in &params {
            p.validate()?;
            draws.push(layout.pack(p));
        }
        let config = SamplerConfig {
            n_chains: 1,
            n_iterations: params.len(),
            n_warmup: 0,
            ..SamplerConfig::default()
        };
        let block = PosteriorDraws {
            names: layout.names(),
            chains: vec![crate::sampler::ChainDraws {
                draws,
                stats: Vec::new(),
                last_position: Vec::new(),
            }],
            config,
        };
        Ok(PosteriorFit {
            mode: Mode::Joint,
            setting,
            draws: vec![block],
            layout,
            columns,
            standardization,
            diagnostics: FitDiagnostics {
                rhat: Vec::new(),
                max_rhat: None,
                divergences: 0,
                converged: true,
                wall_time: Duration::ZERO,
            },
        })
    }

    /// Kept draws per chain (identical across submodels in separate mode).
    pub fn n_kept(&self) -> usize {
        self.draws[0].n_kept()
    }

    pub fn n_chains(&self) -> usize {
        self.draws[0].chains.len()
    }

    /// Pooled number of posterior draws.
    pub fn n_draws(&self) -> usize {
        self.n_kept() * self.n_chains()
    }

    /// Reconstruct the parameter set of pooled draw `i` (chain-major).
    ///
    /// Separate mode assembles the six independent fits at the same draw
    /// index with an identity latent correlation.
    pub fn parameter_draw(&self, i: usize) -> Result<ParameterSet, ParamError> {
        match self.mode {
            Mode::Joint => {
                let d = &self.draws[0];
                let chain = i / d.n_kept();
                let it = i % d.n_kept();
                self.layout.unpack(&d.chains[chain].draws[it])
            }
            Mode::Separate => {
                let take = |k: usize| {
                    let d = &self.draws[k];
                    let chain = i / d.n_kept();
                    let it = i % d.n_kept();
                    d.chains[chain].draws[it].clone()
                };
                let o = take(0);
                let m = take(1);
                let e = take(2);
                let f = take(3);
                let dd = take(4);
                let l = take(5);
                let p = &self.layout.p;
                let params = ParameterSet {
                    beta_o: o[..p[0]].to_vec(),
                    beta_m: m[..p[1]].to_vec(),
                    beta_e: e[..p[2]].to_vec(),
                    beta_f: f[..p[3]].to_vec(),
                    beta_d: dd[..p[4]].to_vec(),
                    beta_l: l[..p[5]].to_vec(),
                    alpha_e: [e[p[2]], e[p[2] + 1], e[p[2] + 2]],
                    alpha_f: [f[p[3]], f[p[3] + 1], f[p[3] + 2]],
                    theta: [o[p[0]], m[p[1]], e[p[2] + 3], f[p[3] + 3]],
                    corr: crate::model::params::Corr::identity(),
                };
                params.validate()?;
                Ok(params)
            }
        }
    }

    /// All pooled parameter draws.
    pub fn parameter_draws(&self) -> Result<Vec<ParameterSet>, ParamError> {
        (0..self.n_draws()).map(|i| self.parameter_draw(i)).collect()
    }

    /// Pooled trace of a named parameter, searching all draw blocks.
    pub fn pooled_named(&self, name: &str) -> Option<Vec<f64>> {
        for d in &self.draws {
            if let Some(idx) = d.param_index(name) {
                return Some(d.pooled(idx));
            }
        }
        None
    }
}

/// One row of the coefficient summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub submodel: String,
    pub parameter: String,
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Posterior medians and 95% intervals in the conventional block order,
/// with age slopes back-converted to per-original-unit scale.
pub fn summarize(fit: &PosteriorFit) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let quantiles = |pooled: &[f64]| {
        (
            quantile(pooled, 0.5),
            quantile(pooled, 0.025),
            quantile(pooled, 0.975),
        )
    };
    for (k, s) in Submodel::ALL.iter().enumerate() {
        // ordinal blocks lead with their thresholds
        if matches!(s, Submodel::Evenness | Submodel::Fragmentation) {
            for a in 1..=3 {
                let name = format!("alpha_{}[{a}]", s.tag());
                let pooled = fit.pooled_named(&name).expect("threshold trace");
                let (median, lo, hi) = quantiles(&pooled);
                rows.push(SummaryRow {
                    submodel: s.id().into(),
                    parameter: format!("threshold_{a}"),
                    median,
                    lo,
                    hi,
                });
            }
        }
        for (j, col) in fit.columns[k].iter().enumerate() {
            let name = format!("beta_{}[{}]", s.tag(), j + 1);
            let mut pooled = fit.pooled_named(&name).expect("coefficient trace");
            // per-original-unit back-conversion for the standardized ages
            if col == "age" || col == "partner_age" {
                if let Some((_, sd)) = fit.standardization.get(col) {
                    for v in &mut pooled {
                        *v /= sd;
                    }
                }
            }
            let (median, lo, hi) = quantiles(&pooled);
            rows.push(SummaryRow {
                submodel: s.id().into(),
                parameter: col.clone(),
                median,
                lo,
                hi,
            });
        }
        if fit.mode == Mode::Separate && !matches!(s, Submodel::Det | Submodel::Lbe) {
            let name = format!("theta_{}", s.tag());
            let pooled = fit.pooled_named(&name).expect("scale trace");
            let (median, lo, hi) = quantiles(&pooled);
            rows.push(SummaryRow {
                submodel: s.id().into(),
                parameter: "theta".into(),
                median,
                lo,
                hi,
            });
        }
    }
    if fit.mode == Mode::Joint {
        for k in 1..=N_THETA {
            let pooled = fit.pooled_named(&format!("theta[{k}]")).expect("theta trace");
            let (median, lo, hi) = quantiles(&pooled);
            rows.push(SummaryRow {
                submodel: "latent".into(),
                parameter: format!("theta[{k}]"),
                median,
                lo,
                hi,
            });
        }
        for k in 1..=N_ETA {
            let pooled = fit.pooled_named(&format!("eta[{k}]")).expect("eta trace");
            let (median, lo, hi) = quantiles(&pooled);
            rows.push(SummaryRow {
                submodel: "latent".into(),
                parameter: format!("eta[{k}]"),
                median,
                lo,
                hi,
            });
        }
    }
    rows
}

pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<(), FitError> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    (|| -> std::io::Result<()> {
        writeln!(out, "submodel,parameter,median,lo,hi")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e}",
                r.submodel, r.parameter, r.median, r.lo, r.hi
            )?;
        }
        out.flush()
    })()
    .map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FitMeta {
    version: u32,
    mode: Mode,
    setting: Setting,
    sampler: SamplerConfig,
    layout: Vec<usize>,
    columns: Vec<Vec<String>>,
    standardization: StandardizationParams,
    divergences: usize,
    converged: bool,
    max_rhat: Option<f64>,
    /// Draw-block parameter names, one list per block.
    blocks: Vec<Vec<String>>,
}

impl PosteriorFit {
    /// Persist draws (one CSV matrix, rows chain-major) and a metadata
    /// sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), FitError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = FitMeta {
            version: FIT_FORMAT_VERSION,
            mode: self.mode,
            setting: self.setting,
            sampler: self.draws[0].config,
            layout: self.layout.p.to_vec(),
            columns: self.columns.to_vec(),
            standardization: self.standardization.clone(),
            divergences: self.diagnostics.divergences,
            converged: self.diagnostics.converged,
            max_rhat: self.diagnostics.max_rhat,
            blocks: self.draws.iter().map(|d| d.names.clone()).collect(),
        };
        let meta_path = dir.join("fit.toml");
        let text = toml::to_string_pretty(&meta).map_err(|e| FitError::Artifact {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&meta_path, text).map_err(io_err(&meta_path))?;

        let draws_path = dir.join("draws.csv");
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(&draws_path).map_err(io_err(&draws_path))?);
        (|| -> std::io::Result<()> {
            let header: Vec<String> = self.draws.iter().flat_map(|d| d.names.clone()).collect();
            writeln!(out, "{}", header.join(","))?;
            for chain in 0..self.n_chains() {
                for it in 0..self.n_kept() {
                    let mut fields = Vec::with_capacity(header.len());
                    for d in &self.draws {
                        for v in &d.chains[chain].draws[it] {
                            fields.push(format!("{v:.16e}"));
                        }
                    }
                    writeln!(out, "{}", fields.join(","))?;
                }
            }
            out.flush()
        })()
        .map_err(io_err(&draws_path))?;
        Ok(())
    }

    /// Reload a persisted fit. Sampler stats are not stored, so the
    /// reloaded diagnostics carry only the persisted aggregates.
    pub fn load(dir: impl AsRef<Path>) -> Result<PosteriorFit, FitError> {
        let dir = dir.as_ref();
        let meta_path = dir.join("fit.toml");
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: FitMeta = toml::from_str(&text).map_err(|e| FitError::Artifact {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?;
        if meta.version != FIT_FORMAT_VERSION {
            return Err(FitError::Version {
                found: meta.version,
                expected: FIT_FORMAT_VERSION,
            });
        }
        let draws_path = dir.join("draws.csv");
        let text = std::fs::read_to_string(&draws_path).map_err(io_err(&draws_path))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| FitError::Artifact {
                path: draws_path.display().to_string(),
                message: "empty draws file".into(),
            })?
            .split(',')
            .collect();
        let expected_header: Vec<String> = meta.blocks.iter().flatten().cloned().collect();
        if header != expected_header.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return Err(FitError::Artifact {
                path: draws_path.display().to_string(),
                message: "draws header does not match fit metadata".into(),
            });
        }

        let n_kept = meta.sampler.n_kept();
        let n_chains = meta.sampler.n_chains;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            rows.push(vals.map_err(|e| FitError::Artifact {
                path: draws_path.display().to_string(),
                message: format!("row {}: {e}", i + 2),
            })?);
        }
        if rows.len() != n_kept * n_chains {
            return Err(FitError::Artifact {
                path: draws_path.display().to_string(),
                message: format!(
                    "expected {} draw rows, found {}",
                    n_kept * n_chains,
                    rows.len()
                ),
            });
        }

        let mut draws = Vec::with_capacity(meta.blocks.len());
        let mut offset = 0;
        for names in &meta.blocks {
            let width = names.len();
            let mut chains = Vec::with_capacity(n_chains);
            for chain in 0..n_chains {
                let block_draws: Vec<Vec<f64>> = (0..n_kept)
                    .map(|it| rows[chain * n_kept + it][offset..offset + width].to_vec())
                    .collect();
                chains.push(crate::sampler::ChainDraws {
                    draws: block_draws,
                    stats: Vec::new(),
                    last_position: Vec::new(),
                });
            }
            draws.push(PosteriorDraws {
                names: names.clone(),
                chains,
                config: meta.sampler,
            });
            offset += width;
        }

        let mut rhat = Vec::new();
        for d in &draws {
            rhat.extend(d.rhat_table());
        }
        let layout = ParamLayout {
            p: meta.layout.clone().try_into().map_err(|_| FitError::Artifact {
                path: meta_path.display().to_string(),
                message: "layout must list six design widths".into(),
            })?,
        };
        let columns: [Vec<String>; 6] =
            meta.columns.clone().try_into().map_err(|_| FitError::Artifact {
                path: meta_path.display().to_string(),
                message: "columns must list six label sets".into(),
            })?;
        Ok(PosteriorFit {
            mode: meta.mode,
            setting: meta.setting,
            draws,
            layout,
            columns,
            standardization: meta.standardization,
            diagnostics: FitDiagnostics {
                rhat,
                max_rhat: meta.max_rhat,
                divergences: meta.divergences,
                converged: meta.converged,
                wall_time: Duration::ZERO,
            },
        })
    }
}
