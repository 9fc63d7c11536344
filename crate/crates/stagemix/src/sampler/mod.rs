//! Gradient-based MCMC over an unconstrained parameterization:
//! multi-chain no-U-turn sampling with warm-up adaptation, plus
//! convergence diagnostics and trace export.

mod diagnostics;
mod nuts;

pub use diagnostics::{export_traces, rhat};
pub use nuts::{TransitionStats, MAX_ENERGY_ERROR};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, StreamLabel};

/// A differentiable log-density over an unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log-density and gradient at `x`. A non-finite value is treated as
    /// a rejected region, not an error.
    fn logp_grad_raw(&self, x: &[f64], grad: &mut [f64]) -> TargetEval;

    /// Constrained values of the reported parameters at `x`.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    /// Names of the reported parameters, aligned with `constrain`.
    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x[{i}]")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TargetEval {
    pub value: f64,
    pub clamped: bool,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no finite initialization point found in 100 attempts")]
    InitFailed,
    #[error("every warm-up transition diverged")]
    AllDivergentWarmup,
    #[error("step-size search diverged; posterior appears improper")]
    ImproperPosterior,
    #[error("no acceptably small step size could be found")]
    NoStepSize,
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multi-chain sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Total iterations per chain, warm-up included.
    pub n_iterations: usize,
    pub n_warmup: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> SamplerConfig {
        SamplerConfig {
            n_chains: 3,
            n_iterations: 2000,
            n_warmup: 1000,
            seed: 0,
            target_accept: 0.8,
            max_tree_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains < 2 {
            return Err(SamplerError::Config(
                "need at least 2 chains for the convergence diagnostic".into(),
            ));
        }
        if self.n_warmup >= self.n_iterations {
            return Err(SamplerError::Config(
                "n_warmup must be smaller than n_iterations".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config("target_accept must be in (0, 1)".into()));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 14 {
            return Err(SamplerError::Config("max_tree_depth must be in 1..=14".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(SamplerError::Config(
                "seed must fit in 63 bits so it survives metadata round-trips".into(),
            ));
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.n_iterations - self.n_warmup
    }
}

/// Post-warm-up stats of one kept draw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DrawStats {
    pub accept_prob: f64,
    pub divergent: bool,
    pub step_size: f64,
    pub tree_depth: usize,
    pub energy: f64,
    pub clamped: bool,
}

/// One chain's kept draws on the constrained reported scale.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    /// Final unconstrained state, useful for debugging restarts.
    pub last_position: Vec<f64>,
}

/// Draws from all chains plus the telemetry the fit layer reports.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    pub config: SamplerConfig,
}

impl PosteriorDraws {
    pub fn n_kept(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Trace of one parameter in one chain.
    pub fn chain_trace(&self, chain: usize, param: usize) -> Vec<f64> {
        self.chains[chain].draws.iter().map(|d| d[param]).collect()
    }

    /// All chains pooled, chain-major order.
    pub fn pooled(&self, param: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(move |d| d[param]))
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| c.stats.iter())
            .filter(|s| s.divergent)
            .count()
    }

    pub fn any_clamped(&self) -> bool {
        self.chains
            .iter()
            .flat_map(|c| c.stats.iter())
            .any(|s| s.clamped)
    }

    /// Potential scale reduction per parameter (None where undefined).
    pub fn rhat_table(&self) -> Vec<(String, Option<f64>)> {
        (0..self.n_params())
            .map(|p| {
                let traces: Vec<Vec<f64>> = (0..self.chains.len())
                    .map(|c| self.chain_trace(c, p))
                    .collect();
                (self.names[p].clone(), rhat(&traces))
            })
            .collect()
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat_table()
            .iter()
            .map(|(_, r)| *r)
            .collect::<Option<Vec<f64>>>()
            .map(|rs| rs.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Run independent chains (in parallel) and collect the kept draws.
pub fn run_chains<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    run_chains_with_parallelism(target, config, true)
}

/// As `run_chains`, optionally forcing serial chain execution. Results
/// are identical either way; the toggle exists to demonstrate that.
pub fn run_chains_with_parallelism<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    parallel: bool,
) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let n_chains = config.n_chains;
    let mut results: Vec<Option<Result<ChainDraws, SamplerError>>> =
        (0..n_chains).map(|_| None).collect();

    if parallel {
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(n_chains);
            for chain in 0..n_chains {
                handles.push(scope.spawn(move || run_single_chain(target, config, chain)));
            }
            for (chain, h) in handles.into_iter().enumerate() {
                results[chain] = Some(h.join().expect("chain thread panicked"));
            }
        });
    } else {
        for (chain, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_single_chain(target, config, chain));
        }
    }

    let chains = results
        .into_iter()
        .map(|r| r.expect("chain result missing"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws {
        names: target.param_names(),
        chains,
        config: *config,
    })
}

fn run_single_chain<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws, SamplerError> {
    let rng = substream(config.seed, StreamLabel::Chain, chain as u64);
    let mut nuts = nuts::NutsChain::init(target, rng, config.max_tree_depth)?;
    nuts.warmup(config.n_warmup, config.target_accept)?;
    let n_kept = config.n_kept();
    let mut draws = Vec::with_capacity(n_kept);
    let mut stats = Vec::with_capacity(n_kept);
    for _ in 0..n_kept {
        let s = nuts.transition();
        draws.push(target.constrain(nuts.position()));
        stats.push(DrawStats {
            accept_prob: s.accept_prob,
            divergent: s.divergent,
            step_size: nuts.step_size(),
            tree_depth: s.tree_depth,
            energy: s.energy,
            clamped: s.clamped,
        });
    }
    Ok(ChainDraws {
        draws,
        stats,
        last_position: nuts.position().to_vec(),
    })
}
