//! Joint Bayesian modelling of mixed, multilevel, sequential treatment
//! outcomes, with a gradient-based MCMC sampler, a forward cohort
//! simulator, sequential posterior-predictive simulation, and an
//! evaluation harness.

pub mod data;
pub mod math;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod cascade;
pub mod synth;
pub mod fits;
pub mod predict;
pub mod evaluate;
