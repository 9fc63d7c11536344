//! The joint model: parameters, latent covariance, likelihood terms,
//! and the full and per-submodel log-posteriors with gradients.

pub mod covariance;
pub mod joint;
pub mod loglik;
pub mod params;
pub mod separate;
