//! Stochastic variational inference for fully-connected Bayesian neural
//! networks with self-stabilising priors, plus fixed-Gaussian and Empirical
//! Bayes baselines, reparametrisation and local-reparametrisation gradient
//! estimators, and an analytic/empirical signal-propagation laboratory.

pub mod bnn;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradengine;
pub mod metrics;
pub mod numerics;
pub mod priors;
pub mod signalprop;
pub mod train;

pub use error::{Error, Result};
