//! Analytic moment propagation through ReLU layers and empirical per-layer
//! variance probes.
//!
//! The analytic side treats each unit's incoming weights as one aggregate
//! Gaussian scalar S ~ N(mu_tilde, var_tilde) applied to the activation, so
//! the pre-activation moments close over (tau, nu) of the incoming signal.

use serde::{Deserialize, Serialize};

use crate::bnn::{effective_posterior, ForwardRecord, Network};
use crate::distributions::layer_stats;
use crate::error::Result;
use crate::numerics::{Rng, Vector};

const INV_PI: f64 = 1.0 / std::f64::consts::PI;

/// Mean and variance of the signal entering a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentState {
    pub tau: f64,
    pub nu: f64,
}

impl MomentState {
    pub fn new(tau: f64, nu: f64) -> Self {
        assert!(nu >= 0.0, "signal variance must be nonnegative");
        MomentState { tau, nu }
    }
}

/// Aggregate weight and bias statistics of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMomentParams {
    pub mu_tilde: f64,
    pub var_tilde: f64,
    pub mu_b: f64,
    pub var_b: f64,
}

impl LayerMomentParams {
    pub fn new(mu_tilde: f64, var_tilde: f64, mu_b: f64, var_b: f64) -> Self {
        assert!(var_tilde >= 0.0 && var_b >= 0.0, "variances must be nonnegative");
        LayerMomentParams {
            mu_tilde,
            var_tilde,
            mu_b,
            var_b,
        }
    }
}

/// One probe: per-layer empirical pre-activation variance with the matching
/// analytic prediction and degenerate-unit counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub empirical_var: Vec<f64>,
    pub analytic_var: Vec<f64>,
    pub flagged_units: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SignalTrace {
    pub entries: Vec<TraceEntry>,
}

impl SignalTrace {
    pub fn new() -> Self {
        SignalTrace::default()
    }

    pub fn push(&mut self, entry: TraceEntry) {
        assert_eq!(entry.empirical_var.len(), entry.analytic_var.len());
        assert_eq!(entry.empirical_var.len(), entry.flagged_units.len());
        if let Some(last) = self.entries.last() {
            assert!(entry.step >= last.step, "steps must be monotone");
        }
        self.entries.push(entry);
    }

    /// CSV with one row per (step, layer).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,empirical_var,analytic_var,flagged_units\n");
        for e in &self.entries {
            for (l, ((emp, ana), flag)) in e
                .empirical_var
                .iter()
                .zip(&e.analytic_var)
                .zip(&e.flagged_units)
                .enumerate()
            {
                out.push_str(&format!("{},{},{},{},{}\n", e.step, l + 1, emp, ana, flag));
            }
        }
        out
    }
}

/// Second moment of a ReLU pre-activation:
/// (mu~^2 + var~) * [tau^2/2 + 2 tau sqrt(nu)/sqrt(2 pi) + nu/2] + mu_b^2 + var_b.
pub fn second_moment(state: &MomentState, p: &LayerMomentParams) -> f64 {
    let relu_m2 = state.tau * state.tau / 2.0
        + 2.0 * state.tau * state.nu.sqrt() / (2.0 * std::f64::consts::PI).sqrt()
        + state.nu / 2.0;
    (p.mu_tilde * p.mu_tilde + p.var_tilde) * relu_m2 + p.mu_b * p.mu_b + p.var_b
}

/// Mean of a ReLU pre-activation: mu~ * (tau/2 + sqrt(nu/(2 pi))) + mu_b.
pub fn mean_prop(state: &MomentState, p: &LayerMomentParams) -> f64 {
    p.mu_tilde * (state.tau / 2.0 + (state.nu / (2.0 * std::f64::consts::PI)).sqrt()) + p.mu_b
}

/// Full pre-activation variance:
/// mu~^2 [tau^2/4 + tau sqrt(nu/(2pi)) + (1-1/pi) nu/2]
/// + var~ [tau^2/2 + 2 tau sqrt(nu/(2pi)) + nu/2] + var_b.
pub fn variance_prop_full(state: &MomentState, p: &LayerMomentParams) -> f64 {
    let s = (state.nu / (2.0 * std::f64::consts::PI)).sqrt();
    let mean_part = state.tau * state.tau / 4.0 + state.tau * s + (1.0 - INV_PI) * state.nu / 2.0;
    let var_part = state.tau * state.tau / 2.0 + 2.0 * state.tau * s + state.nu / 2.0;
    p.mu_tilde * p.mu_tilde * mean_part + p.var_tilde * var_part + p.var_b
}

/// Zero-mean-signal variance recursion:
/// nu_l = [(1-1/pi) mu~^2 + var~] * nu_prev / 2.
pub fn variance_recursion(nu_prev: f64, mu_tilde: f64, var_tilde: f64) -> f64 {
    assert!(nu_prev >= 0.0);
    chi(mu_tilde, var_tilde) * nu_prev
}

/// The per-layer multiplicative variance growth factor.
pub fn chi(mu_tilde: f64, var_tilde: f64) -> f64 {
    ((1.0 - INV_PI) * mu_tilde * mu_tilde + var_tilde) / 2.0
}

/// Analytic variance profile nu^1..nu^L from base case
/// nu^0 = x0.x0 / D0, using each layer's effective-posterior layer
/// statistics with the per-unit recursion factor averaged over units.
pub fn depth_profile(net: &Network, x0: &Vector) -> Result<Vec<f64>> {
    let snapshot = net.prior_snapshot()?;
    let mut nu = x0.dot(x0) / x0.len() as f64;
    let mut profile = Vec::with_capacity(net.depth());
    for (layer, prior) in net.layers.iter().zip(&snapshot.layers) {
        let q = layer.posterior();
        let qt = effective_posterior(&q, &net.prior, prior)?;
        let stats = layer_stats(&qt);
        let mean_chi = (0..qt.cols())
            .map(|j| chi(stats.mu_sum[j], stats.var_sum[j]))
            .sum::<f64>()
            / qt.cols() as f64;
        nu *= mean_chi;
        profile.push(nu);
    }
    Ok(profile)
}

/// Per-layer population variance of the pre-activation components.
pub fn empirical_probe(record: &ForwardRecord) -> Vec<f64> {
    record
        .pre_activations
        .iter()
        .map(|h| {
            let n = h.len() as f64;
            let mean = h.data().iter().sum::<f64>() / n;
            h.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .collect()
}

/// Monte Carlo estimates of the pre-activation moments under the aggregate
/// half-range model h = S * x + B with S ~ N(mu~, var~), B ~ N(mu_b, var_b)
/// and x = (tau + sqrt(nu) z) for z > 0, else 0. This is exactly the model
/// whose moments the closed forms integrate; the cross term between S and B
/// is not part of the closed-form second moment, so comparisons of that
/// moment require mu~ * mu_b = 0.
#[derive(Debug, Clone, Copy)]
pub struct McMoments {
    pub mean: f64,
    pub variance: f64,
    pub second: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    pub se_second: f64,
}

pub fn mc_moments(
    state: &MomentState,
    p: &LayerMomentParams,
    n_samples: usize,
    rng: &mut Rng,
) -> McMoments {
    assert!(n_samples >= 2);
    let sigma_s = p.var_tilde.sqrt();
    let sigma_b = p.var_b.sqrt();
    let sqrt_nu = state.nu.sqrt();
    let mut draws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let s = p.mu_tilde + sigma_s * rng.next_normal();
        let z = rng.next_normal();
        let x = if z > 0.0 { state.tau + sqrt_nu * z } else { 0.0 };
        let b = p.mu_b + sigma_b * rng.next_normal();
        draws.push(s * x + b);
    }
    let n = n_samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let second = draws.iter().map(|h| h * h).sum::<f64>() / n;
    let m2 = draws.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    let m4 = draws.iter().map(|h| (h - mean).powi(4)).sum::<f64>() / n;
    let fourth_raw = draws.iter().map(|h| h.powi(4)).sum::<f64>() / n;
    McMoments {
        mean,
        variance: m2,
        second,
        se_mean: (m2 / n).sqrt(),
        se_variance: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        se_second: ((fourth_raw - second * second).max(0.0) / n).sqrt(),
    }
}
