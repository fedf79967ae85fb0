//! Prior strategies: fixed Gaussian, per-step Empirical Bayes, the
//! self-stabilising prior recomputed from the current posterior, and a
//! combined regularising + stabilising prior.

use serde::{Deserialize, Serialize};

use crate::distributions::{layer_stats, GaussianMatrix};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Threshold below which the stabilising denominator is clamped
/// (sign-preserving) and the unit flagged.
pub const DENOM_CLAMP: f64 = 1e-10;

/// Which prior governs a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorStrategy {
    /// N(mu0, var0) per weight, acting only through the KL term.
    FixedGaussian { mu0: f64, var0: f64 },
    /// Tied per-layer scalar prior refreshed every gradient step by
    /// KL-minimising moment matching.
    EmpiricalBayes,
    /// Prior parameters recomputed from the posterior before every forward
    /// pass so the product posterior preserves pre-activation variance.
    SelfStabilising,
    /// Log-variance interpolation between the stabilising parameters and a
    /// fixed Gaussian part.
    Combined { lambda: f64, mu0: f64, var0: f64 },
}

impl PriorStrategy {
    /// True for strategies whose prior enters the forward pass through the
    /// product posterior.
    pub fn influences_forward(&self) -> bool {
        matches!(
            self,
            PriorStrategy::SelfStabilising | PriorStrategy::Combined { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorStrategy::FixedGaussian { var0, .. } => {
                if var0 <= 0.0 {
                    return Err(Error::Config {
                        field: "prior.var0".into(),
                        reason: "must be positive".into(),
                    });
                }
            }
            PriorStrategy::Combined { lambda, var0, .. } => {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::Config {
                        field: "prior.lambda".into(),
                        reason: "must lie in [0, 1]".into(),
                    });
                }
                if var0 <= 0.0 {
                    return Err(Error::Config {
                        field: "prior.var0".into(),
                        reason: "must be positive".into(),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Prior parameters for one layer: per-weight means and one standard
/// deviation per output unit j (broadcast over the incoming index i).
#[derive(Debug, Clone)]
pub struct PriorLayerParams {
    pub mu_p: Matrix,
    pub sigma_p_unit: Vector,
    /// Units whose stabilising denominator had to be clamped.
    pub flagged: Vec<bool>,
}

impl PriorLayerParams {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    pub fn to_gaussian(&self) -> Result<GaussianMatrix> {
        GaussianMatrix::with_unit_sigma(self.mu_p.clone(), &self.sigma_p_unit)
    }
}

/// Stabilising prior parameters computed from the current posterior.
///
/// Per output unit j with layer statistics mu_j = sum_i mu_ij and
/// v_j = sum_i sigma_ij^2:
///   gamma_j = |2 - (1 - 1/pi) mu_j^2|
///   V_j     = |v_j gamma_j / (v_j - gamma_j)|     (layer-level prior variance)
/// and the per-weight prior variance is V_j / fan_in. The prior mean copies
/// the posterior mean, so the product posterior keeps the posterior means
/// and its layer variance lands on gamma_j whenever v_j > gamma_j.
pub fn stabilising_params(q: &GaussianMatrix) -> PriorLayerParams {
    let fan_in = q.rows() as f64;
    let stats = layer_stats(q);
    let units = q.cols();
    let mut sigma_p_unit = Vector::zeros(units);
    let mut flagged = vec![false; units];
    let one_minus_inv_pi = 1.0 - 1.0 / std::f64::consts::PI;
    for j in 0..units {
        let mu_j = stats.mu_sum[j];
        let v_j = stats.var_sum[j];
        let gamma = (2.0 - one_minus_inv_pi * mu_j * mu_j).abs();
        let mut denom = v_j - gamma;
        if denom.abs() < DENOM_CLAMP {
            denom = if denom < 0.0 { -DENOM_CLAMP } else { DENOM_CLAMP };
            flagged[j] = true;
        }
        let layer_prior_var = (v_j * gamma / denom).abs().max(f64::MIN_POSITIVE);
        sigma_p_unit[j] = (layer_prior_var / fan_in).sqrt();
    }
    PriorLayerParams {
        mu_p: q.mu.clone(),
        sigma_p_unit,
        flagged,
    }
}

/// Tied scalar prior per layer minimising KL(q || p):
/// mu_p = mean of all posterior means, var_p = mean of
/// sigma^2 + (mu - mu_p)^2 over all weights.
pub fn empirical_bayes_update(q: &GaussianMatrix) -> (f64, f64) {
    let n = (q.rows() * q.cols()) as f64;
    let mu_p = q.mu.sum() / n;
    let mut var_p = 0.0;
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            let d = q.mu.get(i, j) - mu_p;
            let s = q.sigma_at(i, j);
            var_p += s * s + d * d;
        }
    }
    (mu_p, var_p / n)
}

/// Interpolates between stabilising and fixed prior parameters: means
/// linearly, variances in log space (so the result stays positive for all
/// lambda). `var0` is the fixed part's per-weight variance.
pub fn combined_params(
    stab: &PriorLayerParams,
    mu0: f64,
    var0: f64,
    lambda: f64,
) -> Result<PriorLayerParams> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config {
            field: "prior.lambda".into(),
            reason: format!("value {lambda} outside [0, 1]"),
        });
    }
    if var0 <= 0.0 {
        return Err(Error::Config {
            field: "prior.var0".into(),
            reason: "must be positive".into(),
        });
    }
    let mu_p = stab.mu_p.map(|m| lambda * m + (1.0 - lambda) * mu0);
    let sigma_p_unit = Vector::from_fn(stab.sigma_p_unit.len(), |j| {
        let v_stab = stab.sigma_p_unit[j] * stab.sigma_p_unit[j];
        (lambda * v_stab.ln() + (1.0 - lambda) * var0.ln()).exp().sqrt()
    });
    Ok(PriorLayerParams {
        mu_p,
        sigma_p_unit,
        flagged: stab.flagged.clone(),
    })
}

/// Fixed Gaussian prior materialised for a layer shape.
pub fn fixed_params(rows: usize, cols: usize, mu0: f64, var0: f64) -> PriorLayerParams {
    PriorLayerParams {
        mu_p: Matrix::filled(rows, cols, mu0),
        sigma_p_unit: Vector::from_fn(cols, |_| var0.sqrt()),
        flagged: vec![false; cols],
    }
}
