//! Diagonal Gaussian containers over weight matrices: the Gaussian pdf
//! product, closed-form KL divergence, reparametrised sampling and
//! per-unit layer statistics.
//!
//! A prior may carry one standard deviation per output unit j. Such a prior
//! is represented as a `GaussianMatrix` whose `sigma` has a single row,
//! broadcast across the incoming index i.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Lower bound on any stored standard deviation, keeping the KL and the
/// product formulas away from singularities.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Per-weight means and standard deviations of a diagonal Gaussian over
/// one layer's weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMatrix {
    pub mu: Matrix,
    pub sigma: Matrix,
}

impl GaussianMatrix {
    pub fn new(mu: Matrix, sigma: Matrix) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape("GaussianMatrix::new", mu.shape(), sigma.shape()));
        }
        if !sigma.data().iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::NonPositiveSigma {
                context: "GaussianMatrix::new",
            });
        }
        Ok(GaussianMatrix { mu, sigma })
    }

    /// Prior with per-weight means and one sigma per output unit j,
    /// stored as a single broadcast row.
    pub fn with_unit_sigma(mu: Matrix, sigma_unit: &Vector) -> Result<Self> {
        if mu.cols() != sigma_unit.len() {
            return Err(Error::shape(
                "GaussianMatrix::with_unit_sigma",
                mu.shape(),
                (1, sigma_unit.len()),
            ));
        }
        if !sigma_unit.data().iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::NonPositiveSigma {
                context: "GaussianMatrix::with_unit_sigma",
            });
        }
        Ok(GaussianMatrix {
            mu,
            sigma: sigma_unit.as_row_matrix(),
        })
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn cols(&self) -> usize {
        self.mu.cols()
    }

    /// Sigma for weight (i, j), honouring a broadcast single-row sigma.
    #[inline]
    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        if self.sigma.rows() == 1 {
            self.sigma.get(0, j)
        } else {
            self.sigma.get(i, j)
        }
    }

    fn check_compatible(&self, other: &GaussianMatrix, op: &'static str) -> Result<()> {
        if self.mu.shape() != other.mu.shape() {
            return Err(Error::shape(op, self.mu.shape(), other.mu.shape()));
        }
        Ok(())
    }
}

/// Per-output-unit sums of a layer posterior: mu_sum[j] = sum_i mu_ij and
/// var_sum[j] = sum_i sigma_ij^2.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mu_sum: Vector,
    pub var_sum: Vector,
}

/// Normalised product of two diagonal Gaussians, elementwise. `p.sigma`
/// may be a broadcast row (one sigma per output unit).
pub fn gaussian_product(q: &GaussianMatrix, p: &GaussianMatrix) -> Result<GaussianMatrix> {
    q.check_compatible(p, "gaussian_product")?;
    let (rows, cols) = q.mu.shape();
    let mut mu = Matrix::zeros(rows, cols);
    let mut sigma = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let (mq, sq) = (q.mu.get(i, j), q.sigma_at(i, j));
            let (mp, sp) = (p.mu.get(i, j), p.sigma_at(i, j));
            if sq <= 0.0 || sp <= 0.0 {
                return Err(Error::NonPositiveSigma {
                    context: "gaussian_product",
                });
            }
            let (vq, vp) = (sq * sq, sp * sp);
            mu.set(i, j, (mq * vp + mp * vq) / (vp + vq));
            sigma.set(i, j, (vp * vq / (vp + vq)).sqrt());
        }
    }
    GaussianMatrix::new(mu, sigma)
}

/// Closed-form KL(q || p) for diagonal Gaussians, summed over all weights.
pub fn kl_diag_gaussian(q: &GaussianMatrix, p: &GaussianMatrix) -> Result<f64> {
    q.check_compatible(p, "kl_diag_gaussian")?;
    let (rows, cols) = q.mu.shape();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let (mq, sq) = (q.mu.get(i, j), q.sigma_at(i, j));
            let (mp, sp) = (p.mu.get(i, j), p.sigma_at(i, j));
            if sq <= 0.0 || sp <= 0.0 {
                return Err(Error::NonPositiveSigma {
                    context: "kl_diag_gaussian",
                });
            }
            let d = mq - mp;
            total += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
        }
    }
    Ok(total)
}

/// Elementwise mu + sigma * eps.
pub fn sample_reparam(g: &GaussianMatrix, eps: &Matrix) -> Result<Matrix> {
    if g.mu.shape() != eps.shape() {
        return Err(Error::shape("sample_reparam", g.mu.shape(), eps.shape()));
    }
    let (rows, cols) = g.mu.shape();
    Ok(Matrix::from_fn(rows, cols, |i, j| {
        g.mu.get(i, j) + g.sigma_at(i, j) * eps.get(i, j)
    }))
}

/// Column sums of means and of variances: the statistics of
/// sum_i w_ij per output unit j.
pub fn layer_stats(q: &GaussianMatrix) -> LayerStats {
    let (rows, cols) = q.mu.shape();
    let mut mu_sum = Vector::zeros(cols);
    let mut var_sum = Vector::zeros(cols);
    for i in 0..rows {
        for j in 0..cols {
            mu_sum[j] += q.mu.get(i, j);
            let s = q.sigma_at(i, j);
            var_sum[j] += s * s;
        }
    }
    LayerStats { mu_sum, var_sum }
}
