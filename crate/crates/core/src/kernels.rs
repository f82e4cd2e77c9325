//! Composite covariance function: linear term plus an anisotropic
//! exponential (ARD) term plus observation noise on the training diagonal.
//!
//! `k(x_i, x_j) = x_i·x_j + nu * exp(-sum_d gamma_d (x_i^d - x_j^d)^2) + sigma_n^2 * [i == j]`
//!
//! The per-dimension precisions `gamma_d` are what make the fitted model
//! interpretable: a large `gamma_d` means dimension `d` drives the nonlinear
//! part of the fit, `gamma_d = 0` prunes it entirely.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added when a noisy kernel matrix fails to factorize.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// The D+2 kernel hyperparameters: signal scale, per-dimension precisions,
/// and noise standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    nu: f64,
    gamma: Vec<f64>,
    sigma_n: f64,
}

impl HyperParams {
    /// Validates positivity constraints: `nu > 0`, `sigma_n > 0`,
    /// `gamma_d >= 0` (zero is allowed: it prunes the dimension).
    pub fn new(nu: f64, gamma: Vec<f64>, sigma_n: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidHyperParams(format!(
                "nu must be finite and positive, got {nu}"
            )));
        }
        if !(sigma_n.is_finite() && sigma_n > 0.0) {
            return Err(Error::InvalidHyperParams(format!(
                "sigma_n must be finite and positive, got {sigma_n}"
            )));
        }
        if gamma.is_empty() {
            return Err(Error::InvalidHyperParams(
                "gamma must have at least one dimension".to_string(),
            ));
        }
        for (d, &g) in gamma.iter().enumerate() {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::InvalidHyperParams(format!(
                    "gamma[{d}] must be finite and non-negative, got {g}"
                )));
            }
        }
        Ok(Self { nu, gamma, sigma_n })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    /// Noise variance `sigma_n^2`.
    pub fn noise_variance(&self) -> f64 {
        self.sigma_n * self.sigma_n
    }

    /// Number of input dimensions D.
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// A standardized covariate vector of fixed length D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("feature vector must be non-empty".to_string()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "feature vector entries must be finite, got {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_pair(context: &str, x_i: &FeatureVector, x_j: &FeatureVector) -> Result<()> {
    if x_i.len() != x_j.len() {
        return Err(Error::dim(context, x_i.len(), x_j.len()));
    }
    Ok(())
}

fn check_hp(context: &str, x: &FeatureVector, hp: &HyperParams) -> Result<()> {
    if hp.dim() != x.len() {
        return Err(Error::dim(context, x.len(), hp.dim()));
    }
    Ok(())
}

/// Dot product `x_i · x_j`.
pub fn linear_kernel(x_i: &FeatureVector, x_j: &FeatureVector) -> Result<f64> {
    check_pair("linear_kernel", x_i, x_j)?;
    Ok(x_i
        .values()
        .iter()
        .zip(x_j.values())
        .map(|(a, b)| a * b)
        .sum())
}

/// `nu * exp(-sum_d gamma_d (x_i^d - x_j^d)^2)`; always in `(0, nu]`.
pub fn ard_kernel(x_i: &FeatureVector, x_j: &FeatureVector, hp: &HyperParams) -> Result<f64> {
    check_pair("ard_kernel", x_i, x_j)?;
    check_hp("ard_kernel", x_i, hp)?;
    let mut weighted_sq = 0.0;
    for ((a, b), g) in x_i.values().iter().zip(x_j.values()).zip(hp.gamma()) {
        let diff = a - b;
        weighted_sq += g * diff * diff;
    }
    Ok(hp.nu() * (-weighted_sq).exp())
}

/// Full covariance between two points. The noise variance enters only when
/// the two points are the same training point (`same_index`), never across
/// train/test.
pub fn composite_kernel(
    x_i: &FeatureVector,
    x_j: &FeatureVector,
    hp: &HyperParams,
    same_index: bool,
) -> Result<f64> {
    let lin = linear_kernel(x_i, x_j)?;
    let ard = ard_kernel(x_i, x_j, hp)?;
    let noise = if same_index { hp.noise_variance() } else { 0.0 };
    Ok(lin + ard + noise)
}

/// N x N covariance matrix over a training set. With `with_noise` the
/// diagonal carries `sigma_n^2`, which makes the matrix positive definite.
/// The result is exactly symmetric: the lower triangle is mirrored.
pub fn kernel_matrix(x: &[FeatureVector], hp: &HyperParams, with_noise: bool) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Data("kernel matrix needs at least one point".to_string()));
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = composite_kernel(&x[i], &x[j], hp, with_noise && i == j)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Covariances between a test point and every training point (no noise term).
pub fn cross_kernel_vector(
    x_star: &FeatureVector,
    x: &[FeatureVector],
    hp: &HyperParams,
) -> Result<DVector<f64>> {
    let mut k_star = DVector::<f64>::zeros(x.len());
    for (n, x_n) in x.iter().enumerate() {
        k_star[n] = composite_kernel(x_star, x_n, hp, false)?;
    }
    Ok(k_star)
}
