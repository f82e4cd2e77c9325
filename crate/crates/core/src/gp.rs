//! Exact GP regression on top of the composite kernel.
//!
//! Everything goes through one Cholesky factorization of the noisy training
//! covariance: the weight vector `alpha = (K + sigma_n^2 I)^-1 y`, the
//! predictive mean `k_*' alpha`, the predictive variance via a triangular
//! solve, and the log marginal likelihood via the factor's log-determinant.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{
    composite_kernel, cross_kernel_vector, kernel_matrix, FeatureVector, HyperParams,
    DEFAULT_JITTER,
};

/// Computed variances below this are considered bugs rather than roundoff.
const VARIANCE_FLOOR: f64 = -1e-10;

/// An immutable fitted model: training data, hyperparameters, the lower
/// Cholesky factor of the noisy kernel matrix, and the weight vector.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    x_train: Vec<FeatureVector>,
    y_train: DVector<f64>,
    hp: HyperParams,
    chol_lower: DMatrix<f64>,
    alpha: DVector<f64>,
}

/// Posterior mean and variance at a single test input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Cholesky with a single jitter retry. `sigma_n^2` on the diagonal makes
/// failure rare; near-singular settings explored by the optimizer can still
/// need the extra nudge.
fn cholesky_with_jitter(k: DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if let Some(chol) = k.clone().cholesky() {
        return Ok(chol.unpack());
    }
    let mut kj = k;
    for i in 0..n {
        kj[(i, i)] += jitter;
    }
    match kj.cholesky() {
        Some(chol) => Ok(chol.unpack()),
        None => Err(Error::IllConditionedKernel),
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("Cholesky factor has strictly positive diagonal")
}

fn solve_upper_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.transpose()
        .solve_upper_triangular(b)
        .expect("Cholesky factor has strictly positive diagonal")
}

fn check_inputs(x: &[FeatureVector], y: &[f64], hp: &HyperParams) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Data("training set must be non-empty".to_string()));
    }
    if x.len() != y.len() {
        return Err(Error::dim("fit: targets vs inputs", x.len(), y.len()));
    }
    let d = x[0].len();
    for (i, xi) in x.iter().enumerate() {
        if xi.len() != d {
            return Err(Error::dim(&format!("fit: input row {i}"), d, xi.len()));
        }
    }
    if hp.dim() != d {
        return Err(Error::dim("fit: hyperparameters vs inputs", d, hp.dim()));
    }
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("targets must be finite, got {bad}")));
    }
    Ok(())
}

/// Fit with an explicit jitter value; see [`fit`].
pub fn fit_with_jitter(
    x: &[FeatureVector],
    y: &[f64],
    hp: &HyperParams,
    jitter: f64,
) -> Result<TrainedModel> {
    check_inputs(x, y, hp)?;
    let k = kernel_matrix(x, hp, true)?;
    let l = cholesky_with_jitter(k, jitter)?;
    let y_vec = DVector::from_column_slice(y);
    let alpha = solve_upper_transpose(&l, &solve_lower(&l, &y_vec));
    Ok(TrainedModel {
        x_train: x.to_vec(),
        y_train: y_vec,
        hp: hp.clone(),
        chol_lower: l,
        alpha,
    })
}

/// Factorize the noisy training covariance and precompute the weights.
/// Deterministic: identical inputs give bitwise-identical models.
pub fn fit(x: &[FeatureVector], y: &[f64], hp: &HyperParams) -> Result<TrainedModel> {
    fit_with_jitter(x, y, hp, DEFAULT_JITTER)
}

/// Log marginal likelihood of the data under the model:
/// `-1/2 y'(K+sigma_n^2 I)^-1 y - 1/2 log det(K+sigma_n^2 I) - N/2 log 2pi`.
pub fn log_marginal_likelihood(x: &[FeatureVector], y: &[f64], hp: &HyperParams) -> Result<f64> {
    let model = fit(x, y, hp)?;
    Ok(model.lml())
}

impl TrainedModel {
    pub fn x_train(&self) -> &[FeatureVector] {
        &self.x_train
    }

    pub fn y_train(&self) -> &[f64] {
        self.y_train.as_slice()
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    pub fn n_train(&self) -> usize {
        self.x_train.len()
    }

    /// Posterior mean `k_*' alpha` and variance
    /// `k(x_*, x_*) + sigma_n^2 - ||L^-1 k_*||^2` at a test input.
    pub fn predict(&self, x_star: &FeatureVector) -> Result<Prediction> {
        if x_star.len() != self.hp.dim() {
            return Err(Error::dim("predict", self.hp.dim(), x_star.len()));
        }
        let k_star = cross_kernel_vector(x_star, &self.x_train, &self.hp)?;
        let mean = k_star.dot(&self.alpha);
        let v = solve_lower(&self.chol_lower, &k_star);
        let prior = composite_kernel(x_star, x_star, &self.hp, false)?;
        let variance = prior + self.hp.noise_variance() - v.norm_squared();
        if variance < VARIANCE_FLOOR {
            return Err(Error::Data(format!(
                "negative predictive variance {variance}; kernel matrix is inconsistent"
            )));
        }
        Ok(Prediction {
            mean,
            variance: variance.max(0.0),
        })
    }

    /// Log marginal likelihood of the training data under this model.
    /// `log det` comes from the factor: `2 * sum_i log L_ii`.
    pub fn lml(&self) -> f64 {
        let n = self.n_train() as f64;
        let data_fit = -0.5 * self.y_train.dot(&self.alpha);
        let log_det: f64 = (0..self.n_train())
            .map(|i| self.chol_lower[(i, i)].ln())
            .sum::<f64>()
            * 2.0;
        data_fit - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Convenience: posterior mean/variance without holding on to the model.
pub fn predict(model: &TrainedModel, x_star: &FeatureVector) -> Result<Prediction> {
    model.predict(x_star)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn hp(nu: f64, gamma: &[f64], sigma_n: f64) -> HyperParams {
        HyperParams::new(nu, gamma.to_vec(), sigma_n).unwrap()
    }

    #[test]
    fn scalar_solve() {
        // x=[0], nu=1, sigma_n=1: K + sigma^2 = 0 + 1 + 1 = 2; y=4 => alpha=2
        let model = fit(&[fv(&[0.0])], &[4.0], &hp(1.0, &[1.0], 1.0)).unwrap();
        assert!((model.alpha()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn factor_is_lower_triangular_with_positive_diagonal() {
        let x = vec![fv(&[0.3, 1.0]), fv(&[-0.2, 0.4]), fv(&[1.5, -1.1])];
        let model = fit(&x, &[1.0, -0.5, 2.0], &hp(0.7, &[0.5, 2.0], 0.4)).unwrap();
        let l = model.chol_lower();
        for i in 0..3 {
            assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..3 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn model_invariants_reconstruct() {
        let x = vec![fv(&[0.3, 1.0]), fv(&[-0.2, 0.4]), fv(&[1.5, -1.1]), fv(&[0.0, 0.0])];
        let y = [1.0, -0.5, 2.0, 0.3];
        let h = hp(0.7, &[0.5, 2.0], 0.4);
        let model = fit(&x, &y, &h).unwrap();
        let k = kernel_matrix(&x, &h, true).unwrap();
        let rebuilt = model.chol_lower() * model.chol_lower().transpose();
        for i in 0..4 {
            for j in 0..4 {
                assert!((rebuilt[(i, j)] - k[(i, j)]).abs() < 1e-8);
            }
        }
        let y_back = &k * DVector::from_column_slice(model.alpha());
        for i in 0..4 {
            assert!((y_back[i] - y[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_posterior_closed_form() {
        // N=1: mean = k_* y1 / (k11 + sigma^2)
        let x = [fv(&[0.5])];
        let h = hp(1.3, &[0.8], 0.6);
        let y = [2.4];
        let model = fit(&x, &y, &h).unwrap();
        let star = fv(&[0.9]);
        let k_star = composite_kernel(&star, &x[0], &h, false).unwrap();
        let k11 = composite_kernel(&x[0], &x[0], &h, true).unwrap();
        let pred = model.predict(&star).unwrap();
        assert!((pred.mean - k_star * y[0] / k11).abs() < 1e-14);
        let prior = composite_kernel(&star, &star, &h, false).unwrap();
        let expect_var = prior + h.noise_variance() - k_star * k_star / k11;
        assert!((pred.variance - expect_var).abs() < 1e-14);
    }

    #[test]
    fn interpolation_limit_at_small_noise() {
        let x = vec![fv(&[0.0]), fv(&[1.0]), fv(&[2.5])];
        let y = [0.3, -1.2, 0.8];
        let model = fit(&x, &y, &hp(1.0, &[1.0], 1e-6)).unwrap();
        for (xi, yi) in x.iter().zip(y.iter()) {
            let pred = model.predict(xi).unwrap();
            assert!((pred.mean - yi).abs() < 1e-4);
        }
    }

    #[test]
    fn lml_zero_targets_is_pure_complexity_term() {
        let x = vec![fv(&[0.1]), fv(&[0.7])];
        let h = hp(1.0, &[1.0], 0.5);
        let model = fit(&x, &[0.0, 0.0], &h).unwrap();
        let k = kernel_matrix(&x, &h, true).unwrap();
        let det = k[(0, 0)] * k[(1, 1)] - k[(0, 1)] * k[(1, 0)];
        let expect = -0.5 * det.ln() - (2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert!((model.lml() - expect).abs() < 1e-12);
    }

    #[test]
    fn lml_scalar_closed_form() {
        // k11 + sigma^2 = 2, y = 1:
        // -1/2 * 1/2 - 1/2 log 2 - 1/2 log 2pi
        let lml = log_marginal_likelihood(&[fv(&[0.0])], &[1.0], &hp(1.0, &[1.0], 1.0)).unwrap();
        let expect = -0.25 - 0.5 * 2.0f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expect).abs() < 1e-12);
        assert!((lml - (-1.5155)).abs() < 1e-4);
    }

    #[test]
    fn variance_never_increases_with_more_data() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = 2;
            let n = rng.gen_range(2..6);
            let x: Vec<FeatureVector> = (0..n + 1)
                .map(|_| fv(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
                .collect();
            let y: Vec<f64> = (0..n + 1).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
            let h = hp(rng.gen_range(0.2..2.0), &gamma, rng.gen_range(0.1..1.0));
            let star = fv(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);

            let small = fit(&x[..n], &y[..n], &h).unwrap();
            let large = fit(&x, &y, &h).unwrap();
            let v_small = small.predict(&star).unwrap().variance;
            let v_large = large.predict(&star).unwrap().variance;
            assert!(
                v_large <= v_small + 1e-10,
                "variance grew: {v_small} -> {v_large}"
            );
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let x = vec![fv(&[0.3, 1.0]), fv(&[-0.2, 0.4]), fv(&[1.5, -1.1])];
        let y = [1.0, -0.5, 2.0];
        let h = hp(0.7, &[0.5, 2.0], 0.4);
        let m1 = fit(&x, &y, &h).unwrap();
        let m2 = fit(&x, &y, &h).unwrap();
        assert_eq!(m1.alpha(), m2.alpha());
        assert_eq!(m1.lml().to_bits(), m2.lml().to_bits());
        let star = fv(&[0.25, 0.25]);
        let p1 = m1.predict(&star).unwrap();
        let p2 = m2.predict(&star).unwrap();
        assert_eq!(p1.mean.to_bits(), p2.mean.to_bits());
        assert_eq!(p1.variance.to_bits(), p2.variance.to_bits());
    }

    #[test]
    fn rejects_nan_targets() {
        let err = fit(&[fv(&[0.0])], &[f64::NAN], &hp(1.0, &[1.0], 1.0)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let model = fit(&[fv(&[0.0, 1.0])], &[1.0], &hp(1.0, &[1.0, 1.0], 1.0)).unwrap();
        assert!(model.predict(&fv(&[0.0])).is_err());
    }
}
