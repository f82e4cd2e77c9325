//! Derivative-free hyperparameter search: maximize the log marginal
//! likelihood over log10-scaled bounds with Bayesian optimization, plus a
//! random-search baseline with the same evaluation and selection rule.
//!
//! The objective surface in this data regime has many local optima, so the
//! search is global: a Latin-hypercube initial design, then expected
//! improvement under an isotropic squared-exponential surrogate. Evaluations
//! where the kernel matrix cannot be factorized score negative infinity and
//! are excluded from the surrogate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::log_marginal_likelihood;
use crate::kernels::{FeatureVector, HyperParams};
use crate::seed::mix;

/// Per-parameter log10 bounds for the D+2 hyperparameters, laid out as
/// `[nu, gamma_1 .. gamma_D, sigma_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    bounds: Vec<(f64, f64)>,
}

impl SearchSpace {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() < 3 {
            return Err(Error::Config(
                "search space needs at least nu, one gamma, and sigma_n".to_string(),
            ));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "bound {i} must satisfy lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { bounds })
    }

    /// Default desk-scale bounds for standardized data:
    /// `nu` in [1e-3, 1e3], each `gamma_d` in [1e-6, 1e2], `sigma_n` in [1e-3, 1e1].
    pub fn default_for_dim(d: usize) -> Self {
        let mut bounds = Vec::with_capacity(d + 2);
        bounds.push((-3.0, 3.0));
        bounds.extend(std::iter::repeat((-6.0, 2.0)).take(d));
        bounds.push((-3.0, 1.0));
        Self { bounds }
    }

    /// Same layout, custom linear-scale ranges per parameter group.
    pub fn from_linear_ranges(
        d: usize,
        nu: (f64, f64),
        gamma: (f64, f64),
        sigma_n: (f64, f64),
    ) -> Result<Self> {
        for (name, (lo, hi)) in [("nu", nu), ("gamma", gamma), ("sigma_n", sigma_n)] {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config(format!(
                    "{name} range must be positive with lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        let mut bounds = Vec::with_capacity(d + 2);
        bounds.push((nu.0.log10(), nu.1.log10()));
        bounds.extend(std::iter::repeat((gamma.0.log10(), gamma.1.log10())).take(d));
        bounds.push((sigma_n.0.log10(), sigma_n.1.log10()));
        Self::new(bounds)
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Total search dimension, D+2.
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Number of input-feature dimensions D.
    pub fn feature_dim(&self) -> usize {
        self.bounds.len() - 2
    }

    pub fn contains(&self, theta_log: &[f64]) -> bool {
        theta_log.len() == self.dim()
            && theta_log
                .iter()
                .zip(&self.bounds)
                .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
    }

    /// Exponentiate a log10 point into validated hyperparameters.
    pub fn to_hyperparams(&self, theta_log: &[f64]) -> Result<HyperParams> {
        if theta_log.len() != self.dim() {
            return Err(Error::dim("theta_log", self.dim(), theta_log.len()));
        }
        let nu = 10f64.powf(theta_log[0]);
        let gamma: Vec<f64> = theta_log[1..self.dim() - 1]
            .iter()
            .map(|t| 10f64.powf(*t))
            .collect();
        let sigma_n = 10f64.powf(theta_log[self.dim() - 1]);
        HyperParams::new(nu, gamma, sigma_n)
    }

    fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..hi))
            .collect()
    }
}

/// Budget and seeding for the optimizer. `iterations = 0` degenerates to
/// the initial design alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BOConfig {
    pub initial_design_size: usize,
    pub iterations: usize,
    pub candidate_pool_size: usize,
    pub seed: u64,
}

impl BOConfig {
    /// Desk-scale defaults for a D-feature problem: `2(D+2)` initial points,
    /// 200 iterations, 2000-candidate acquisition pool.
    pub fn for_dim(d: usize, seed: u64) -> Self {
        Self {
            initial_design_size: 2 * (d + 2),
            iterations: 200,
            candidate_pool_size: 2000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_design_size < 1 {
            return Err(Error::Config("initial_design_size must be >= 1".to_string()));
        }
        if self.candidate_pool_size < 1 {
            return Err(Error::Config("candidate_pool_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// One objective evaluation: the log10 point and its log marginal
/// likelihood (negative infinity marks a rejected factorization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub theta_log: Vec<f64>,
    pub objective: f64,
}

/// Latin-hypercube sample: `size` points, each one-dimensional projection
/// hitting `size` distinct strata. Deterministic per seed.
pub fn initial_design(space: &SearchSpace, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = space.dim();
    // per-dimension stratified draws, then an independent shuffle per dimension
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for &(lo, hi) in space.bounds() {
        let mut vals: Vec<f64> = (0..size)
            .map(|k| {
                let u: f64 = rng.gen();
                let frac = (k as f64 + u) / size as f64;
                lo + frac * (hi - lo)
            })
            .collect();
        shuffle(&mut vals, &mut rng);
        columns.push(vals);
    }
    (0..size)
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect()
}

/// Fisher-Yates, kept local so the draw sequence is pinned by this crate
/// rather than by a rand release.
fn shuffle<T>(vals: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..vals.len()).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
}

/// Expected improvement of a Gaussian belief `N(mu, sigma^2)` over the
/// incumbent `best`, for maximization. `sigma = 0` collapses to
/// `max(0, mu - best)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    if sigma <= 0.0 {
        return (mu - best).max(0.0);
    }
    let z = (mu - best) / sigma;
    let ei = (mu - best) * standard_normal_cdf(z) + sigma * standard_normal_pdf(z);
    ei.max(0.0)
}

fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Isotropic squared-exponential surrogate over the normalized search cube,
/// with its own two scalars (lengthscale, noise) fitted by grid search on
/// the surrogate's marginal likelihood.
struct Surrogate {
    points: Vec<Vec<f64>>,
    chol_lower: DMatrix<f64>,
    weights: DVector<f64>,
    lengthscale: f64,
}

const SURROGATE_LENGTHSCALES: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
const SURROGATE_NOISES: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

impl Surrogate {
    fn fit(points: Vec<Vec<f64>>, targets: &[f64]) -> Option<Self> {
        let h = points.len();
        if h == 0 {
            return None;
        }
        let mut sq_dist = DMatrix::<f64>::zeros(h, h);
        for i in 0..h {
            for j in 0..i {
                let d2: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sq_dist[(i, j)] = d2;
                sq_dist[(j, i)] = d2;
            }
        }
        let z = DVector::from_column_slice(targets);

        let mut best: Option<(f64, f64, f64)> = None; // (lml, lengthscale, noise)
        for &ls in &SURROGATE_LENGTHSCALES {
            for &noise in &SURROGATE_NOISES {
                if let Some(lml) = surrogate_lml(&sq_dist, &z, ls, noise) {
                    if best.map_or(true, |(b, _, _)| lml > b) {
                        best = Some((lml, ls, noise));
                    }
                }
            }
        }
        let (_, ls, noise) = best?;
        let k = surrogate_kernel(&sq_dist, ls, noise);
        let chol = k.cholesky()?;
        let weights = chol.solve(&z);
        Some(Self {
            points,
            chol_lower: chol.unpack(),
            weights,
            lengthscale: ls,
        })
    }

    /// Posterior mean and latent standard deviation at a candidate. At a
    /// training point the standard deviation shrinks to the noise floor,
    /// which is what pushes acquisition toward unexplored candidates.
    fn predict(&self, candidate: &[f64]) -> (f64, f64) {
        let h = self.points.len();
        let mut k_star = DVector::<f64>::zeros(h);
        for (i, p) in self.points.iter().enumerate() {
            let d2: f64 = p
                .iter()
                .zip(candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            k_star[i] = (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp();
        }
        let mean = k_star.dot(&self.weights);
        let v = self
            .chol_lower
            .solve_lower_triangular(&k_star)
            .expect("surrogate factor is positive definite");
        let var = (1.0 - v.norm_squared()).max(0.0);
        (mean, var.sqrt())
    }
}

fn surrogate_kernel(sq_dist: &DMatrix<f64>, lengthscale: f64, noise: f64) -> DMatrix<f64> {
    let h = sq_dist.nrows();
    let mut k = sq_dist.map(|d2| (-d2 / (2.0 * lengthscale * lengthscale)).exp());
    for i in 0..h {
        k[(i, i)] += noise * noise;
    }
    k
}

fn surrogate_lml(sq_dist: &DMatrix<f64>, z: &DVector<f64>, lengthscale: f64, noise: f64) -> Option<f64> {
    let h = z.len() as f64;
    let k = surrogate_kernel(sq_dist, lengthscale, noise);
    let chol = k.cholesky()?;
    let alpha = chol.solve(z);
    let log_det: f64 = (0..z.len()).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
    Some(-0.5 * z.dot(&alpha) - 0.5 * log_det - 0.5 * h * (2.0 * std::f64::consts::PI).ln())
}

fn normalize(space: &SearchSpace, theta_log: &[f64]) -> Vec<f64> {
    theta_log
        .iter()
        .zip(space.bounds())
        .map(|(t, (lo, hi))| (t - lo) / (hi - lo))
        .collect()
}

/// Standardize finite objectives for the surrogate; the spread guard keeps a
/// flat history from dividing by zero.
fn standardize(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < 1e-12 { 1.0 } else { std })
}

/// Propose the next point: fit the surrogate on the finite-objective
/// history, score a uniform candidate pool by expected improvement, return
/// the argmax. Falls back to a uniform draw when the history holds no
/// finite objective. Deterministic given the RNG state.
pub fn propose_next(
    history: &[EvaluationRecord],
    space: &SearchSpace,
    config: &BOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Config("propose_next needs a non-empty history".to_string()));
    }
    let finite: Vec<&EvaluationRecord> =
        history.iter().filter(|r| r.objective.is_finite()).collect();

    // candidates are drawn before the fallback check so the RNG consumption
    // pattern does not depend on history contents
    let candidates: Vec<Vec<f64>> = (0..config.candidate_pool_size)
        .map(|_| space.sample_uniform(rng))
        .collect();

    if finite.is_empty() {
        return Ok(candidates.into_iter().next().expect("pool size >= 1"));
    }

    let (mean, std) = standardize(
        &finite.iter().map(|r| r.objective).collect::<Vec<_>>(),
    );
    let targets: Vec<f64> = finite.iter().map(|r| (r.objective - mean) / std).collect();
    let points: Vec<Vec<f64>> = finite
        .iter()
        .map(|r| normalize(space, &r.theta_log))
        .collect();
    let best_z = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let surrogate = match Surrogate::fit(points, &targets) {
        Some(s) => s,
        // a degenerate surrogate (duplicated points at every grid setting)
        // should not kill the outer search
        None => return Ok(candidates.into_iter().next().expect("pool size >= 1")),
    };

    let mut best_idx = 0;
    let mut best_ei = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let (mu, sigma) = surrogate.predict(&normalize(space, c));
        let ei = expected_improvement(mu, sigma, best_z);
        if ei > best_ei {
            best_ei = ei;
            best_idx = i;
        }
    }
    Ok(candidates.into_iter().nth(best_idx).expect("argmax index in range"))
}

/// The Type-II objective: log marginal likelihood, with factorization
/// failures mapped to negative infinity so the search routes around them.
fn evaluate_objective(
    x: &[FeatureVector],
    y: &[f64],
    space: &SearchSpace,
    theta_log: &[f64],
) -> Result<f64> {
    let hp = space.to_hyperparams(theta_log)?;
    match log_marginal_likelihood(x, y, &hp) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Ok(f64::NEG_INFINITY),
        Err(Error::IllConditionedKernel) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

fn best_finite(records: &[EvaluationRecord]) -> Option<&EvaluationRecord> {
    records
        .iter()
        .filter(|r| r.objective.is_finite())
        .max_by(|a, b| a.objective.total_cmp(&b.objective))
}

fn check_dataset(x: &[FeatureVector], y: &[f64], space: &SearchSpace) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Data(
            "optimization needs a non-empty dataset with matching target length".to_string(),
        ));
    }
    if space.feature_dim() != x[0].len() {
        return Err(Error::dim("search space vs features", x[0].len() + 2, space.dim()));
    }
    Ok(())
}

/// Bayesian optimization of the log marginal likelihood. Returns the best
/// hyperparameters found and the full evaluation trace (initial design
/// first, then one record per iteration).
pub fn optimize_hyperparameters(
    x: &[FeatureVector],
    y: &[f64],
    space: &SearchSpace,
    config: &BOConfig,
) -> Result<(HyperParams, Vec<EvaluationRecord>)> {
    check_dataset(x, y, space)?;
    config.validate()?;

    let mut records: Vec<EvaluationRecord> = Vec::with_capacity(config.initial_design_size + config.iterations);
    for theta_log in initial_design(space, config.initial_design_size, config.seed) {
        let objective = evaluate_objective(x, y, space, &theta_log)?;
        records.push(EvaluationRecord { theta_log, objective });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 1));
    for _ in 0..config.iterations {
        let theta_log = propose_next(&records, space, config, &mut rng)?;
        let objective = evaluate_objective(x, y, space, &theta_log)?;
        records.push(EvaluationRecord { theta_log, objective });
    }

    let best = best_finite(&records).ok_or(Error::OptimizationFailed)?;
    Ok((space.to_hyperparams(&best.theta_log)?, records))
}

/// Uniform random search with the same evaluation and selection rule,
/// for budget-matched comparisons against the Bayesian path.
pub fn random_search(
    x: &[FeatureVector],
    y: &[f64],
    space: &SearchSpace,
    budget: usize,
    seed: u64,
) -> Result<(HyperParams, Vec<EvaluationRecord>)> {
    check_dataset(x, y, space)?;
    if budget < 1 {
        return Err(Error::Config("random search budget must be >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(budget);
    for _ in 0..budget {
        let theta_log = space.sample_uniform(&mut rng);
        let objective = evaluate_objective(x, y, space, &theta_log)?;
        records.push(EvaluationRecord { theta_log, objective });
    }
    let best = best_finite(&records).ok_or(Error::OptimizationFailed)?;
    Ok((space.to_hyperparams(&best.theta_log)?, records))
}

/// Render an evaluation trace as CSV:
/// `iteration,log10_nu,log10_gamma_1..,log10_sigma_n,objective`.
pub fn trace_csv(records: &[EvaluationRecord]) -> String {
    let mut out = String::from("iteration");
    if let Some(first) = records.first() {
        let d = first.theta_log.len() - 2;
        out.push_str(",log10_nu");
        for i in 1..=d {
            out.push_str(&format!(",log10_gamma_{i}"));
        }
        out.push_str(",log10_sigma_n");
    }
    out.push_str(",objective\n");
    for (i, rec) in records.iter().enumerate() {
        out.push_str(&i.to_string());
        for t in &rec.theta_log {
            out.push(',');
            out.push_str(&t.to_string());
        }
        out.push(',');
        out.push_str(&rec.objective.to_string());
        out.push('\n');
    }
    out
}
