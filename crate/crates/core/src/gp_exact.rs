//! Exact Gaussian-process regression: closed-form posterior and log marginal
//! likelihood via a Cholesky factor of `K_nn + noise * I`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ObservationSet;
use crate::kernels::{Input, Kernel, KernelSpec};
use crate::linalg::{factor_with_jitter, Factor};

/// Full covariance matrices are returned only up to this many queries.
pub const FULL_COVARIANCE_CAP: usize = 4096;

/// Prior mean handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    #[default]
    Zero,
    /// Subtract the training mean before regression and add it back afterwards.
    Constant,
}

impl MeanMode {
    pub fn offset(self, y: &[f64]) -> f64 {
        match self {
            MeanMode::Zero => 0.0,
            MeanMode::Constant => y.iter().sum::<f64>() / y.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Add the observation noise to the predictive variance (y-space).
    pub include_noise: bool,
    pub full_covariance_cap: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            include_noise: false,
            full_covariance_cap: FULL_COVARIANCE_CAP,
        }
    }
}

impl PredictOptions {
    pub fn y_space() -> Self {
        Self {
            include_noise: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    /// Marginal variances, clamped at zero.
    pub variance: Vec<f64>,
    /// Present when the query batch is within the covariance cap.
    pub covariance: Option<DMatrix<f64>>,
    /// Number of queries outside the training domain, when known.
    pub extrapolated: usize,
}

impl Posterior {
    pub fn empty() -> Self {
        Self {
            mean: Vec::new(),
            variance: Vec::new(),
            covariance: Some(DMatrix::zeros(0, 0)),
            extrapolated: 0,
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

/// A conditioned exact GP. Read-only after construction, so query batches can
/// share it across threads.
#[derive(Debug, Clone)]
pub struct ExactGp {
    kernel: Kernel,
    noise: f64,
    inputs: Vec<Input>,
    centered: DVector<f64>,
    offset: f64,
    factor: Factor,
    alpha: DVector<f64>,
}

impl ExactGp {
    pub fn new(spec: &KernelSpec, train: &ObservationSet, mean: MeanMode) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let kernel = spec.evaluator()?;
        let inputs = train.inputs();
        kernel.check_inputs(&inputs)?;
        let offset = mean.offset(&train.y);
        let centered = DVector::from_iterator(train.len(), train.y.iter().map(|v| v - offset));
        let mut k = kernel.gram_sym(&inputs);
        for i in 0..k.nrows() {
            k[(i, i)] += spec.noise_variance;
        }
        let factor = factor_with_jitter(&k, spec.variance, 0.0)?;
        let alpha = factor.chol.solve(&centered);
        Ok(Self {
            kernel,
            noise: spec.noise_variance,
            inputs,
            centered,
            offset,
            factor,
            alpha,
        })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.centered.len() as f64;
        -0.5 * self.centered.dot(&self.alpha) - 0.5 * self.factor.log_det() - 0.5 * n * (2.0 * PI).ln()
    }

    pub fn predict(&self, queries: &[Input], opts: PredictOptions) -> Result<Posterior> {
        if queries.is_empty() {
            return Ok(Posterior::empty());
        }
        self.kernel.check_inputs(queries)?;
        let cross = self.kernel.gram(&self.inputs, queries);
        let mean: Vec<f64> = (cross.transpose() * &self.alpha)
            .iter()
            .map(|v| v + self.offset)
            .collect();
        let v = crate::linalg::solve_lower(&self.factor.l(), &cross);
        let noise = if opts.include_noise { self.noise } else { 0.0 };
        let (variance, covariance) = if queries.len() <= opts.full_covariance_cap {
            let mut cov = self.kernel.gram_sym(queries) - v.transpose() * &v;
            for i in 0..cov.nrows() {
                cov[(i, i)] = cov[(i, i)].max(0.0) + noise;
            }
            let cov = (&cov + cov.transpose()) * 0.5;
            (cov.diagonal().iter().copied().collect(), Some(cov))
        } else {
            let var = queries
                .iter()
                .enumerate()
                .map(|(q, x)| (self.kernel.diag(x) - v.column(q).norm_squared()).max(0.0) + noise)
                .collect();
            (var, None)
        };
        Ok(Posterior {
            mean,
            variance,
            covariance,
            extrapolated: 0,
        })
    }
}

pub fn posterior(
    spec: &KernelSpec,
    train: &ObservationSet,
    queries: &[Input],
    mean: MeanMode,
    opts: PredictOptions,
) -> Result<Posterior> {
    ExactGp::new(spec, train, mean)?.predict(queries, opts)
}

pub fn log_marginal_likelihood(spec: &KernelSpec, train: &ObservationSet, mean: MeanMode) -> Result<f64> {
    Ok(ExactGp::new(spec, train, mean)?.log_marginal_likelihood())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CoordinateUnits;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(x: Vec<[f64; 2]>, y: Vec<f64>) -> ObservationSet {
        let n = y.len();
        ObservationSet {
            x,
            lane: vec![1; n],
            y,
            units: CoordinateUnits::Cells,
        }
    }

    #[test]
    fn noise_free_interpolation() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 4.0, [2.0, 3.0], 0.2, 1e-12);
        let train = obs(vec![[1.0, 1.0], [4.0, 2.0]], vec![10.0, 7.0]);
        let post = posterior(&spec, &train, &[Input::at(1.0, 1.0)], MeanMode::Zero, PredictOptions::default()).unwrap();
        assert!((post.mean[0] - 10.0).abs() < 1e-6);
        assert!(post.variance[0] < 1e-6);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 4.0, [1.0, 1.0], 0.0, 0.1);
        let train = obs(vec![[0.0, 0.0]], vec![12.0]);
        // d^2 / 2 = 200
        let post = posterior(&spec, &train, &[Input::at(20.0, 0.0)], MeanMode::Zero, PredictOptions::default()).unwrap();
        assert!(post.mean[0].abs() < 1e-12);
        assert_relative_eq!(post.variance[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn two_point_matches_explicit_inverse() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 2.0, [1.5, 0.7], 0.4, 0.3);
        let x = vec![[0.0, 0.0], [1.0, 0.5]];
        let y = vec![3.0, -1.0];
        let q = [0.4, 0.2];
        let k = |a: [f64; 2], b: [f64; 2]| crate::kernels::kernel_eval(&spec, a, b);
        let (a, b, d) = (k(x[0], x[0]) + 0.3, k(x[0], x[1]), k(x[1], x[1]) + 0.3);
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let ks = [k(x[0], q), k(x[1], q)];
        let w = [
            inv[0][0] * ks[0] + inv[0][1] * ks[1],
            inv[1][0] * ks[0] + inv[1][1] * ks[1],
        ];
        let mean = w[0] * y[0] + w[1] * y[1];
        let var = k(q, q) - (w[0] * ks[0] + w[1] * ks[1]);
        let post = posterior(&spec, &obs(x.clone(), y.clone()), &[Input::new(q, 1)], MeanMode::Zero, PredictOptions::default()).unwrap();
        assert_relative_eq!(post.mean[0], mean, epsilon = 1e-10);
        assert_relative_eq!(post.variance[0], var, epsilon = 1e-10);
        let quad = y[0] * (inv[0][0] * y[0] + inv[0][1] * y[1]) + y[1] * (inv[1][0] * y[0] + inv[1][1] * y[1]);
        let lml = -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln();
        assert_relative_eq!(log_marginal_likelihood(&spec, &obs(x, y), MeanMode::Zero).unwrap(), lml, epsilon = 1e-10);
    }

    #[test]
    fn single_point_lml() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 2.0, [1.0, 1.0], 0.0, 0.5);
        let lml = log_marginal_likelihood(&spec, &obs(vec![[0.0, 0.0]], vec![0.0]), MeanMode::Zero).unwrap();
        assert_relative_eq!(lml, -0.5 * (2.0 * PI * 2.5).ln(), epsilon = 1e-14);
    }

    #[test]
    fn lml_permutation_invariant_and_empty_query() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 2.0, [1.0, 2.0], 0.3, 0.2);
        let x = vec![[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]];
        let y = vec![1.0, 2.0, -0.5];
        let a = log_marginal_likelihood(&spec, &obs(x.clone(), y.clone()), MeanMode::Zero).unwrap();
        let b = log_marginal_likelihood(
            &spec,
            &obs(vec![x[2], x[0], x[1]], vec![y[2], y[0], y[1]]),
            MeanMode::Zero,
        )
        .unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        let post = posterior(&spec, &obs(x, y), &[], MeanMode::Zero, PredictOptions::default()).unwrap();
        assert!(post.mean.is_empty());
    }

    #[test]
    fn conditioning_reduces_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = KernelSpec::new(KernelFamily::Matern52, 3.0, [2.0, 1.0], 0.5, 0.2);
        let x: Vec<[f64; 2]> = (0..15).map(|_| [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)]).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q: Vec<Input> = (0..30).map(|_| Input::at(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0))).collect();
        let base = posterior(&spec, &obs(x.clone(), y.clone()), &q, MeanMode::Zero, PredictOptions::default()).unwrap();
        for v in &base.variance {
            assert!(*v <= spec.variance + 1e-8);
        }
        let (mut x2, mut y2) = (x.clone(), y.clone());
        x2.push(x[3]);
        y2.push(y[3]);
        let dup = posterior(&spec, &obs(x2, y2), &q, MeanMode::Zero, PredictOptions::default()).unwrap();
        for (a, b) in dup.variance.iter().zip(&base.variance) {
            assert!(*a <= *b + 1e-12);
        }
        let cov = base.covariance.unwrap();
        assert_eq!(cov, cov.transpose());
    }

    #[test]
    fn constant_mean_reverts_to_training_mean() {
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 1.0, [1.0, 1.0], 0.0, 0.1);
        let train = obs(vec![[0.0, 0.0], [1.0, 0.0]], vec![20.0, 22.0]);
        let post = posterior(&spec, &train, &[Input::at(100.0, 0.0)], MeanMode::Constant, PredictOptions::y_space()).unwrap();
        assert_relative_eq!(post.mean[0], 21.0, epsilon = 1e-12);
        assert_relative_eq!(post.variance[0], 1.1, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_only_above_cap() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 1.0, [1.0, 1.0], 0.0, 0.1);
        let train = obs(vec![[0.0, 0.0]], vec![1.0]);
        let q: Vec<Input> = (0..5).map(|i| Input::at(i as f64, 0.0)).collect();
        let opts = PredictOptions {
            include_noise: false,
            full_covariance_cap: 3,
        };
        let post = posterior(&spec, &train, &q, MeanMode::Zero, opts).unwrap();
        assert!(post.covariance.is_none());
        let full = posterior(&spec, &train, &q, MeanMode::Zero, PredictOptions::default()).unwrap();
        for (a, b) in post.variance.iter().zip(&full.variance) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }
}
