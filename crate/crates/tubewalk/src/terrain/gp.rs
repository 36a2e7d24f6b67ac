//! Gaussian-process elevation regression with a fixed-weight multi-scale
//! RBF kernel.
//!
//! The posterior mean/variance at a query `q` given inputs `X`, targets `Z`,
//! and noise variance `s2` are
//!
//!   mean(q) = k(q)' (K + s2 I)^-1 Z
//!   var(q)  = kappa(q,q) - k(q)' (K + s2 I)^-1 k(q)
//!
//! with `K` the kernel Gram matrix. The factorization is computed once at
//! fit time; a fitted model is immutable and safe to query from many threads.

use super::grid::Observation;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid kernel config: {0}")]
    InvalidKernel(String),
    #[error("need at least {needed} observations, got {got}")]
    NotEnoughData { needed: usize, got: usize },
    #[error("noise variance must be positive, got {0}")]
    InvalidNoise(f64),
    #[error("covariance matrix not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },
}

/// Kernel family: a single RBF or a fixed-weight mixture of RBFs with
/// distinct length scales. Weights are nonnegative and sum to one, so the
/// kernel value at zero distance is exactly the signal variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    SingleRbf,
    MixtureRbf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub variant: KernelVariant,
    /// Signal variance in m^2.
    pub signal_variance: f64,
    /// One length scale per mixture component, metres.
    pub length_scales: Vec<f64>,
    /// Fixed mixture weights, nonnegative, summing to one.
    pub weights: Vec<f64>,
}

impl Default for KernelConfig {
    /// Multi-scale mixture tuned for metre-scale terrain patches.
    fn default() -> Self {
        Self {
            variant: KernelVariant::MixtureRbf,
            signal_variance: 0.05,
            length_scales: vec![0.5, 1.5, 4.0],
            weights: vec![1.0 / 3.0; 3],
        }
    }
}

impl KernelConfig {
    pub fn single_rbf(signal_variance: f64, length_scale: f64) -> Self {
        Self {
            variant: KernelVariant::SingleRbf,
            signal_variance,
            length_scales: vec![length_scale],
            weights: vec![1.0],
        }
    }

    pub fn mixture_rbf(
        signal_variance: f64,
        length_scales: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, GpError> {
        let cfg = Self {
            variant: KernelVariant::MixtureRbf,
            signal_variance,
            length_scales,
            weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if self.length_scales.is_empty() {
            return Err(GpError::InvalidKernel("no length scales".into()));
        }
        if self.length_scales.len() != self.weights.len() {
            return Err(GpError::InvalidKernel(format!(
                "{} length scales but {} weights",
                self.length_scales.len(),
                self.weights.len()
            )));
        }
        if matches!(self.variant, KernelVariant::SingleRbf) && self.length_scales.len() != 1 {
            return Err(GpError::InvalidKernel(
                "single-rbf kernel takes exactly one length scale".into(),
            ));
        }
        if !(self.signal_variance > 0.0) {
            return Err(GpError::InvalidKernel(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if self.length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(GpError::InvalidKernel("length scales must be positive".into()));
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(GpError::InvalidKernel("weights must be nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GpError::InvalidKernel(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Covariance between two planar points. Symmetric; equals the signal
    /// variance at zero distance.
    pub fn eval(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        let d2 = (a - b).norm_squared();
        let mut k = 0.0;
        for (l, w) in self.length_scales.iter().zip(self.weights.iter()) {
            k += w * (-d2 / (2.0 * l * l)).exp();
        }
        self.signal_variance * k
    }

    /// Kernel value and its gradient with respect to the first argument.
    pub fn eval_with_grad(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let diff = a - b;
        let d2 = diff.norm_squared();
        let mut k = 0.0;
        let mut g = Vector2::zeros();
        for (l, w) in self.length_scales.iter().zip(self.weights.iter()) {
            let term = w * (-d2 / (2.0 * l * l)).exp();
            k += term;
            g += diff * (-term / (l * l));
        }
        (self.signal_variance * k, g * self.signal_variance)
    }
}

/// Serializable payload of a fitted model; the factorization is rebuilt on
/// load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelData {
    pub inputs: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    pub noise_var: f64,
    pub kernel: KernelConfig,
}

/// Fitted Gaussian-process posterior over terrain elevation.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vector2<f64>>,
    targets: DVector<f64>,
    noise_var: f64,
    kernel: KernelConfig,
    chol: Cholesky<f64, Dyn>,
    /// Precomputed `(K + s2 I)^-1 Z`.
    alpha: DVector<f64>,
}

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Fit the GP: build the Gram matrix, factorize `K + s2 I` (escalating a
/// diagonal jitter if needed), and cache the weight vector.
pub fn fit_gp(
    obs: &[Observation],
    kernel: KernelConfig,
    noise_var: f64,
) -> Result<GpModel, GpError> {
    kernel.validate()?;
    if obs.len() < 2 {
        return Err(GpError::NotEnoughData {
            needed: 2,
            got: obs.len(),
        });
    }
    if !(noise_var > 0.0) {
        return Err(GpError::InvalidNoise(noise_var));
    }
    let n = obs.len();
    let inputs: Vec<Vector2<f64>> = obs.iter().map(|o| o.point()).collect();
    let targets = DVector::from_iterator(n, obs.iter().map(|o| o.elevation));

    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&inputs[i], &inputs[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }

    let mut chol = None;
    for jitter in JITTERS {
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += noise_var + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or(GpError::NotPositiveDefinite {
        max_jitter: *JITTERS.last().expect("jitter ladder is nonempty"),
    })?;
    let alpha = chol.solve(&targets);

    Ok(GpModel {
        inputs,
        targets,
        noise_var,
        kernel,
        chol,
        alpha,
    })
}

impl GpModel {
    fn kernel_vector(&self, q: &Vector2<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|x| self.kernel.eval(q, x)),
        )
    }

    /// Posterior mean and variance at a planar query point. The variance is
    /// clamped at zero against numerical cancellation.
    pub fn predict(&self, q: &Vector2<f64>) -> (f64, f64) {
        let k = self.kernel_vector(q);
        let mean = k.dot(&self.alpha);
        let solved = self.chol.solve(&k);
        let var = self.kernel.eval(q, q) - k.dot(&solved);
        (mean, var.max(0.0))
    }

    /// Posterior mean only (cheaper: skips the variance solve).
    pub fn mean(&self, q: &Vector2<f64>) -> f64 {
        let mut mean = 0.0;
        for (x, a) in self.inputs.iter().zip(self.alpha.iter()) {
            mean += self.kernel.eval(q, x) * a;
        }
        mean
    }

    /// Analytic gradient of the posterior mean with respect to the query
    /// point.
    pub fn mean_gradient(&self, q: &Vector2<f64>) -> Vector2<f64> {
        self.mean_with_gradient(q).1
    }

    /// Posterior mean and its gradient in one pass over the training set.
    pub fn mean_with_gradient(&self, q: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let mut mean = 0.0;
        let mut g = Vector2::zeros();
        for (x, a) in self.inputs.iter().zip(self.alpha.iter()) {
            let (k, gk) = self.kernel.eval_with_grad(q, x);
            mean += k * *a;
            g += gk * *a;
        }
        (mean, g)
    }

    /// Mean posterior standard deviation over a set of points.
    pub fn mean_posterior_std(&self, points: &[Vector2<f64>]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let sum: f64 = points.iter().map(|p| self.predict(p).1.sqrt()).sum();
        sum / points.len() as f64
    }

    pub fn train_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn inputs(&self) -> &[Vector2<f64>] {
        &self.inputs
    }

    /// Max-norm residual of the cached linear solve, `|(K+s2 I) a - Z|_inf`.
    pub fn solve_residual(&self) -> f64 {
        let n = self.inputs.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let mut k = self.kernel.eval(&self.inputs[i], &self.inputs[j]);
                if i == j {
                    k += self.noise_var;
                }
                acc += k * self.alpha[j];
            }
            worst = worst.max((acc - self.targets[i]).abs());
        }
        worst
    }

    pub fn to_data(&self) -> GpModelData {
        GpModelData {
            inputs: self.inputs.iter().map(|p| [p.x, p.y]).collect(),
            targets: self.targets.iter().cloned().collect(),
            noise_var: self.noise_var,
            kernel: self.kernel.clone(),
        }
    }

    pub fn from_data(data: &GpModelData) -> Result<Self, GpError> {
        let obs: Vec<Observation> = data
            .inputs
            .iter()
            .zip(data.targets.iter())
            .map(|(loc, z)| Observation {
                location: *loc,
                elevation: *z,
            })
            .collect();
        fit_gp(&obs, data.kernel.clone(), data.noise_var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{sample_observations, TerrainGrid, TerrainSpec, TerrainStyle};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(points: &[(f64, f64, f64)]) -> Vec<Observation> {
        points
            .iter()
            .map(|&(x, y, z)| Observation {
                location: [x, y],
                elevation: z,
            })
            .collect()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let k = KernelConfig::default();
        let p = Vector2::new(1.3, -0.4);
        assert_relative_eq!(k.eval(&p, &p), 0.05, max_relative = 1e-12);
    }

    #[test]
    fn single_rbf_at_one_length_scale() {
        let k = KernelConfig::single_rbf(1.0, 0.7);
        let a = Vector2::new(0.0, 0.0);
        let b = Vector2::new(0.7, 0.0);
        assert_relative_eq!(k.eval(&a, &b), (-0.5f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn mixture_is_mean_of_components_at_equal_weights() {
        let k = KernelConfig::mixture_rbf(1.0, vec![0.5, 2.0], vec![0.5, 0.5]).unwrap();
        let a = Vector2::new(0.0, 0.0);
        let b = Vector2::new(1.0, 0.0);
        let k1 = (-1.0f64 / (2.0 * 0.25)).exp();
        let k2 = (-1.0f64 / (2.0 * 4.0)).exp();
        assert_relative_eq!(k.eval(&a, &b), 0.5 * (k1 + k2), max_relative = 1e-12);
    }

    #[test]
    fn kernel_is_symmetric() {
        let k = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let b = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            assert_eq!(k.eval(&a, &b), k.eval(&b, &a));
        }
    }

    #[test]
    fn bad_kernel_configs_rejected() {
        assert!(KernelConfig::mixture_rbf(1.0, vec![0.5, 1.0], vec![0.7, 0.7]).is_err());
        assert!(KernelConfig::mixture_rbf(1.0, vec![-0.5], vec![1.0]).is_err());
        assert!(KernelConfig::mixture_rbf(0.0, vec![0.5], vec![1.0]).is_err());
    }

    #[test]
    fn duplicate_inputs_still_fit() {
        let data = obs(&[(1.0, 1.0, 0.3), (1.0, 1.0, 0.31), (2.0, 1.5, 0.1)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        assert!(m.solve_residual().is_finite());
    }

    #[test]
    fn solve_residual_is_tiny() {
        let grid = TerrainGrid::generate(&TerrainSpec {
            style: TerrainStyle::Hilly,
            extent: [6.0, 6.0],
            resolution: 50,
            height_band: [0.0, 0.7],
            seed: 4,
        })
        .unwrap();
        let data = sample_observations(&grid, 200, 0.01, 8).unwrap();
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        let z_inf = data
            .iter()
            .map(|o| o.elevation.abs())
            .fold(0.0f64, f64::max);
        assert!(
            m.solve_residual() <= 1e-8 * z_inf,
            "residual {} vs bound {}",
            m.solve_residual(),
            1e-8 * z_inf
        );
    }

    #[test]
    fn prior_recovered_far_from_data() {
        let data = obs(&[(0.0, 0.0, 0.4), (1.0, 0.0, 0.2), (0.0, 1.0, 0.3)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        let (mean, var) = m.predict(&Vector2::new(500.0, 500.0));
        assert!(mean.abs() < 1e-8);
        assert_relative_eq!(var, 0.05, max_relative = 1e-6);
    }

    #[test]
    fn interpolates_training_points_at_tiny_noise() {
        let data = obs(&[(0.0, 0.0, 0.4), (1.0, 0.0, 0.2), (0.0, 1.0, 0.3), (1.5, 1.5, 0.25)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-10).unwrap();
        for o in &data {
            let (mean, _) = m.predict(&o.point());
            assert!((mean - o.elevation).abs() < 1e-4);
        }
    }

    #[test]
    fn matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<Observation> = (0..5)
            .map(|_| Observation {
                location: [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)],
                elevation: rng.gen_range(-0.3..0.7),
            })
            .collect();
        let kernel = KernelConfig::default();
        let noise = 1e-3;
        let m = fit_gp(&data, kernel.clone(), noise).unwrap();

        // Oracle: explicit dense inverse of (K + s2 I).
        let n = data.len();
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                gram[(i, j)] = kernel.eval(&data[i].point(), &data[j].point());
                if i == j {
                    gram[(i, j)] += noise;
                }
            }
        }
        let inv = gram.try_inverse().unwrap();
        let z = DVector::from_iterator(n, data.iter().map(|o| o.elevation));
        for _ in 0..20 {
            let q = Vector2::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
            let k = DVector::from_iterator(n, data.iter().map(|o| kernel.eval(&q, &o.point())));
            let mean_oracle = k.dot(&(&inv * &z));
            let var_oracle = kernel.eval(&q, &q) - k.dot(&(&inv * &k));
            let (mean, var) = m.predict(&q);
            assert!((mean - mean_oracle).abs() < 1e-10);
            assert!((var - var_oracle.max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_smaller_at_training_input_than_far_away() {
        let data = obs(&[(1.0, 1.0, 0.4), (2.0, 1.0, 0.2), (1.0, 2.0, 0.3)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        let (_, var_at_train) = m.predict(&Vector2::new(1.0, 1.0));
        let (_, var_far) = m.predict(&Vector2::new(1.0 + 40.0, 1.0));
        assert!(var_at_train <= var_far);
    }

    #[test]
    fn gradient_of_constant_data_is_zero() {
        let data = obs(&[(0.0, 0.0, 0.25), (1.0, 0.0, 0.25), (0.0, 1.0, 0.25), (1.0, 1.0, 0.25)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-8).unwrap();
        let g = m.mean_gradient(&Vector2::new(0.5, 0.5));
        assert!(g.norm() < 1e-5, "gradient {g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = TerrainGrid::generate(&TerrainSpec {
            style: TerrainStyle::Wavy,
            extent: [6.0, 6.0],
            resolution: 50,
            height_band: [0.0, 0.5],
            seed: 21,
        })
        .unwrap();
        let data = sample_observations(&grid, 150, 0.01, 3).unwrap();
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..100 {
            let q = Vector2::new(rng.gen_range(0.5..5.5), rng.gen_range(0.5..5.5));
            let g = m.mean_gradient(&q);
            let fd = Vector2::new(
                (m.mean(&Vector2::new(q.x + h, q.y)) - m.mean(&Vector2::new(q.x - h, q.y)))
                    / (2.0 * h),
                (m.mean(&Vector2::new(q.x, q.y + h)) - m.mean(&Vector2::new(q.x, q.y - h)))
                    / (2.0 * h),
            );
            let denom = g.norm().max(1e-8);
            assert!(
                (g - fd).norm() / denom < 1e-5,
                "analytic {g:?} vs fd {fd:?}"
            );
        }
    }

    #[test]
    fn ramp_gradient_points_up_slope() {
        // Linear ramp along +x, sampled on a coarse lattice.
        let mut data = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                data.push(Observation {
                    location: [i as f64 * 0.8, j as f64 * 0.8],
                    elevation: 0.1 * i as f64 * 0.8,
                });
            }
        }
        let m = fit_gp(&data, KernelConfig::default(), 1e-6).unwrap();
        let g = m.mean_gradient(&Vector2::new(2.0, 2.0));
        assert!(g.x > 0.0, "expected up-slope x component, got {g:?}");
        assert!(g.dot(&Vector2::new(1.0, 0.0)) > 0.0);
    }

    #[test]
    fn model_data_round_trip() {
        let data = obs(&[(0.0, 0.0, 0.4), (1.0, 0.0, 0.2), (0.0, 1.0, 0.3)]);
        let m = fit_gp(&data, KernelConfig::default(), 1e-4).unwrap();
        let payload = serde_json::to_string(&m.to_data()).unwrap();
        let parsed: GpModelData = serde_json::from_str(&payload).unwrap();
        let m2 = GpModel::from_data(&parsed).unwrap();
        let q = Vector2::new(0.4, 0.6);
        assert_eq!(m.predict(&q), m2.predict(&q));
    }
}
