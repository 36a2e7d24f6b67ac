//! Split conformal calibration of the GP elevation mean.
//!
//! Nonconformity score of a held-out observation: `|z - mean(location)|`.
//! Sorting the calibration scores and taking the `ceil((k+1)(1-delta))`-th
//! smallest (with an implicit `+inf` appended) gives a threshold whose
//! symmetric interval around the mean covers the truth with probability at
//! least `1 - delta` under exchangeability. All functions here are pure.

use crate::terrain::{GpModel, Observation};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("failure rate must lie in (0, 1), got {0}")]
    InvalidFailureRate(f64),
    #[error("nonconformity scores must be finite and nonnegative")]
    InvalidScores,
}

/// Calibrated quantile threshold. `threshold` is `+inf` when the calibration
/// set is too small for the requested failure rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub threshold: f64,
    pub failure_rate: f64,
    pub calibration_count: usize,
    /// One-based index of the order statistic used, `ceil((k+1)(1-delta))`.
    pub quantile_index: usize,
}

impl CalibratedThreshold {
    pub fn is_unbounded(&self) -> bool {
        self.threshold.is_infinite()
    }
}

/// Symmetric elevation interval around the GP mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo.is_infinite() || self.hi.is_infinite()
    }

    pub fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }
}

/// Absolute deviations between held-out elevations and the fitted mean.
pub fn nonconformity_scores(
    model: &GpModel,
    calibration: &[Observation],
) -> Result<Vec<f64>, ConformalError> {
    if calibration.is_empty() {
        return Err(ConformalError::EmptySet("calibration"));
    }
    Ok(calibration
        .iter()
        .map(|o| (o.elevation - model.mean(&o.point())).abs())
        .collect())
}

/// Quantile threshold over a score set. Ties are kept; ordering of the input
/// does not matter.
pub fn calibrate_threshold(
    scores: &[f64],
    failure_rate: f64,
) -> Result<CalibratedThreshold, ConformalError> {
    if !(failure_rate > 0.0 && failure_rate < 1.0) {
        return Err(ConformalError::InvalidFailureRate(failure_rate));
    }
    if scores.is_empty() {
        return Err(ConformalError::EmptySet("score"));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(ConformalError::InvalidScores);
    }
    let k = scores.len();
    let p = (((k + 1) as f64) * (1.0 - failure_rate)).ceil() as usize;
    let threshold = if p <= k {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        sorted[p - 1]
    } else {
        f64::INFINITY
    };
    Ok(CalibratedThreshold {
        threshold,
        failure_rate,
        calibration_count: k,
        quantile_index: p,
    })
}

/// Interval around the posterior mean at a query point.
pub fn prediction_interval(
    model: &GpModel,
    thr: &CalibratedThreshold,
    query: &Vector2<f64>,
) -> Interval {
    let mean = model.mean(query);
    Interval {
        lo: mean - thr.threshold,
        hi: mean + thr.threshold,
    }
}

/// Fraction of test observations whose elevation falls inside the interval.
pub fn empirical_coverage(
    model: &GpModel,
    thr: &CalibratedThreshold,
    test: &[Observation],
) -> Result<f64, ConformalError> {
    if test.is_empty() {
        return Err(ConformalError::EmptySet("test"));
    }
    let hits = test
        .iter()
        .filter(|o| prediction_interval(model, thr, &o.point()).contains(o.elevation))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Conformal interval width next to the Gaussian-credible width at the same
/// nominal level, averaged over a point set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WidthComparison {
    /// `2 * threshold`.
    pub conformal_width: f64,
    /// `2 * z * mean posterior sigma`.
    pub gp_width: f64,
    /// Two-sided Gaussian quantile for the failure rate.
    pub z_score: f64,
    pub mean_posterior_std: f64,
}

pub fn interval_width_comparison(
    model: &GpModel,
    thr: &CalibratedThreshold,
    points: &[Vector2<f64>],
) -> WidthComparison {
    let z = inverse_normal_cdf(1.0 - thr.failure_rate / 2.0);
    let sigma = model.mean_posterior_std(points);
    WidthComparison {
        conformal_width: 2.0 * thr.threshold,
        gp_width: 2.0 * z * sigma,
        z_score: z,
        mean_posterior_std: sigma,
    }
}

/// Seeded uniform split into train and calibration subsets.
pub fn split_dataset(
    obs: &[Observation],
    train_fraction: f64,
    seed: u64,
) -> (Vec<Observation>, Vec<Observation>) {
    let mut idx: Vec<usize> = (0..obs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = ((obs.len() as f64) * train_fraction).round() as usize;
    let train = idx[..n_train].iter().map(|&i| obs[i]).collect();
    let cal = idx[n_train..].iter().map(|&i| obs[i]).collect();
    (train, cal)
}

/// Per-step failure rate that compounds to a whole-trajectory rate over a
/// given number of steps: `1 - (1 - delta)^(1/steps)`.
pub fn per_step_failure_rate(whole_trajectory_delta: f64, steps: usize) -> f64 {
    assert!(steps >= 1, "need at least one step");
    1.0 - (1.0 - whole_trajectory_delta).powf(1.0 / steps as f64)
}

/// Inverse standard normal CDF (Acklam's rational approximation, absolute
/// error below 1.2e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{fit_gp, sample_observations, KernelConfig, TerrainGrid, TerrainSpec, TerrainStyle};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy_model() -> GpModel {
        let obs = vec![
            Observation { location: [0.0, 0.0], elevation: 0.4 },
            Observation { location: [1.0, 0.0], elevation: 0.2 },
            Observation { location: [0.0, 1.0], elevation: 0.3 },
        ];
        fit_gp(&obs, KernelConfig::default(), 1e-4).unwrap()
    }

    #[test]
    fn score_on_the_mean_is_zero() {
        let m = toy_model();
        let q = Vector2::new(0.5, 0.5);
        let z = m.mean(&q);
        let scores = nonconformity_scores(
            &m,
            &[Observation { location: [0.5, 0.5], elevation: z }],
        )
        .unwrap();
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn score_is_absolute_deviation() {
        let m = toy_model();
        let q = Vector2::new(0.3, 0.3);
        let mean = m.mean(&q);
        let scores = nonconformity_scores(
            &m,
            &[Observation { location: [0.3, 0.3], elevation: mean + 0.08 }],
        )
        .unwrap();
        assert_relative_eq!(scores[0], 0.08, max_relative = 1e-12);
    }

    #[test]
    fn empty_calibration_is_error() {
        let m = toy_model();
        assert!(nonconformity_scores(&m, &[]).is_err());
    }

    #[test]
    fn quantile_arithmetic_small() {
        let thr = calibrate_threshold(&[0.1, 0.2, 0.3, 0.4], 0.2).unwrap();
        assert_eq!(thr.quantile_index, 4);
        assert_eq!(thr.threshold, 0.4);
    }

    #[test]
    fn infinity_when_index_exceeds_count() {
        let thr = calibrate_threshold(&[0.1, 0.2, 0.3, 0.4], 0.1).unwrap();
        assert_eq!(thr.quantile_index, 5);
        assert!(thr.is_unbounded());
    }

    #[test]
    fn quantile_arithmetic_at_campaign_scale() {
        let scores: Vec<f64> = (1..=210).map(|i| i as f64 / 1000.0).collect();
        let thr = calibrate_threshold(&scores, 0.15).unwrap();
        assert_eq!(thr.calibration_count, 210);
        assert_eq!(thr.quantile_index, 180);
        assert_relative_eq!(thr.threshold, 0.180, max_relative = 1e-12);
    }

    #[test]
    fn invalid_failure_rates_rejected() {
        assert!(calibrate_threshold(&[0.1], 0.0).is_err());
        assert!(calibrate_threshold(&[0.1], 1.0).is_err());
    }

    #[test]
    fn interval_degenerate_and_unbounded() {
        let m = toy_model();
        let q = Vector2::new(0.2, 0.2);
        let mean = m.mean(&q);
        let zero = CalibratedThreshold {
            threshold: 0.0,
            failure_rate: 0.5,
            calibration_count: 10,
            quantile_index: 6,
        };
        let i0 = prediction_interval(&m, &zero, &q);
        assert_eq!(i0.lo, mean);
        assert_eq!(i0.hi, mean);
        let inf = CalibratedThreshold {
            threshold: f64::INFINITY,
            ..zero
        };
        let ii = prediction_interval(&m, &inf, &q);
        assert!(ii.is_unbounded());
        assert!(ii.contains(1e9));
    }

    #[test]
    fn interval_centered_on_mean() {
        let m = toy_model();
        let q = Vector2::new(0.1, 0.8);
        let thr = CalibratedThreshold {
            threshold: 0.078,
            failure_rate: 0.15,
            calibration_count: 210,
            quantile_index: 180,
        };
        let iv = prediction_interval(&m, &thr, &q);
        let mean = m.mean(&q);
        assert_relative_eq!(iv.lo, mean - 0.078, max_relative = 1e-12);
        assert_relative_eq!(iv.hi, mean + 0.078, max_relative = 1e-12);
        assert_relative_eq!(iv.width(), 0.156, max_relative = 1e-12);
    }

    #[test]
    fn coverage_extremes() {
        let m = toy_model();
        let test = vec![
            Observation { location: [0.4, 0.4], elevation: 0.9 },
            Observation { location: [0.6, 0.2], elevation: -0.5 },
        ];
        let inf = CalibratedThreshold {
            threshold: f64::INFINITY,
            failure_rate: 0.1,
            calibration_count: 4,
            quantile_index: 5,
        };
        assert_eq!(empirical_coverage(&m, &inf, &test).unwrap(), 1.0);
        let zero = CalibratedThreshold {
            threshold: 0.0,
            ..inf
        };
        assert_eq!(empirical_coverage(&m, &zero, &test).unwrap(), 0.0);
        assert!(empirical_coverage(&m, &zero, &[]).is_err());
    }

    #[test]
    fn z_score_for_fifteen_percent() {
        let z = inverse_normal_cdf(1.0 - 0.15 / 2.0);
        assert!((z - 1.4395).abs() < 1e-3, "z = {z}");
        assert!(inverse_normal_cdf(0.5).abs() < 1e-9);
        assert_relative_eq!(
            inverse_normal_cdf(0.975),
            1.959964,
            max_relative = 1e-5
        );
    }

    #[test]
    fn width_comparison_zero_variance_and_direction() {
        let grid = TerrainGrid::generate(&TerrainSpec {
            style: TerrainStyle::Hilly,
            extent: [6.0, 6.0],
            resolution: 50,
            height_band: [0.0, 0.7],
            seed: 10,
        })
        .unwrap();
        let obs = sample_observations(&grid, 700, 0.01, 1).unwrap();
        let (train, cal) = split_dataset(&obs, 0.7, 2);
        let m = fit_gp(&train, KernelConfig::default(), 1e-4).unwrap();
        let scores = nonconformity_scores(&m, &cal).unwrap();
        let thr = calibrate_threshold(&scores, 0.15).unwrap();
        let points: Vec<Vector2<f64>> = (0..grid.resolution)
            .step_by(5)
            .flat_map(|i| {
                (0..grid.resolution)
                    .step_by(5)
                    .map(move |j| (i, j))
            })
            .map(|(i, j)| grid.cell_center(i, j))
            .collect();
        let w = interval_width_comparison(&m, &thr, &points);
        assert!(w.conformal_width > 0.0);
        assert!(w.gp_width > 0.0);
        // Degenerate point set.
        let w0 = interval_width_comparison(&m, &thr, &[]);
        assert_eq!(w0.gp_width, 0.0);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let obs: Vec<Observation> = (0..700)
            .map(|i| Observation {
                location: [i as f64, 0.0],
                elevation: 0.0,
            })
            .collect();
        let (train, cal) = split_dataset(&obs, 0.7, 123);
        assert_eq!(train.len(), 490);
        assert_eq!(cal.len(), 210);
        let (train2, _) = split_dataset(&obs, 0.7, 123);
        assert_eq!(train[0].location, train2[0].location);
    }

    #[test]
    fn per_step_rate_compounds_back() {
        let d = per_step_failure_rate(0.095, 20);
        assert_relative_eq!((1.0 - d).powi(20), 0.905, max_relative = 1e-10);
    }

    #[test]
    fn marginal_coverage_over_seeds() {
        // Lightweight version of the campaign-scale coverage check.
        let mut coverages = Vec::new();
        for seed in 0..10u64 {
            let grid = TerrainGrid::generate(&TerrainSpec {
                style: TerrainStyle::FlatRough,
                extent: [6.0, 6.0],
                resolution: 50,
                height_band: [0.0, 0.2],
                seed: 100 + seed,
            })
            .unwrap();
            let obs = sample_observations(&grid, 400, 0.01, 200 + seed).unwrap();
            let (train, cal) = split_dataset(&obs, 0.7, 300 + seed);
            let m = fit_gp(&train, KernelConfig::default(), 1e-4).unwrap();
            let scores = nonconformity_scores(&m, &cal).unwrap();
            let thr = calibrate_threshold(&scores, 0.15).unwrap();
            // Fresh noisy draws at unseen cells.
            let test = sample_observations(&grid, 2000, 0.01, 400 + seed).unwrap();
            coverages.push(empirical_coverage(&m, &thr, &test[400..]).unwrap());
        }
        let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
        assert!(mean >= 0.85 - 0.04, "mean coverage {mean}");
    }

    proptest! {
        #[test]
        fn threshold_is_permutation_invariant(mut scores in prop::collection::vec(0.0f64..1.0, 5..60), delta in 0.05f64..0.5) {
            let a = calibrate_threshold(&scores, delta).unwrap();
            scores.reverse();
            let b = calibrate_threshold(&scores, delta).unwrap();
            prop_assert_eq!(a.threshold, b.threshold);
            prop_assert_eq!(a.quantile_index, b.quantile_index);
        }

        #[test]
        fn threshold_monotone_in_failure_rate(scores in prop::collection::vec(0.0f64..1.0, 5..60), d1 in 0.05f64..0.45, gap in 0.01f64..0.4) {
            let d2 = (d1 + gap).min(0.95);
            let t1 = calibrate_threshold(&scores, d1).unwrap().threshold;
            let t2 = calibrate_threshold(&scores, d2).unwrap().threshold;
            prop_assert!(t1 >= t2);
        }
    }
}
