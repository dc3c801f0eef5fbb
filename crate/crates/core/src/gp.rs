//! Gaussian-process surrogate over low-dimensional prompts.
//!
//! Posterior mean and variance follow the standard noisy-observation form
//!
//! ```text
//! μ(p)  = ȳ + c(p,P)·(C + σ_n²I)⁻¹·(y − ȳ)
//! σ²(p) = c(p,p) − c(p,P)·(C + σ_n²I)⁻¹·c(P,p)
//! ```
//!
//! with a squared-exponential covariance and fixed hyperparameters (no
//! fitting). The prior mean is zero on scores centered by the running mean
//! ȳ of observed values; the shift is removed on output.
//!
//! The factorization of `C + σ_n²I` is cached as a lower Cholesky factor and
//! extended one border row per observation, so adding the n-th point costs
//! O(n²) instead of O(n³). If the extension (or a from-scratch build) fails,
//! a diagonal jitter ladder of 1e-10, 1e-8, 1e-6 is tried before giving up
//! with [`GpError::SingularCovariance`]; applied jitter is flagged on the
//! state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::LowDimPrompt;

/// Jitter ladder tried when the covariance factorization fails.
const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("posterior requested from a GP with no observations")]
    EmptyState,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("covariance matrix not positive definite even with jitter {max_jitter:e}")]
    SingularCovariance { max_jitter: f64 },
    #[error("observation score is not finite")]
    NonFiniteScore,
}

/// Squared-exponential covariance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_variance: f64,
    pub lengthscale: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            signal_variance: 1.0,
            lengthscale: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn new(signal_variance: f64, lengthscale: f64) -> Self {
        Self {
            signal_variance,
            lengthscale,
        }
    }
}

/// `σ_f² · exp(−‖x−y‖² / (2ℓ²))`. Symmetric, bounded by `σ_f²`.
pub fn kernel_eval(
    cfg: &KernelConfig,
    x: &LowDimPrompt,
    y: &LowDimPrompt,
) -> Result<f64, GpError> {
    if x.dim() != y.dim() {
        return Err(GpError::DimMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(kernel_raw(cfg, x.values(), y.values()))
}

fn kernel_raw(cfg: &KernelConfig, x: &[f64], y: &[f64]) -> f64 {
    let sq_dist: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    cfg.signal_variance * (-sq_dist / (2.0 * cfg.lengthscale * cfg.lengthscale)).exp()
}

/// Posterior at a query point. `variance_clamp` records how far below zero
/// the raw variance fell before being clamped (0 when no clamp was needed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
    pub variance_clamp: f64,
}

/// Serializable form of the surrogate: observations and hyperparameters.
/// The factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub kernel: KernelConfig,
    pub noise_variance: f64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub prompt: Vec<f64>,
    pub score: f64,
}

/// Immutable surrogate snapshot. [`GpState::update`] returns a new state;
/// existing snapshots stay valid and may be read concurrently.
#[derive(Debug, Clone)]
pub struct GpState {
    points: Vec<Vec<f64>>,
    scores: Vec<f64>,
    kernel: KernelConfig,
    noise_variance: f64,
    /// Diagonal jitter currently baked into the factorization (0 = none).
    jitter: f64,
    /// Lower Cholesky factor of `C + (σ_n² + jitter)·I`.
    chol_lower: DMatrix<f64>,
    /// Cached `(C + σ_n²I)⁻¹ (y − ȳ)`.
    alpha: DVector<f64>,
    score_mean: f64,
}

impl GpState {
    pub fn new(kernel: KernelConfig, noise_variance: f64) -> Self {
        Self {
            points: Vec::new(),
            scores: Vec::new(),
            kernel,
            noise_variance,
            jitter: 0.0,
            chol_lower: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            score_mean: 0.0,
        }
    }

    pub fn from_snapshot(snap: &GpSnapshot) -> Result<Self, GpError> {
        let mut state = GpState::new(snap.kernel, snap.noise_variance);
        for obs in &snap.observations {
            let prompt = LowDimPrompt::new(obs.prompt.clone())
                .map_err(|_| GpError::NonFiniteScore)?;
            state = state.update(&prompt, obs.score)?;
        }
        Ok(state)
    }

    pub fn snapshot(&self) -> GpSnapshot {
        GpSnapshot {
            kernel: self.kernel,
            noise_variance: self.noise_variance,
            observations: self
                .points
                .iter()
                .zip(&self.scores)
                .map(|(p, &s)| Observation {
                    prompt: p.clone(),
                    score: s,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// True when the factorization needed diagonal jitter to go through.
    pub fn jitter_applied(&self) -> bool {
        self.jitter > 0.0
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn observations(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points
            .iter()
            .map(|p| p.as_slice())
            .zip(self.scores.iter().copied())
    }

    /// Largest observed score, the incumbent for acquisition.
    pub fn best_score(&self) -> Option<f64> {
        self.scores.iter().copied().fold(None, |best, y| {
            Some(best.map_or(y, |b: f64| b.max(y)))
        })
    }

    /// The observation with the largest score.
    pub fn best_observation(&self) -> Option<(&[f64], f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &y) in self.scores.iter().enumerate() {
            if best.map_or(true, |(_, by)| y > by) {
                best = Some((i, y));
            }
        }
        best.map(|(i, y)| (self.points[i].as_slice(), y))
    }

    fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.len())
    }

    /// Appends one observation and refreshes the cached factorization.
    /// Prior observations are untouched; the previous state remains usable.
    pub fn update(&self, prompt: &LowDimPrompt, score: f64) -> Result<Self, GpError> {
        if !score.is_finite() {
            return Err(GpError::NonFiniteScore);
        }
        if let Some(d) = self.dim() {
            if prompt.dim() != d {
                return Err(GpError::DimMismatch {
                    expected: d,
                    got: prompt.dim(),
                });
            }
        }

        let mut next = self.clone();
        next.points.push(prompt.values().to_vec());
        next.scores.push(score);

        if !next.try_extend_factorization() {
            next.rebuild_factorization()?;
        }
        next.refresh_alpha();
        Ok(next)
    }

    /// Border extension of the Cholesky factor with the newest point.
    /// Returns false when the new diagonal entry is not safely positive.
    fn try_extend_factorization(&mut self) -> bool {
        let n = self.points.len();
        let new = &self.points[n - 1];
        let kappa = self.kernel.signal_variance + self.noise_variance + self.jitter;

        if n == 1 {
            if kappa <= 0.0 {
                return false;
            }
            self.chol_lower = DMatrix::from_element(1, 1, kappa.sqrt());
            return true;
        }

        let cross = DVector::from_iterator(
            n - 1,
            self.points[..n - 1]
                .iter()
                .map(|p| kernel_raw(&self.kernel, p, new)),
        );
        let Some(row) = self.chol_lower.solve_lower_triangular(&cross) else {
            return false;
        };
        let diag_sq = kappa - row.norm_squared();
        // Treat a nearly-singular pivot as failure so the jitter ladder runs.
        if !(diag_sq > kappa * 1e-14) {
            return false;
        }

        let mut grown = DMatrix::zeros(n, n);
        grown.view_mut((0, 0), (n - 1, n - 1)).copy_from(&self.chol_lower);
        for i in 0..n - 1 {
            grown[(n - 1, i)] = row[i];
        }
        grown[(n - 1, n - 1)] = diag_sq.sqrt();
        self.chol_lower = grown;
        true
    }

    /// From-scratch factorization, escalating the jitter ladder on failure.
    fn rebuild_factorization(&mut self) -> Result<(), GpError> {
        let n = self.points.len();
        let base = DMatrix::from_fn(n, n, |i, j| {
            let mut v = kernel_raw(&self.kernel, &self.points[i], &self.points[j]);
            if i == j {
                v += self.noise_variance;
            }
            v
        });
        let mut ladder = vec![self.jitter];
        ladder.extend(JITTER_LADDER.iter().copied().filter(|&j| j > self.jitter));
        for jitter in ladder {
            let mut m = base.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = nalgebra::Cholesky::new(m) {
                self.chol_lower = chol.unpack();
                if jitter > self.jitter {
                    log::warn!(
                        "gp: covariance factorization needed jitter {jitter:e} at n={n}"
                    );
                }
                self.jitter = jitter;
                return Ok(());
            }
        }
        Err(GpError::SingularCovariance {
            max_jitter: *JITTER_LADDER.last().expect("non-empty ladder"),
        })
    }

    fn refresh_alpha(&mut self) {
        let n = self.scores.len();
        self.score_mean = self.scores.iter().sum::<f64>() / n as f64;
        let centered = DVector::from_iterator(n, self.scores.iter().map(|y| y - self.score_mean));
        let z = self
            .chol_lower
            .solve_lower_triangular(&centered)
            .expect("factor has positive diagonal");
        self.alpha = self
            .chol_lower
            .transpose()
            .solve_upper_triangular(&z)
            .expect("factor has positive diagonal");
    }

    /// Posterior mean and variance at `p` via the cached factorization.
    pub fn posterior(&self, p: &LowDimPrompt) -> Result<Posterior, GpError> {
        if self.is_empty() {
            return Err(GpError::EmptyState);
        }
        let d = self.dim().expect("non-empty");
        if p.dim() != d {
            return Err(GpError::DimMismatch {
                expected: d,
                got: p.dim(),
            });
        }
        let n = self.points.len();
        let cross = DVector::from_iterator(
            n,
            self.points
                .iter()
                .map(|q| kernel_raw(&self.kernel, q, p.values())),
        );
        let mean = self.score_mean + cross.dot(&self.alpha);
        let v = self
            .chol_lower
            .solve_lower_triangular(&cross)
            .expect("factor has positive diagonal");
        let raw_variance = self.kernel.signal_variance - v.norm_squared();
        let (variance, variance_clamp) = if raw_variance < 0.0 {
            (0.0, -raw_variance)
        } else {
            (raw_variance, 0.0)
        };
        Ok(Posterior {
            mean,
            variance,
            variance_clamp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p(values: &[f64]) -> LowDimPrompt {
        LowDimPrompt::new(values.to_vec()).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let cfg = KernelConfig::new(2.5, 1.3);
        let x = p(&[0.4, -1.0]);
        assert_abs_diff_eq!(kernel_eval(&cfg, &x, &x).unwrap(), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn kernel_at_one_lengthscale() {
        let cfg = KernelConfig::default();
        let x = p(&[0.0]);
        let y = p(&[1.0]);
        assert_abs_diff_eq!(
            kernel_eval(&cfg, &x, &y).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(kernel_eval(&cfg, &x, &y).unwrap(), 0.606531, epsilon = 1e-6);
    }

    #[test]
    fn kernel_decays_monotonically() {
        let cfg = KernelConfig::default();
        let x = p(&[0.0]);
        let mut prev = f64::INFINITY;
        for r in 1..30 {
            let v = kernel_eval(&cfg, &x, &p(&[r as f64 * 0.5])).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn kernel_dim_mismatch() {
        let cfg = KernelConfig::default();
        assert!(kernel_eval(&cfg, &p(&[0.0]), &p(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn empty_plus_one_observation() {
        let gp = GpState::new(KernelConfig::default(), 0.0);
        assert!(gp.is_empty());
        assert!(matches!(gp.posterior(&p(&[0.0])), Err(GpError::EmptyState)));
        let gp = gp.update(&p(&[0.0, 0.0]), 0.7).unwrap();
        assert_eq!(gp.len(), 1);
    }

    #[test]
    fn noiseless_interpolation_single_point() {
        let gp = GpState::new(KernelConfig::default(), 0.0)
            .update(&p(&[1.0, -2.0]), 0.8)
            .unwrap();
        let post = gp.posterior(&p(&[1.0, -2.0])).unwrap();
        assert_abs_diff_eq!(post.mean, 0.8, epsilon = 1e-10);
        assert!(post.variance <= 1e-10);
    }

    #[test]
    fn prior_recovered_far_from_data() {
        // Scores with zero mean so the centered prior is exactly zero.
        let gp = GpState::new(KernelConfig::default(), 1e-4)
            .update(&p(&[0.0, 0.0]), 0.5)
            .unwrap()
            .update(&p(&[1.0, 0.0]), -0.5)
            .unwrap();
        let post = gp.posterior(&p(&[100.0, 100.0])).unwrap();
        assert_abs_diff_eq!(post.mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(post.variance, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn duplicate_point_with_zero_noise_is_rescued_or_rejected() {
        let gp = GpState::new(KernelConfig::default(), 0.0)
            .update(&p(&[0.5, 0.5]), 0.3)
            .unwrap();
        match gp.update(&p(&[0.5, 0.5]), 0.3) {
            Ok(next) => assert!(next.jitter_applied(), "duplicate must be flagged"),
            Err(GpError::SingularCovariance { .. }) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn update_dim_mismatch() {
        let gp = GpState::new(KernelConfig::default(), 0.0)
            .update(&p(&[0.0, 0.0]), 0.1)
            .unwrap();
        assert!(matches!(
            gp.update(&p(&[0.0]), 0.1),
            Err(GpError::DimMismatch { .. })
        ));
        assert!(matches!(
            gp.update(&p(&[0.0, 0.0]), f64::NAN),
            Err(GpError::NonFiniteScore)
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut gp = GpState::new(KernelConfig::new(1.5, 0.7), 1e-4);
        for i in 0..5 {
            gp = gp.update(&p(&[i as f64, -(i as f64)]), 0.1 * i as f64).unwrap();
        }
        let json = serde_json::to_string(&gp.snapshot()).unwrap();
        let snap: GpSnapshot = serde_json::from_str(&json).unwrap();
        let rebuilt = GpState::from_snapshot(&snap).unwrap();
        let q = p(&[0.3, 1.1]);
        let a = gp.posterior(&q).unwrap();
        let b = rebuilt.posterior(&q).unwrap();
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(a.variance, b.variance, epsilon = 1e-12);
    }

    #[test]
    fn best_observation_tracks_max() {
        let gp = GpState::new(KernelConfig::default(), 0.0)
            .update(&p(&[0.0]), 0.2)
            .unwrap()
            .update(&p(&[1.0]), 0.9)
            .unwrap()
            .update(&p(&[2.0]), 0.5)
            .unwrap();
        let (best_p, best_y) = gp.best_observation().unwrap();
        assert_eq!(best_p, &[1.0]);
        assert_eq!(best_y, 0.9);
        assert_eq!(gp.best_score(), Some(0.9));
    }
}
