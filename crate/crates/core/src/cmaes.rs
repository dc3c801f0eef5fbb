//! Covariance-matrix-adaptation evolution strategy, used as the inner
//! maximizer for the acquisition function and available as a standalone
//! derivative-free optimizer.
//!
//! Maximization convention throughout. Strategy constants follow the
//! standard defaults (Hansen's 2016 tutorial); each one is spelled out next
//! to its formula in [`CmaState::new`]. The generational protocol is strict:
//! `ask` hands out exactly one population which must be returned through
//! `tell` before the next `ask`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(&'static str),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fitness at index {0} is not finite")]
    NonFiniteFitness(usize),
}

/// Errors from [`run`]: either a strategy error or a failed objective
/// evaluation with the offending candidate attached.
#[derive(Debug, Error)]
pub enum CmaRunError<E> {
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error("objective evaluation failed at candidate {candidate:?}")]
    Objective { candidate: Vec<f64>, source: E },
}

/// Optional overrides for strategy defaults.
#[derive(Debug, Clone, Default)]
pub struct CmaConfig {
    /// Population size λ; default `4 + ⌊3 ln d⌋`.
    pub population_size: Option<usize>,
    /// Per-dimension `(low, high)` box; samples are clamped into it.
    pub bounds: Option<Vec<(f64, f64)>>,
}

/// One generation in a [`run`] trace. `best_f` is the best-so-far value,
/// monotone non-decreasing across the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: u64,
    pub best_f: f64,
    pub sigma: f64,
    pub mean_norm: f64,
}

/// Renders a run trace as CSV with a `generation,best_f,sigma,mean_norm`
/// header.
pub fn history_to_csv(history: &[GenerationRecord]) -> String {
    let mut out = String::from("generation,best_f,sigma,mean_norm\n");
    for rec in history {
        out.push_str(&format!(
            "{},{:.12e},{:.6e},{:.6e}\n",
            rec.generation, rec.best_f, rec.sigma, rec.mean_norm
        ));
    }
    out
}

/// Result of a budgeted [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evaluations: usize,
    pub history: Vec<GenerationRecord>,
}

#[derive(Debug, Clone)]
pub struct CmaState {
    dim: usize,
    lambda: usize,
    mu: usize,
    weights: DVector<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    bounds: Option<Vec<(f64, f64)>>,

    mean: DVector<f64>,
    sigma: f64,
    covariance: DMatrix<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    generation: u64,
    rng: ChaCha12Rng,

    /// `B·diag(√λ_i)` of the current covariance, refreshed every generation.
    sample_transform: DMatrix<f64>,
    /// `C^{-1/2}`, used by the step-size path update.
    inv_sqrt: DMatrix<f64>,
    awaiting_tell: bool,
}

impl CmaState {
    /// Builds a strategy at `initial_mean` with step size `sigma0`.
    /// Deterministic given `seed`.
    pub fn new(
        initial_mean: &[f64],
        sigma0: f64,
        seed: u64,
        cfg: &CmaConfig,
    ) -> Result<Self, CmaError> {
        let dim = initial_mean.len();
        if dim == 0 {
            return Err(CmaError::InvalidConfig("dimension must be >= 1".into()));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(CmaError::InvalidConfig(format!(
                "sigma0 must be positive and finite, got {sigma0}"
            )));
        }
        if initial_mean.iter().any(|v| !v.is_finite()) {
            return Err(CmaError::InvalidConfig("initial mean not finite".into()));
        }
        let n = dim as f64;

        // λ = 4 + ⌊3 ln n⌋ unless overridden; μ = ⌊λ/2⌋ parents.
        let lambda = match cfg.population_size {
            Some(l) if l < 4 => {
                return Err(CmaError::InvalidConfig(format!(
                    "population size must be >= 4, got {l}"
                )))
            }
            Some(l) => l,
            None => 4 + (3.0 * n.ln()).floor() as usize,
        };
        let mu = lambda / 2;

        if let Some(bounds) = &cfg.bounds {
            if bounds.len() != dim {
                return Err(CmaError::InvalidConfig(format!(
                    "bounds cover {} dims, state has {dim}",
                    bounds.len()
                )));
            }
            if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
                return Err(CmaError::InvalidConfig("bounds must satisfy low < high".into()));
            }
        }

        // Log-rank recombination weights w_i ∝ ln(μ + 1/2) − ln i, normalized
        // to sum to 1 over the μ parents.
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = DVector::from_iterator(mu, raw.iter().map(|w| w / total));

        // Variance-effective selection mass μ_eff = 1 / Σ w_i².
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        // Step-size path: c_σ = (μ_eff + 2) / (n + μ_eff + 5).
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        // Damping: d_σ = 1 + 2·max(0, √((μ_eff−1)/(n+1)) − 1) + c_σ.
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        // Covariance path: c_c = (4 + μ_eff/n) / (n + 4 + 2 μ_eff/n).
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        // Rank-one rate: c_1 = 2 / ((n + 1.3)² + μ_eff).
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        // Rank-μ rate: c_μ = min(1 − c_1, 2(μ_eff − 2 + 1/μ_eff)/((n+2)² + μ_eff)).
        let c_mu =
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        // E‖N(0, I)‖ ≈ √n (1 − 1/(4n) + 1/(21n²)).
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Ok(Self {
            dim,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            bounds: cfg.bounds.clone(),
            mean: DVector::from_column_slice(initial_mean),
            sigma: sigma0,
            covariance: DMatrix::identity(dim, dim),
            path_sigma: DVector::zeros(dim),
            path_c: DVector::zeros(dim),
            generation: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
            sample_transform: DMatrix::identity(dim, dim),
            inv_sqrt: DMatrix::identity(dim, dim),
            awaiting_tell: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population_size(&self) -> usize {
        self.lambda
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    pub fn weights(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Samples λ candidates `x ~ mean + σ·N(0, C)`, clamped into the bounds
    /// when configured. Errs if the previous population was never told back.
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>, CmaError> {
        if self.awaiting_tell {
            return Err(CmaError::ProtocolViolation(
                "ask called twice without an intervening tell",
            ));
        }
        let mut population = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_iterator(
                self.dim,
                (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)),
            );
            let mut x = &self.mean + self.sigma * &self.sample_transform * z;
            if let Some(bounds) = &self.bounds {
                for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
                    *v = v.clamp(*lo, *hi);
                }
            }
            population.push(x.iter().copied().collect());
        }
        self.awaiting_tell = true;
        Ok(population)
    }

    /// Consumes fitnesses (maximization) for the population from the last
    /// `ask` and performs the generation update: weighted recombination,
    /// both evolution paths, rank-one + rank-μ covariance update, and
    /// cumulative step-size adaptation.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<(), CmaError> {
        if !self.awaiting_tell {
            return Err(CmaError::ProtocolViolation("tell called without ask"));
        }
        if candidates.len() != self.lambda {
            return Err(CmaError::LengthMismatch {
                expected: self.lambda,
                got: candidates.len(),
            });
        }
        if fitnesses.len() != candidates.len() {
            return Err(CmaError::LengthMismatch {
                expected: candidates.len(),
                got: fitnesses.len(),
            });
        }
        if let Some(i) = fitnesses.iter().position(|f| !f.is_finite()) {
            return Err(CmaError::NonFiniteFitness(i));
        }
        for (i, c) in candidates.iter().enumerate() {
            if c.len() != self.dim {
                return Err(CmaError::LengthMismatch {
                    expected: self.dim,
                    got: candidates[i].len(),
                });
            }
        }

        // Rank by fitness, best first. Stable sort keeps ties deterministic.
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| fitnesses[b].partial_cmp(&fitnesses[a]).expect("finite"));

        let old_mean = self.mean.clone();
        // y_i = (x_i − m) / σ for the μ selected candidates.
        let selected_steps: Vec<DVector<f64>> = order[..self.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / self.sigma)
            .collect();
        let mut step_w = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&selected_steps) {
            step_w += *w * y;
        }

        self.mean = &old_mean + self.sigma * &step_w;

        // p_σ ← (1−c_σ) p_σ + √(c_σ(2−c_σ)μ_eff) C^{-1/2} y_w
        self.path_sigma = (1.0 - self.c_sigma) * &self.path_sigma
            + (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt() * &self.inv_sqrt * &step_w;

        // Stall indicator h_σ gates the rank-one path when σ is blowing up.
        let normalizer = (1.0 - (1.0 - self.c_sigma).powi(2 * (self.generation as i32 + 1))).sqrt();
        let path_sigma_norm = self.path_sigma.norm();
        let h_sigma = if path_sigma_norm / normalizer
            < (1.4 + 2.0 / (self.dim as f64 + 1.0)) * self.chi_n
        {
            1.0
        } else {
            0.0
        };

        // p_c ← (1−c_c) p_c + h_σ √(c_c(2−c_c)μ_eff) y_w
        self.path_c = (1.0 - self.c_c) * &self.path_c
            + h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt() * &step_w;

        // Rank-μ term: Σ w_i y_i y_iᵀ over the selected candidates.
        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in self.weights.iter().zip(&selected_steps) {
            rank_mu += *w * y * y.transpose();
        }

        // C ← (1 − c_1 − c_μ) C + c_1 (p_c p_cᵀ + δ(h_σ) C) + c_μ Σ w_i y_i y_iᵀ
        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        self.covariance = (1.0 - self.c_1 - self.c_mu + self.c_1 * delta_h) * &self.covariance
            + self.c_1 * &self.path_c * self.path_c.transpose()
            + self.c_mu * rank_mu;

        // σ ← σ·exp((c_σ/d_σ)(‖p_σ‖/χ_n − 1))
        self.sigma *=
            ((self.c_sigma / self.d_sigma) * (path_sigma_norm / self.chi_n - 1.0)).exp();

        self.refresh_eigen_cache();
        self.generation += 1;
        self.awaiting_tell = false;
        Ok(())
    }

    /// Symmetrizes the covariance, floors its eigenvalues (condition cap
    /// 1e14) and rebuilds the sampling and whitening transforms.
    fn refresh_eigen_cache(&mut self) {
        self.covariance = (&self.covariance + self.covariance.transpose()) * 0.5;
        let eigen = nalgebra::SymmetricEigen::new(self.covariance.clone());
        let max_eig = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let floor = if max_eig > 0.0 { max_eig * 1e-14 } else { 1.0 };
        let floored = eigen.eigenvalues.map(|v| v.max(floor));

        let b = &eigen.eigenvectors;
        let sqrt_d = DMatrix::from_diagonal(&floored.map(f64::sqrt));
        let inv_sqrt_d = DMatrix::from_diagonal(&floored.map(|v| 1.0 / v.sqrt()));
        self.sample_transform = b * &sqrt_d;
        self.inv_sqrt = b * inv_sqrt_d * b.transpose();
        self.covariance = b * DMatrix::from_diagonal(&floored) * b.transpose();
        self.covariance = (&self.covariance + self.covariance.transpose()) * 0.5;
    }
}

/// Runs the strategy against `objective` (maximized) until the evaluation
/// budget cannot fit another full population.
///
/// The best-so-far trace in the outcome history is monotone non-decreasing
/// and the objective is called at most `budget_evals` times. Objective
/// failures abort the run with the offending candidate attached.
pub fn run<F, E>(
    mut objective: F,
    initial_mean: &[f64],
    sigma0: f64,
    budget_evals: usize,
    seed: u64,
    cfg: &CmaConfig,
) -> Result<RunOutcome, CmaRunError<E>>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let mut state = CmaState::new(initial_mean, sigma0, seed, cfg)?;
    if budget_evals < state.population_size() {
        return Err(CmaError::InvalidConfig(format!(
            "budget {budget_evals} is below one population of {}",
            state.population_size()
        ))
        .into());
    }

    let mut best_x: Option<Vec<f64>> = None;
    let mut best_f = f64::NEG_INFINITY;
    let mut evaluations = 0usize;
    let mut history = Vec::new();

    while evaluations + state.population_size() <= budget_evals {
        let candidates = state.ask()?;
        let mut fitnesses = Vec::with_capacity(candidates.len());
        for cand in &candidates {
            match objective(cand) {
                Ok(f) => fitnesses.push(f),
                Err(source) => {
                    return Err(CmaRunError::Objective {
                        candidate: cand.clone(),
                        source,
                    })
                }
            }
        }
        evaluations += candidates.len();
        for (cand, &f) in candidates.iter().zip(&fitnesses) {
            if f > best_f {
                best_f = f;
                best_x = Some(cand.clone());
            }
        }
        state.tell(&candidates, &fitnesses)?;
        history.push(GenerationRecord {
            generation: state.generation(),
            best_f,
            sigma: state.sigma(),
            mean_norm: state.mean.norm(),
        });
    }

    Ok(RunOutcome {
        best_x: best_x.expect("at least one generation ran"),
        best_f,
        evaluations,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn default_population_size_d10() {
        let state = CmaState::new(&[0.0; 10], 1.0, 0, &CmaConfig::default()).unwrap();
        assert_eq!(state.population_size(), 10);
        assert_eq!(state.weights().len(), 5);
        let sum: f64 = state.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_rejected() {
        assert!(matches!(
            CmaState::new(&[0.0; 3], 0.0, 0, &CmaConfig::default()),
            Err(CmaError::InvalidConfig(_))
        ));
    }

    #[test]
    fn same_seed_same_first_population() {
        let mut a = CmaState::new(&[1.0; 4], 0.7, 9, &CmaConfig::default()).unwrap();
        let mut b = CmaState::new(&[1.0; 4], 0.7, 9, &CmaConfig::default()).unwrap();
        assert_eq!(a.ask().unwrap(), b.ask().unwrap());
    }

    #[test]
    fn tiny_sigma_concentrates_candidates() {
        let mean = [0.3, -0.8, 2.0];
        let mut state = CmaState::new(&mean, 1e-12, 4, &CmaConfig::default()).unwrap();
        for cand in state.ask().unwrap() {
            for (c, m) in cand.iter().zip(&mean) {
                assert!((c - m).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn double_ask_is_protocol_error() {
        let mut state = CmaState::new(&[0.0; 2], 1.0, 0, &CmaConfig::default()).unwrap();
        state.ask().unwrap();
        assert!(matches!(
            state.ask(),
            Err(CmaError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn tell_without_ask_is_protocol_error() {
        let mut state = CmaState::new(&[0.0; 2], 1.0, 0, &CmaConfig::default()).unwrap();
        assert!(matches!(
            state.tell(&[], &[]),
            Err(CmaError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut state = CmaState::new(&[0.0; 2], 1.0, 0, &CmaConfig::default()).unwrap();
        let pop = state.ask().unwrap();
        let short = vec![0.0; pop.len() - 1];
        assert!(matches!(
            state.tell(&pop, &short),
            Err(CmaError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_fitness_rejected() {
        let mut state = CmaState::new(&[0.0; 2], 1.0, 0, &CmaConfig::default()).unwrap();
        let pop = state.ask().unwrap();
        let mut fs: Vec<f64> = pop.iter().map(|c| sphere(c)).collect();
        fs[1] = f64::NAN;
        assert!(matches!(state.tell(&pop, &fs), Err(CmaError::NonFiniteFitness(1))));
    }

    #[test]
    fn equal_fitness_barely_moves_mean() {
        let mut state = CmaState::new(&[0.0; 5], 0.5, 3, &CmaConfig::default()).unwrap();
        let pop = state.ask().unwrap();
        let fs = vec![1.0; pop.len()];
        state.tell(&pop, &fs).unwrap();
        let shift: f64 = state.mean().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(shift <= 0.5, "mean shift {shift} exceeds sigma");
    }

    #[test]
    fn generation_counts_and_protocol_reset() {
        let mut state = CmaState::new(&[0.0; 2], 1.0, 5, &CmaConfig::default()).unwrap();
        for _ in 0..3 {
            let pop = state.ask().unwrap();
            let fs: Vec<f64> = pop.iter().map(|c| sphere(c)).collect();
            state.tell(&pop, &fs).unwrap();
        }
        assert_eq!(state.generation(), 3);
    }

    #[test]
    fn bounds_are_enforced_on_samples() {
        let cfg = CmaConfig {
            bounds: Some(vec![(-0.5, 0.5); 3]),
            ..Default::default()
        };
        let mut state = CmaState::new(&[0.0; 3], 5.0, 8, &cfg).unwrap();
        for cand in state.ask().unwrap() {
            assert!(cand.iter().all(|v| (-0.5..=0.5).contains(v)));
        }
    }

    #[test]
    fn quick_sphere_descent_2d() {
        let out = run(
            |x| Ok::<f64, Infallible>(sphere(x)),
            &[2.0, -1.5],
            1.0,
            2000,
            7,
            &CmaConfig::default(),
        )
        .unwrap();
        assert!(out.best_f > -1e-10, "best_f = {}", out.best_f);
        assert!(out.evaluations <= 2000);
        // Best-so-far trace is monotone.
        for pair in out.history.windows(2) {
            assert!(pair[1].best_f >= pair[0].best_f);
        }
    }

    #[test]
    fn run_budget_below_population_rejected() {
        let err = run(
            |x| Ok::<f64, Infallible>(sphere(x)),
            &[0.0; 10],
            1.0,
            5,
            0,
            &CmaConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CmaRunError::Cma(CmaError::InvalidConfig(_))));
    }

    #[test]
    fn objective_failure_carries_candidate() {
        let err = run(
            |_x| Err::<f64, &str>("endpoint down"),
            &[0.0; 2],
            1.0,
            100,
            0,
            &CmaConfig::default(),
        )
        .unwrap_err();
        match err {
            CmaRunError::Objective { candidate, source } => {
                assert_eq!(candidate.len(), 2);
                assert_eq!(source, "endpoint down");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn history_csv_shape() {
        let out = run(
            |x| Ok::<f64, Infallible>(sphere(x)),
            &[1.0, 1.0],
            0.5,
            60,
            1,
            &CmaConfig::default(),
        )
        .unwrap();
        let csv = history_to_csv(&out.history);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "generation,best_f,sigma,mean_norm");
        assert_eq!(lines.len(), out.history.len() + 1);
    }
}
