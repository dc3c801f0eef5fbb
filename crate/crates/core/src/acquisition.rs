//! Expected improvement over the GP posterior, and proposal of the next
//! low-dimensional prompt by maximizing it with CMA-ES.
//!
//! EI is the Gaussian closed form of `E[max{0, F(p) − f*}]`:
//! `(μ−f*)·Φ(z) + σ·φ(z)` with `z = (μ−f*)/σ`, degenerating to
//! `max(0, μ−f*)` at σ = 0. Tests keep a Monte-Carlo estimate of the
//! expectation alongside as an independent check.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use thiserror::Error;

use crate::cmaes::{self, CmaConfig, CmaRunError};
use crate::gp::{GpError, GpState};
use crate::seeds;
use crate::types::LowDimPrompt;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("search box: {0}")]
    InvalidBox(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("inner optimizer: {0}")]
    Cma(#[from] cmaes::CmaError),
}

/// Per-dimension bounds for the prompt search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchBox {
    bounds: Vec<(f64, f64)>,
}

impl SearchBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self, AcquisitionError> {
        if bounds.is_empty() {
            return Err(AcquisitionError::InvalidBox("no dimensions".into()));
        }
        for (i, (lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(AcquisitionError::InvalidBox(format!(
                    "dimension {i}: low {lo}, high {hi}"
                )));
            }
        }
        Ok(Self { bounds })
    }

    /// `[-half_width, half_width]` in every dimension.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self, AcquisitionError> {
        Self::new(vec![(-half_width, half_width); dim])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(&self.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| (*lo..=*hi).contains(v))
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|(lo, hi)| Uniform::new_inclusive(*lo, *hi).expect("valid box").sample(rng))
            .collect()
    }

    /// Mean per-dimension width, used to scale the inner optimizer's step.
    fn mean_width(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / self.bounds.len() as f64
    }
}

/// Standard normal density.
fn normal_pdf(z: f64) -> f64 {
    (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form expected improvement of a Gaussian `N(mean, variance)` over
/// `incumbent`. Always non-negative.
pub fn expected_improvement(
    mean: f64,
    variance: f64,
    incumbent: f64,
) -> Result<f64, AcquisitionError> {
    if !mean.is_finite() || !incumbent.is_finite() || !variance.is_finite() || variance < 0.0 {
        return Err(AcquisitionError::NonFinite(format!(
            "mean={mean}, variance={variance}, incumbent={incumbent}"
        )));
    }
    let gain = mean - incumbent;
    if variance == 0.0 {
        return Ok(gain.max(0.0));
    }
    let sd = variance.sqrt();
    let z = gain / sd;
    Ok((gain * normal_cdf(z) + sd * normal_pdf(z)).max(0.0))
}

/// Inputs for one proposal step. `incumbent` is derived from the GP so it
/// always equals the best observed score.
#[derive(Debug, Clone)]
pub struct AcquisitionContext<'a> {
    pub gp: &'a GpState,
    pub incumbent: f64,
    pub search_box: &'a SearchBox,
    pub cma_budget: usize,
    pub seed: u64,
}

impl<'a> AcquisitionContext<'a> {
    pub fn new(
        gp: &'a GpState,
        search_box: &'a SearchBox,
        cma_budget: usize,
        seed: u64,
    ) -> Result<Self, AcquisitionError> {
        let incumbent = gp.best_score().ok_or(GpError::EmptyState)?;
        Ok(Self {
            gp,
            incumbent,
            search_box,
            cma_budget,
            seed,
        })
    }

    /// EI of the GP posterior at `p`.
    pub fn ei_at(&self, p: &LowDimPrompt) -> Result<f64, AcquisitionError> {
        let post = self.gp.posterior(p)?;
        expected_improvement(post.mean, post.variance, self.incumbent)
    }
}

/// Maximizes EI with two seeded CMA-ES runs — one from the box center, one
/// restarted at the incumbent's location — and returns the best candidate
/// either run sampled. Deterministic given the context seed.
pub fn propose_next(ctx: &AcquisitionContext<'_>) -> Result<LowDimPrompt, AcquisitionError> {
    let box_dim = ctx.search_box.dim();
    let cma_cfg = CmaConfig {
        bounds: Some(ctx.search_box.bounds().to_vec()),
        ..Default::default()
    };
    let sigma0 = 0.3 * ctx.search_box.mean_width();

    let incumbent_start: Vec<f64> = {
        let (p, _) = ctx.gp.best_observation().ok_or(GpError::EmptyState)?;
        let mut start = p.to_vec();
        if start.len() != box_dim {
            return Err(GpError::DimMismatch {
                expected: box_dim,
                got: start.len(),
            }
            .into());
        }
        ctx.search_box.clamp(&mut start);
        start
    };

    let starts = [ctx.search_box.center(), incumbent_start];
    let per_run = (ctx.cma_budget / starts.len()).max(1);

    let mut best: Option<(Vec<f64>, f64)> = None;
    for (i, start) in starts.iter().enumerate() {
        let outcome = cmaes::run(
            |x| {
                let p = LowDimPrompt::new(x.to_vec())
                    .map_err(|e| AcquisitionError::NonFinite(e.to_string()))?;
                ctx.ei_at(&p)
            },
            start,
            sigma0,
            per_run,
            seeds::derive(ctx.seed, i as u64),
            &cma_cfg,
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(CmaRunError::Objective { source, .. }) => return Err(source),
            Err(CmaRunError::Cma(e)) => return Err(e.into()),
        };
        if best.as_ref().map_or(true, |(_, f)| outcome.best_f > *f) {
            best = Some((outcome.best_x, outcome.best_f));
        }
    }

    let (x, _) = best.expect("at least one run");
    Ok(LowDimPrompt::new(x).expect("candidates are finite"))
}
