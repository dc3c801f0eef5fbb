//! Deterministic synthetic tasks that stand in for the live model stack, so
//! the optimization loop and the data pipeline can be exercised end to end
//! at desk scale.
//!
//! A task hides a target embedding `t` and scores any soft embedding by a
//! Gaussian bump `exp(−‖e − t‖²/(2s²))`. Each question carries a clearing
//! threshold and a unique fact token; the simulated generator emits the
//! token exactly when the bump utility clears the question's threshold, and
//! the simulated answerer is correct exactly when the token is present. The
//! resulting objective is deterministic, lives in [0, 1], and attains 1 at a
//! known reachable optimum.

use std::collections::BTreeMap;

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::{self, ProjectionMatrix};
use crate::seeds;
use crate::types::{EmbeddingShape, LowDimPrompt, McqExample, SoftEmbedding};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("embedding has dimension {got}, task target has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid task: {0}")]
    Invalid(String),
}

/// Bump width in prompt space. The embedding-space bandwidth is scaled by
/// the projection's `√(D/3)` distance factor so utility falls off on this
/// scale in the searched coordinates.
const PROMPT_SPACE_BANDWIDTH: f64 = 6.0;

/// Optima are sampled inside this half-width so the default search box
/// keeps them reachable with margin.
const OPTIMUM_HALF_WIDTH: f64 = 4.0;

/// Per-question clearing thresholds are sampled in this range.
const THRESHOLD_RANGE: (f64, f64) = (0.2, 0.8);

/// The hidden scoring landscape plus per-question oracle data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    target: Vec<f64>,
    bandwidth: f64,
    question_ids: Vec<String>,
    thresholds: Vec<f64>,
    fact_tokens: BTreeMap<String, String>,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(
        target: Vec<f64>,
        bandwidth: f64,
        question_ids: Vec<String>,
        thresholds: Vec<f64>,
        fact_tokens: BTreeMap<String, String>,
        seed: u64,
    ) -> Result<Self, SyntheticError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SyntheticError::Invalid(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if question_ids.len() != thresholds.len() {
            return Err(SyntheticError::Invalid(format!(
                "{} question ids vs {} thresholds",
                question_ids.len(),
                thresholds.len()
            )));
        }
        if thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(SyntheticError::Invalid("thresholds must lie in (0,1)".into()));
        }
        for id in &question_ids {
            if !fact_tokens.contains_key(id) {
                return Err(SyntheticError::Invalid(format!("no fact token for {id}")));
            }
        }
        Ok(Self {
            target,
            bandwidth,
            question_ids,
            thresholds,
            fact_tokens,
            seed,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.target.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn question_ids(&self) -> &[String] {
        &self.question_ids
    }

    pub fn fact_token(&self, example_id: &str) -> Option<&str> {
        self.fact_tokens.get(example_id).map(|s| s.as_str())
    }

    pub fn threshold(&self, example_id: &str) -> Option<f64> {
        self.question_ids
            .iter()
            .position(|id| id == example_id)
            .map(|i| self.thresholds[i])
    }

    /// `exp(−‖e − t‖² / (2s²))`, in (0, 1], equal to 1 exactly at `t`.
    pub fn utility(&self, embedding: &SoftEmbedding) -> Result<f64, SyntheticError> {
        let e = embedding.flat();
        if e.len() != self.target.len() {
            return Err(SyntheticError::DimMismatch {
                expected: self.target.len(),
                got: e.len(),
            });
        }
        let sq_dist: f64 = e
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((-sq_dist / (2.0 * self.bandwidth * self.bandwidth)).exp())
    }

    /// Fraction of questions whose threshold the utility clears: the exact
    /// objective value the simulator stack realizes for this embedding.
    pub fn expected_objective(&self, embedding: &SoftEmbedding) -> Result<f64, SyntheticError> {
        let u = self.utility(embedding)?;
        let cleared = self.thresholds.iter().filter(|t| u >= **t).count();
        Ok(cleared as f64 / self.thresholds.len().max(1) as f64)
    }
}

/// A complete synthetic setup: the task, its question batch, the projection
/// seed that built the hidden target, and the prompt that attains 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFixture {
    pub task: SyntheticTask,
    pub examples: Vec<McqExample>,
    pub optimum: LowDimPrompt,
    pub projection_seed: u64,
    pub d: usize,
    pub shape: EmbeddingShape,
}

impl SyntheticFixture {
    /// The projection matrix this fixture's target was built in. Runs must
    /// use the same matrix for the optimum to stay reachable.
    pub fn projection(&self) -> ProjectionMatrix {
        projection::new_projection(self.d, self.shape.total(), self.projection_seed)
            .expect("fixture dims validated at construction")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

/// Builds a reproducible fixture: `n_questions` four-option questions with
/// unique fact tokens, thresholds in [0.2, 0.8], and a hidden target
/// `t = (p†)ᵀA` for a sampled in-box optimum `p†`, guaranteeing the
/// objective reaches 1.0 at `p†`.
pub fn make_fixture(
    n_questions: usize,
    d: usize,
    shape: EmbeddingShape,
    seed: u64,
) -> Result<SyntheticFixture, SyntheticError> {
    if n_questions == 0 || d == 0 {
        return Err(SyntheticError::Invalid("empty fixture requested".into()));
    }
    let big_d = shape.total();
    if d >= big_d {
        return Err(SyntheticError::Invalid(format!(
            "d={d} must be smaller than embedding dim {big_d}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, 0));
    let mut examples = Vec::with_capacity(n_questions);
    let mut question_ids = Vec::with_capacity(n_questions);
    let mut thresholds = Vec::with_capacity(n_questions);
    let mut fact_tokens = BTreeMap::new();
    let threshold_dist =
        Uniform::new_inclusive(THRESHOLD_RANGE.0, THRESHOLD_RANGE.1).expect("static range");

    for i in 0..n_questions {
        let id = format!("q{i:04}");
        let tag: u32 = rng.random();
        let question = format!("案例 {id}（编号 {tag:08x}）：根据下述情形，正确的选项是？");
        let options: Vec<(char, String)> = ('A'..='D')
            .map(|label| (label, format!("{id} 的备选项 {label}")))
            .collect();
        // Mostly single-answer with an occasional two-label question, so the
        // exact-match rule stays exercised.
        let golden: std::collections::BTreeSet<char> = if i % 5 == 4 {
            let first = ('A'..='D').nth(rng.random_range(0..4)).unwrap();
            let mut second = first;
            while second == first {
                second = ('A'..='D').nth(rng.random_range(0..4)).unwrap();
            }
            [first, second].into_iter().collect()
        } else {
            [('A'..='D').nth(rng.random_range(0..4)).unwrap()]
                .into_iter()
                .collect()
        };
        let subset = if i % 2 == 0 { "KD" } else { "CA" };
        let example = McqExample::new(
            id.clone(),
            question,
            options,
            golden,
            Some(subset.to_string()),
            "zh",
        )
        .expect("fixture construction satisfies invariants");
        examples.push(example);

        fact_tokens.insert(id.clone(), format!("FACT-{id}-{tag:08x}"));
        question_ids.push(id);
        thresholds.push(threshold_dist.sample(&mut rng));
    }

    let projection_seed = seeds::derive(seed, 1);
    let matrix = projection::new_projection(d, big_d, projection_seed)
        .map_err(|e| SyntheticError::Invalid(e.to_string()))?;

    let optimum_dist = Uniform::new_inclusive(-OPTIMUM_HALF_WIDTH, OPTIMUM_HALF_WIDTH)
        .expect("static range");
    let optimum =
        LowDimPrompt::new((0..d).map(|_| optimum_dist.sample(&mut rng)).collect())
            .expect("finite by construction");
    let target = matrix
        .project_flat(&optimum)
        .expect("dims match by construction");

    // Distances between embeddings scale by √(D/3) relative to prompt-space
    // distances, so this bandwidth makes utility vary on a prompt-space
    // scale of PROMPT_SPACE_BANDWIDTH.
    let bandwidth = PROMPT_SPACE_BANDWIDTH * (big_d as f64 / 3.0).sqrt();

    let task = SyntheticTask::new(
        target,
        bandwidth,
        question_ids,
        thresholds,
        fact_tokens,
        seed,
    )?;

    Ok(SyntheticFixture {
        task,
        examples,
        optimum,
        projection_seed,
        d,
        shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;
    use approx::assert_abs_diff_eq;

    fn small_shape() -> EmbeddingShape {
        EmbeddingShape::new(2, 16)
    }

    #[test]
    fn utility_is_one_at_target() {
        let fixture = make_fixture(8, 4, small_shape(), 3).unwrap();
        let matrix = fixture.projection();
        let e = project(&matrix, &fixture.optimum, fixture.shape).unwrap();
        assert_abs_diff_eq!(fixture.task.utility(&e).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            fixture.task.expected_objective(&e).unwrap(),
            1.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn utility_at_one_bandwidth() {
        let task = SyntheticTask::new(
            vec![0.0, 0.0],
            2.0,
            vec!["q0".into()],
            vec![0.5],
            [("q0".to_string(), "tok".to_string())].into_iter().collect(),
            0,
        )
        .unwrap();
        let e = SoftEmbedding::new(vec![2.0, 0.0], EmbeddingShape::new(1, 2)).unwrap();
        assert_abs_diff_eq!(task.utility(&e).unwrap(), (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(task.utility(&e).unwrap(), 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn utility_strictly_decreasing_along_rays() {
        let fixture = make_fixture(4, 3, small_shape(), 11).unwrap();
        let matrix = fixture.projection();
        let base = project(&matrix, &fixture.optimum, fixture.shape).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let dir: Vec<f64> = (0..fixture.shape.total())
                .map(|_| rng.random::<f64>() - 0.5)
                .collect();
            let mut prev = f64::INFINITY;
            for step in 1..20 {
                let e: Vec<f64> = base
                    .flat()
                    .iter()
                    .zip(&dir)
                    .map(|(b, d)| b + d * step as f64 * 10.0)
                    .collect();
                let u = fixture
                    .task
                    .utility(&SoftEmbedding::new(e, fixture.shape).unwrap())
                    .unwrap();
                assert!(u < prev, "utility not decreasing along ray");
                prev = u;
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let fixture = make_fixture(2, 3, small_shape(), 1).unwrap();
        let wrong = SoftEmbedding::new(vec![0.0; 4], EmbeddingShape::new(1, 4)).unwrap();
        assert!(matches!(
            fixture.task.utility(&wrong),
            Err(SyntheticError::DimMismatch { .. })
        ));
    }

    #[test]
    fn fixture_deterministic_by_seed() {
        let a = make_fixture(6, 4, small_shape(), 42).unwrap();
        let b = make_fixture(6, 4, small_shape(), 42).unwrap();
        assert_eq!(a, b);
        let c = make_fixture(6, 4, small_shape(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixture_json_round_trip() {
        let a = make_fixture(3, 4, small_shape(), 9).unwrap();
        let b = SyntheticFixture::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thresholds_and_tokens_cover_batch() {
        let fixture = make_fixture(10, 4, small_shape(), 2).unwrap();
        for ex in &fixture.examples {
            assert!(fixture.task.fact_token(ex.id()).is_some());
            let t = fixture.task.threshold(ex.id()).unwrap();
            assert!((0.2..=0.8).contains(&t));
        }
    }

    #[test]
    fn far_prompt_scores_near_zero() {
        let fixture = make_fixture(8, 4, small_shape(), 7).unwrap();
        let matrix = fixture.projection();
        let far = LowDimPrompt::new(vec![500.0; 4]).unwrap();
        let e = project(&matrix, &far, fixture.shape).unwrap();
        assert_eq!(fixture.task.expected_objective(&e).unwrap(), 0.0);
    }
}
