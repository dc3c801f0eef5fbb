//! Fixed, seeded random projection from the low-dimensional search space to
//! the soft-embedding space.
//!
//! Entries are i.i.d. uniform on [-1, 1] drawn from a ChaCha stream, so the
//! same `(d, D, seed)` always reproduces the same matrix bit for bit. The
//! matrix is immutable for the lifetime of a run; runs persist it to disk so
//! a resumed run searches in the identical embedding space.
//!
//! With `e = pᵀA`, squared distances scale by `E‖A(p−q)‖² = (D/3)·‖p−q‖²`
//! (each entry has variance 1/3), so distortion statistics are normalized by
//! `√(D/3)` to center honest reports at 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::par::batch_map;
use crate::types::{EmbeddingShape, LowDimPrompt, SoftEmbedding};

/// File magic for the persisted matrix format.
const MAGIC: &[u8; 4] = b"BLDA";
/// Current version of the persisted matrix format.
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid dimensions d={d}, D={big_d}: need 1 <= d < D")]
    InvalidDims { d: usize, big_d: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("need at least 2 sample pairs, got {0}")]
    TooFewPairs(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad matrix file: {0}")]
    Format(String),
}

/// The fixed d x D projection matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: Vec<f64>,
    d: usize,
    big_d: usize,
    seed: u64,
}

/// Builds a projection matrix with entries uniform on [-1, 1].
///
/// Reproducible: the same `(d, big_d, seed)` yields bit-identical entries.
pub fn new_projection(d: usize, big_d: usize, seed: u64) -> Result<ProjectionMatrix, ProjectionError> {
    if d == 0 || big_d == 0 || d >= big_d {
        return Err(ProjectionError::InvalidDims { d, big_d });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f64, 1.0).expect("static bounds");
    let entries = (0..d * big_d).map(|_| dist.sample(&mut rng)).collect();
    Ok(ProjectionMatrix {
        entries,
        d,
        big_d,
        seed,
    })
}

impl ProjectionMatrix {
    pub fn d(&self) -> usize {
        self.d
    }

    /// The embedding-space dimension D.
    pub fn big_d(&self) -> usize {
        self.big_d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major entries, length `d * D`.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.big_d..(i + 1) * self.big_d]
    }

    /// Computes `e = pᵀA` without the token split. Length `D`.
    pub fn project_flat(&self, p: &LowDimPrompt) -> Result<Vec<f64>, ProjectionError> {
        if p.dim() != self.d {
            return Err(ProjectionError::DimMismatch(format!(
                "prompt dim {} != matrix d {}",
                p.dim(),
                self.d
            )));
        }
        let mut e = vec![0.0; self.big_d];
        for (i, &pi) in p.values().iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            for (ej, aj) in e.iter_mut().zip(self.row(i)) {
                *ej += pi * aj;
            }
        }
        Ok(e)
    }

    /// Writes the matrix in the persistable binary layout: magic `BLDA`,
    /// version, d, D (u32 LE), seed (u64 LE), then row-major f64 LE entries.
    pub fn save(&self, path: &Path) -> Result<(), ProjectionError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.big_d as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in &self.entries {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a matrix written by [`ProjectionMatrix::save`].
    pub fn load(path: &Path) -> Result<Self, ProjectionError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ProjectionError::Format(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(ProjectionError::Format(format!(
                "unsupported version {version}"
            )));
        }
        r.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let big_d = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        if d == 0 || big_d == 0 || d >= big_d {
            return Err(ProjectionError::Format(format!(
                "invalid dims in file: d={d}, D={big_d}"
            )));
        }
        let mut entries = Vec::with_capacity(d * big_d);
        let mut f64buf = [0u8; 8];
        for _ in 0..d * big_d {
            r.read_exact(&mut f64buf)?;
            entries.push(f64::from_le_bytes(f64buf));
        }
        // Must be exactly at EOF.
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(ProjectionError::Format("trailing bytes".into()));
        }
        Ok(Self {
            entries,
            d,
            big_d,
            seed,
        })
    }
}

/// Projects `p` to soft-token embeddings: `e = pᵀA`, split in order into
/// `shape.n_tokens` chunks of `shape.hidden_dim`.
///
/// Linear in `p`: `project(αp + βq) = α·project(p) + β·project(q)`.
pub fn project(
    matrix: &ProjectionMatrix,
    p: &LowDimPrompt,
    shape: EmbeddingShape,
) -> Result<SoftEmbedding, ProjectionError> {
    if shape.total() != matrix.big_d() {
        return Err(ProjectionError::DimMismatch(format!(
            "shape {}x{} = {} != matrix D {}",
            shape.n_tokens,
            shape.hidden_dim,
            shape.total(),
            matrix.big_d()
        )));
    }
    let flat = matrix.project_flat(p)?;
    SoftEmbedding::new(flat, shape)
        .map_err(|e| ProjectionError::DimMismatch(e.to_string()))
}

/// Distance-distortion statistics over random prompt pairs.
///
/// Each ratio is `‖Ap − Aq‖ / (‖p − q‖·√(D/3))`, so values near 1 mean the
/// projection preserves distances up to the expected uniform-entry scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DistortionReport {
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// Samples `sample_pairs` standard-normal prompt pairs (seeded) and reports
/// normalized pairwise-distance ratios. Identical pairs are skipped.
pub fn distortion_report(
    matrix: &ProjectionMatrix,
    sample_pairs: usize,
    seed: u64,
) -> Result<DistortionReport, ProjectionError> {
    if sample_pairs < 2 {
        return Err(ProjectionError::TooFewPairs(sample_pairs));
    }
    let d = matrix.d();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(sample_pairs);
    for _ in 0..sample_pairs {
        let p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        pairs.push((p, q));
    }

    let scale = (matrix.big_d() as f64 / 3.0).sqrt();
    let ratios: Vec<Option<f64>> = batch_map(&pairs, |(p, q)| {
        let low_dist: f64 = p
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if low_dist == 0.0 {
            return None;
        }
        let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
        let prompt = LowDimPrompt::new(diff).expect("finite by construction");
        let e = matrix.project_flat(&prompt).expect("dims match");
        let high_dist = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        Some(high_dist / (low_dist * scale))
    });

    let mut used = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for ratio in ratios.iter().flatten() {
        used += 1;
        min = min.min(*ratio);
        max = max.max(*ratio);
        sum += ratio;
    }
    if used == 0 {
        return Err(ProjectionError::TooFewPairs(0));
    }
    Ok(DistortionReport {
        pairs_used: used,
        pairs_skipped: sample_pairs - used,
        min_ratio: min,
        max_ratio: max,
        mean_ratio: sum / used as f64,
    })
}
