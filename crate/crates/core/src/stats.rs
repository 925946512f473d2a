//! Streaming sufficient statistics for the scatter matrices.
//!
//! Instead of the two-pass centered definitions, [`ScatterStats`] keeps
//! per-class counts, per-class sums and the raw second moment `Σ x xᵀ`.
//! Everything downstream is derived from these:
//!
//! ```text
//! μ_k = s_k / N_k                     μ = Σ_k s_k / N
//! S_w = Σ x xᵀ − Σ_k s_k s_kᵀ / N_k
//! S_b = Σ_k N_k (μ_k − μ)(μ_k − μ)ᵀ
//! ```
//!
//! Instances are mergeable, so shards can be accumulated independently and
//! reduced afterwards.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataio::{EmbeddingDataset, Embeddings};
use crate::linalg;
use crate::par;

/// Rows per partial second-moment product. Fixed so the summation order
/// does not depend on the thread count.
const CHUNK_ROWS: usize = 4096;
/// Chunks evaluated concurrently before folding into the running total.
const CHUNKS_PER_GROUP: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: stats have D={expected}, batch has D={found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("statistics are empty")]
    Empty,
    #[error("class {0} has no samples")]
    EmptyClass(u32),
}

/// Counts, per-class sums and second moment of a labeled sample, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterStats {
    dim: usize,
    counts: Vec<u64>,
    /// `K × D`, row-major.
    class_sums: Vec<f64>,
    second_moment: DMatrix<f64>,
}

impl ScatterStats {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        ScatterStats {
            dim,
            counts: vec![0; num_classes],
            class_sums: vec![0.0; num_classes * dim],
            second_moment: DMatrix::zeros(dim, dim),
        }
    }

    /// Rebuilds statistics from raw parts (used by the checkpoint reader).
    pub fn from_parts(
        counts: Vec<u64>,
        class_sums: Vec<f64>,
        second_moment: DMatrix<f64>,
    ) -> Result<Self, StatsError> {
        let dim = second_moment.nrows();
        if !second_moment.is_square() {
            return Err(StatsError::ShapeMismatch(
                "second moment is not square".into(),
            ));
        }
        if class_sums.len() != counts.len() * dim {
            return Err(StatsError::ShapeMismatch(format!(
                "class sums hold {} values, expected {}",
                class_sums.len(),
                counts.len() * dim
            )));
        }
        if second_moment != second_moment.transpose() {
            return Err(StatsError::ShapeMismatch(
                "second moment is not symmetric".into(),
            ));
        }
        Ok(ScatterStats {
            dim,
            counts,
            class_sums,
            second_moment,
        })
    }

    /// Single-pass statistics of a whole dataset.
    pub fn from_dataset(ds: &EmbeddingDataset) -> Result<Self, StatsError> {
        let mut s = ScatterStats::new(ds.dim(), ds.num_classes());
        s.accumulate(ds)?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row-major `K × D` per-class sums.
    pub fn class_sums(&self) -> &[f64] {
        &self.class_sums
    }

    pub fn class_sum(&self, k: usize) -> &[f64] {
        &self.class_sums[k * self.dim..(k + 1) * self.dim]
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    /// Class ids with at least one sample.
    pub fn present_classes(&self) -> Vec<u32> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, _)| k as u32)
            .collect()
    }

    pub fn accumulate(&mut self, batch: &EmbeddingDataset) -> Result<(), StatsError> {
        self.accumulate_rows(&batch.embeddings, &batch.labels)
    }

    /// Adds the contribution of `rows` labeled by `labels`.
    pub fn accumulate_rows(&mut self, rows: &Embeddings, labels: &[u32]) -> Result<(), StatsError> {
        if rows.dim() != self.dim {
            return Err(StatsError::DimMismatch {
                expected: self.dim,
                found: rows.dim(),
            });
        }
        if labels.len() != rows.len() {
            return Err(StatsError::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                rows.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(StatsError::LabelOutOfRange {
                label,
                num_classes: k,
            });
        }

        let d = self.dim;
        for (row, &label) in rows.rows().zip(labels) {
            self.counts[label as usize] += 1;
            let sum = &mut self.class_sums[label as usize * d..(label as usize + 1) * d];
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x as f64;
            }
        }

        let n = rows.len();
        let n_chunks = n.div_ceil(CHUNK_ROWS);
        let data = rows.as_slice();
        let mut upper = linalg::to_row_major(&self.second_moment);
        for group_start in (0..n_chunks).step_by(CHUNKS_PER_GROUP) {
            let group_len = CHUNKS_PER_GROUP.min(n_chunks - group_start);
            let partials = par::map_range(group_len, |g| {
                let c = group_start + g;
                let lo = c * CHUNK_ROWS;
                let hi = (lo + CHUNK_ROWS).min(n);
                let block: Vec<f64> = data[lo * d..hi * d].iter().map(|&x| x as f64).collect();
                linalg::gram(&block, hi - lo, d)
            });
            for p in partials {
                for i in 0..d {
                    for j in i..d {
                        upper[i * d + j] += p[(i, j)];
                    }
                }
            }
        }
        linalg::mirror_upper(&mut upper, d);
        self.second_moment = DMatrix::from_row_slice(d, d, &upper);
        Ok(())
    }

    /// Componentwise sum of two statistics over the same space.
    pub fn merge(&self, other: &ScatterStats) -> Result<ScatterStats, StatsError> {
        if self.dim != other.dim || self.num_classes() != other.num_classes() {
            return Err(StatsError::ShapeMismatch(format!(
                "cannot merge D={},K={} with D={},K={}",
                self.dim,
                self.num_classes(),
                other.dim,
                other.num_classes()
            )));
        }
        Ok(ScatterStats {
            dim: self.dim,
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
            class_sums: self
                .class_sums
                .iter()
                .zip(&other.class_sums)
                .map(|(a, b)| a + b)
                .collect(),
            second_moment: &self.second_moment + &other.second_moment,
        })
    }

    pub fn global_mean(&self) -> Result<DVector<f64>, StatsError> {
        let n = self.total();
        if n == 0 {
            return Err(StatsError::Empty);
        }
        let mut mean = DVector::zeros(self.dim);
        for k in 0..self.num_classes() {
            for (m, s) in mean.iter_mut().zip(self.class_sum(k)) {
                *m += s;
            }
        }
        Ok(mean / n as f64)
    }

    pub fn class_mean(&self, k: u32) -> Result<DVector<f64>, StatsError> {
        let count = *self
            .counts
            .get(k as usize)
            .ok_or(StatsError::LabelOutOfRange {
                label: k,
                num_classes: self.num_classes(),
            })?;
        if count == 0 {
            return Err(StatsError::EmptyClass(k));
        }
        Ok(DVector::from_iterator(
            self.dim,
            self.class_sum(k as usize).iter().map(|s| s / count as f64),
        ))
    }

    /// `K × D` matrix of class means; fails if any class is empty.
    pub fn class_means(&self) -> Result<DMatrix<f64>, StatsError> {
        let mut out = DMatrix::zeros(self.num_classes(), self.dim);
        for k in 0..self.num_classes() {
            let m = self.class_mean(k as u32)?;
            out.set_row(k, &m.transpose());
        }
        Ok(out)
    }

    /// Within-class scatter `S_w`. Empty classes contribute nothing.
    pub fn within_scatter(&self) -> DMatrix<f64> {
        let d = self.dim;
        let present = self.present_classes();
        let mut sums = Vec::with_capacity(present.len() * d);
        let mut scaled = Vec::with_capacity(present.len() * d);
        for &k in &present {
            let n_k = self.counts[k as usize] as f64;
            sums.extend_from_slice(self.class_sum(k as usize));
            scaled.extend(self.class_sum(k as usize).iter().map(|s| s / n_k));
        }
        let between_sums = linalg::cross(&sums, &scaled, present.len(), d);
        let mut out = linalg::to_row_major(&(&self.second_moment - between_sums));
        linalg::mirror_upper(&mut out, d);
        DMatrix::from_row_slice(d, d, &out)
    }

    /// Between-class scatter `S_b`.
    pub fn between_scatter(&self) -> Result<DMatrix<f64>, StatsError> {
        let mu = self.global_mean()?;
        Ok(linalg::gram(
            &self.weighted_deviations(&mu, None),
            self.present_classes().len(),
            self.dim,
        ))
    }

    /// Rows `sqrt(w_k) (μ_k − μ)` for every present class, row-major. With
    /// `weights = None`, `w_k = N_k`.
    pub(crate) fn weighted_deviations(
        &self,
        mu: &DVector<f64>,
        weights: Option<&[f64]>,
    ) -> Vec<f64> {
        let d = self.dim;
        let present = self.present_classes();
        let mut rows = Vec::with_capacity(present.len() * d);
        for (i, &k) in present.iter().enumerate() {
            let n_k = self.counts[k as usize] as f64;
            let w = weights.map_or(n_k, |w| w[i]);
            let sw = w.sqrt();
            rows.extend(
                self.class_sum(k as usize)
                    .iter()
                    .zip(mu.iter())
                    .map(|(s, m)| sw * (s / n_k - m)),
            );
        }
        rows
    }

    /// Total scatter `Σ (x − μ)(x − μ)ᵀ = Σ x xᵀ − N μ μᵀ`.
    pub fn total_scatter(&self) -> Result<DMatrix<f64>, StatsError> {
        let mu = self.global_mean()?;
        let n = self.total() as f64;
        Ok(&self.second_moment - (&mu * mu.transpose()) * n)
    }
}
