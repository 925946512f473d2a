//! Prototype banks, neighbor indexes and the three classifiers: nearest
//! visual prototype, k-NN with plurality vote, and textual prototypes.
//!
//! All search is exact. Queries are processed in blocks; each block is
//! scored against the base set tile by tile with a dense f64 product and a
//! bounded per-query top-k. Ranking keys are totally ordered
//! (`(key, row index)`), so the answer never depends on the blocking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, DataError, EmbeddingDataset, Embeddings};
use crate::linalg;
use crate::par;
use crate::transform::{FitError, KooFuTransform};

/// Prototypes whose mean has a norm at or below this are degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("top_k = {top_k} exceeds the {classes} available classes")]
    TopKTooLarge { top_k: usize, classes: usize },
    #[error("k = {k} exceeds the index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("class {0} has no samples")]
    EmptyClass(u32),
    #[error("duplicate prototype label {0}")]
    DuplicateLabel(u32),
    #[error("{0} has zero norm and cannot be used with the cosine metric")]
    ZeroVector(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Visual,
    Textual,
}

/// Order of averaging and normalization when building visual prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    #[default]
    MeanThenNormalize,
    NormalizeThenMean,
}

/// Block sizes of the exact search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    /// Queries per parallel work unit.
    pub query_block: usize,
    /// Base rows scored per dense product.
    pub index_tile: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            query_block: 256,
            index_tile: 4096,
        }
    }
}

/// One retrieved row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the searched set.
    pub index: u32,
    pub label: u32,
    /// Cosine similarity (cosine metric) or Euclidean distance.
    pub score: f64,
}

fn normalize_f64(v: &mut [f64]) -> f64 {
    let norm = linalg::dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn row_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&x| x as f64).collect()
}

/// Rescales every row to unit norm, rejecting zero rows.
fn normalize_rows(vectors: &Embeddings, what: &str) -> Result<Embeddings> {
    let d = vectors.dim();
    let mut out = Vec::with_capacity(vectors.len() * d);
    for (i, row) in vectors.rows().enumerate() {
        let mut v = row_f64(row);
        if normalize_f64(&mut v) <= 0.0 {
            return Err(ClassifyError::ZeroVector(format!("{what} row {i}")));
        }
        out.extend(v.into_iter().map(|x| x as f32));
    }
    Ok(Embeddings::new(d, out)?)
}

fn sq_norms(vectors: &Embeddings) -> Vec<f64> {
    vectors
        .rows()
        .map(|r| {
            let v = row_f64(r);
            linalg::dot(&v, &v)
        })
        .collect()
}

/// Exact top-`k` rows of `base` for every query, best first.
///
/// The ranking key is `−cos` (query normalized, base rows divided by
/// their f64 norms) for the cosine metric and the squared
/// Euclidean distance otherwise; ties go to the lower base row.
fn exact_search(
    queries: &Embeddings,
    base: &Embeddings,
    base_sq_norms: &[f64],
    metric: Metric,
    k: usize,
    params: SearchParams,
) -> Vec<Vec<(f64, u32)>> {
    let d = base.dim();
    let n = base.len();
    let nq = queries.len();
    let qb = params.query_block.max(1);
    let tile = params.index_tile.max(1);
    let inv_norms: Vec<f64> = match metric {
        Metric::Cosine => base_sq_norms.iter().map(|s| 1.0 / s.sqrt()).collect(),
        Metric::Euclidean => Vec::new(),
    };
    let blocks = par::map_range(nq.div_ceil(qb), |b| {
        let lo = b * qb;
        let hi = (lo + qb).min(nq);
        let m = hi - lo;
        let mut q = Vec::with_capacity(m * d);
        let mut q_sq = Vec::with_capacity(m);
        for i in lo..hi {
            let mut v = row_f64(queries.row(i));
            if metric == Metric::Cosine {
                normalize_f64(&mut v);
            }
            q_sq.push(linalg::dot(&v, &v));
            q.extend(v);
        }
        let mut best: Vec<Vec<(f64, u32)>> = vec![Vec::with_capacity(k + 1); m];
        let mut x = vec![0.0f64; tile.min(n) * d];
        let mut scores = vec![0.0f64; m * tile.min(n)];
        for t0 in (0..n).step_by(tile) {
            let t1 = (t0 + tile).min(n);
            let tn = t1 - t0;
            for (dst, &src) in x.iter_mut().zip(&base.as_slice()[t0 * d..t1 * d]) {
                *dst = src as f64;
            }
            // SAFETY: q is m×d row-major, x holds tn×d row-major rows read as
            // its transpose (d×tn), scores is m×tn row-major.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    d,
                    tn,
                    1.0,
                    q.as_ptr(),
                    d as isize,
                    1,
                    x.as_ptr(),
                    1,
                    d as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    tn as isize,
                    1,
                );
            }
            for (qi, top) in best.iter_mut().enumerate() {
                let row = &scores[qi * tn..(qi + 1) * tn];
                for (j, &dot) in row.iter().enumerate() {
                    let idx = (t0 + j) as u32;
                    let key = match metric {
                        Metric::Cosine => -dot * inv_norms[t0 + j],
                        Metric::Euclidean => q_sq[qi] + base_sq_norms[t0 + j] - 2.0 * dot,
                    };
                    push_bounded(top, k, (key, idx));
                }
            }
        }
        best
    });
    blocks.into_iter().flatten().collect()
}

#[inline]
fn push_bounded(top: &mut Vec<(f64, u32)>, k: usize, cand: (f64, u32)) {
    let better = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if top.len() == k {
        match top.last() {
            Some(worst) if better(&cand, worst).is_lt() => {
                top.pop();
            }
            _ => return,
        }
    }
    let pos = top.partition_point(|e| better(e, &cand).is_lt());
    top.insert(pos, cand);
}

fn key_to_score(metric: Metric, key: f64) -> f64 {
    match metric {
        Metric::Cosine => -key,
        Metric::Euclidean => key.max(0.0).sqrt(),
    }
}

// ---------------------------------------------------------------------------
// prototype banks

/// Class prototypes in a declared space and metric, stored in ascending
/// class-id order so positional ties resolve by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    vectors: Embeddings,
    labels: Vec<u32>,
    metric: Metric,
    modality: Modality,
    sq_norms: Vec<f64>,
}

impl PrototypeBank {
    /// In cosine mode the prototypes are rescaled to unit norm.
    pub fn new(
        vectors: Embeddings,
        labels: Vec<u32>,
        metric: Metric,
        modality: Modality,
    ) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(ClassifyError::Invalid(format!(
                "{} labels for {} prototypes",
                labels.len(),
                vectors.len()
            )));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by_key(|&i| labels[i]);
        if let Some(w) = order.windows(2).find(|w| labels[w[0]] == labels[w[1]]) {
            return Err(ClassifyError::DuplicateLabel(labels[w[0]]));
        }
        let sorted = vectors.select(&order);
        let labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        let vectors = match metric {
            Metric::Cosine => normalize_rows(&sorted, "prototype")?,
            Metric::Euclidean => sorted,
        };
        let sq_norms = sq_norms(&vectors);
        Ok(PrototypeBank {
            vectors,
            labels,
            metric,
            modality,
            sq_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vectors(&self) -> &Embeddings {
        &self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn prototype(&self, label: u32) -> Option<&[f32]> {
        self.labels
            .binary_search(&label)
            .ok()
            .map(|i| self.vectors.row(i))
    }

    /// Bank limited to the classes in `class_set`.
    pub fn restrict(&self, class_set: &[u32]) -> Result<PrototypeBank> {
        let keep: std::collections::BTreeSet<u32> = class_set.iter().copied().collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        PrototypeBank::new(
            self.vectors.select(&rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.metric,
            self.modality,
        )
    }

    /// Maps every prototype through `transform`; zero projections are
    /// dropped with a warning in cosine mode.
    pub fn transformed(&self, transform: &KooFuTransform) -> Result<PrototypeBuild> {
        let projected = transform.apply(&self.vectors, false)?.embeddings;
        finish_bank(
            projected.rows().map(row_f64).collect(),
            self.labels.clone(),
            self.metric,
            self.modality,
        )
    }

    /// Memory held by the prototype vectors (`K · d · 4`).
    pub fn index_bytes(&self) -> u64 {
        index_bytes(self.len(), self.dim())
    }
}

/// Bytes of an f32 vector store with `n` rows of width `d`.
pub fn index_bytes(n: usize, d: usize) -> u64 {
    n as u64 * d as u64 * std::mem::size_of::<f32>() as u64
}

/// A freshly built bank plus the classes dropped as degenerate.
#[derive(Debug, Clone)]
pub struct PrototypeBuild {
    pub bank: PrototypeBank,
    pub excluded: Vec<u32>,
}

fn finish_bank(
    means: Vec<Vec<f64>>,
    labels: Vec<u32>,
    metric: Metric,
    modality: Modality,
) -> Result<PrototypeBuild> {
    let d = means.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(means.len() * d);
    let mut kept = Vec::with_capacity(labels.len());
    let mut excluded = Vec::new();
    for (mut m, label) in means.into_iter().zip(labels) {
        if metric == Metric::Cosine {
            if linalg::dot(&m, &m).sqrt() <= DEGENERATE_NORM {
                log::warn!("prototype of class {label} has zero norm; excluded");
                excluded.push(label);
                continue;
            }
            normalize_f64(&mut m);
        }
        data.extend(m.into_iter().map(|x| x as f32));
        kept.push(label);
    }
    let vectors = if d == 0 {
        return Err(ClassifyError::Invalid("no prototypes to build".into()));
    } else {
        Embeddings::new(d, data)?
    };
    Ok(PrototypeBuild {
        bank: PrototypeBank::new(vectors, kept, metric, modality)?,
        excluded,
    })
}

/// Visual prototypes: per-class means of (optionally transformed)
/// embeddings. `classes` limits the bank; by default every class with at
/// least one sample is included.
pub fn build_prototypes(
    dataset: &EmbeddingDataset,
    transform: Option<&KooFuTransform>,
    metric: Metric,
    mode: PrototypeMode,
    classes: Option<&[u32]>,
) -> Result<PrototypeBuild> {
    if let Some(t) = transform {
        if t.dim() != dataset.dim() {
            return Err(ClassifyError::DimMismatch {
                expected: t.dim(),
                found: dataset.dim(),
            });
        }
    }
    let mut counts = vec![0u64; dataset.num_classes()];
    for &l in &dataset.labels {
        counts[l as usize] += 1;
    }
    let wanted: Vec<u32> = match classes {
        Some(c) => {
            let mut c = c.to_vec();
            c.sort_unstable();
            c.dedup();
            for &l in &c {
                if counts.get(l as usize).copied().unwrap_or(0) == 0 {
                    return Err(ClassifyError::EmptyClass(l));
                }
            }
            c
        }
        None => (0..counts.len() as u32)
            .filter(|&l| counts[l as usize] > 0)
            .collect(),
    };
    if wanted.is_empty() {
        return Err(ClassifyError::Invalid("no classes with samples".into()));
    }

    // Rows entering the class means, in the output space.
    let (source, out_dim) = match (mode, transform) {
        (PrototypeMode::MeanThenNormalize, _) => (None, dataset.dim()),
        (PrototypeMode::NormalizeThenMean, Some(t)) => (
            Some(t.apply(&dataset.embeddings, true)?.embeddings),
            t.out_dim(),
        ),
        (PrototypeMode::NormalizeThenMean, None) => {
            let d = dataset.dim();
            let mut data = Vec::with_capacity(dataset.len() * d);
            for row in dataset.embeddings.rows() {
                let mut v = row_f64(row);
                normalize_f64(&mut v);
                data.extend(v.into_iter().map(|x| x as f32));
            }
            (Some(Embeddings::new(d, data)?), d)
        }
    };
    let rows = source.as_ref().unwrap_or(&dataset.embeddings);

    let slot: BTreeMap<u32, usize> = wanted.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut sums = vec![vec![0.0f64; out_dim]; wanted.len()];
    for (row, &l) in rows.rows().zip(&dataset.labels) {
        if let Some(&s) = slot.get(&l) {
            for (acc, &x) in sums[s].iter_mut().zip(row) {
                *acc += x as f64;
            }
        }
    }
    let mut means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&wanted)
        .map(|(s, &l)| {
            let n = counts[l as usize] as f64;
            s.into_iter().map(|v| v / n).collect()
        })
        .collect();

    if mode == PrototypeMode::MeanThenNormalize {
        if let Some(t) = transform {
            // T is linear: the mean of T(x − μ) is T(μ_k − μ).
            let proj = t.projection();
            let mu = t.mean();
            means = means
                .into_iter()
                .map(|m| {
                    let centered: Vec<f64> = m.iter().zip(mu.iter()).map(|(a, b)| a - b).collect();
                    (0..proj.nrows())
                        .map(|r| {
                            let row: Vec<f64> = proj.row(r).iter().copied().collect();
                            linalg::dot(&row, &centered)
                        })
                        .collect()
                })
                .collect();
        }
    }
    finish_bank(means, wanted, metric, Modality::Visual)
}

/// Groups a labeled set into per-class blocks, ascending by class id.
pub fn group_by_label(dataset: &EmbeddingDataset) -> Vec<(u32, Embeddings)> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(l, rows)| (l, dataset.embeddings.select(&rows)))
        .collect()
}

/// Textual prototypes: per class, the normalized mean of the normalized
/// prompt embeddings.
pub fn aggregate_text_prototypes(per_class: &[(u32, Embeddings)]) -> Result<PrototypeBank> {
    let d = per_class
        .first()
        .map(|(_, e)| e.dim())
        .ok_or_else(|| ClassifyError::Invalid("no classes given".into()))?;
    let mut data = Vec::with_capacity(per_class.len() * d);
    let mut labels = Vec::with_capacity(per_class.len());
    for (label, emb) in per_class {
        if emb.dim() != d {
            return Err(ClassifyError::DimMismatch {
                expected: d,
                found: emb.dim(),
            });
        }
        if emb.is_empty() {
            return Err(ClassifyError::EmptyClass(*label));
        }
        let mut mean = vec![0.0f64; d];
        for (i, row) in emb.rows().enumerate() {
            let mut v = row_f64(row);
            if normalize_f64(&mut v) <= 0.0 {
                return Err(ClassifyError::ZeroVector(format!(
                    "text embedding {i} of class {label}"
                )));
            }
            mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= emb.len() as f64);
        if normalize_f64(&mut mean) <= DEGENERATE_NORM {
            return Err(ClassifyError::ZeroVector(format!(
                "text prototype of class {label}"
            )));
        }
        data.extend(mean.into_iter().map(|x| x as f32));
        labels.push(*label);
    }
    PrototypeBank::new(
        Embeddings::new(d, data)?,
        labels,
        Metric::Cosine,
        Modality::Textual,
    )
}

/// Ranks the bank's classes for every query; `top_k` ids per query.
pub fn nvp_classify(
    queries: &Embeddings,
    bank: &PrototypeBank,
    top_k: usize,
) -> Result<Vec<Vec<u32>>> {
    nvp_classify_with(queries, bank, top_k, SearchParams::default())
}

pub fn nvp_classify_with(
    queries: &Embeddings,
    bank: &PrototypeBank,
    top_k: usize,
    params: SearchParams,
) -> Result<Vec<Vec<u32>>> {
    if queries.dim() != bank.dim() {
        return Err(ClassifyError::DimMismatch {
            expected: bank.dim(),
            found: queries.dim(),
        });
    }
    if top_k == 0 {
        return Err(ClassifyError::ZeroK);
    }
    if top_k > bank.len() {
        return Err(ClassifyError::TopKTooLarge {
            top_k,
            classes: bank.len(),
        });
    }
    let hits = exact_search(
        queries,
        &bank.vectors,
        &bank.sq_norms,
        bank.metric,
        top_k,
        params,
    );
    Ok(hits
        .into_iter()
        .map(|h| {
            h.into_iter()
                .map(|(_, i)| bank.labels[i as usize])
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// k-NN

/// All reference embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    vectors: Embeddings,
    labels: Vec<u32>,
    metric: Metric,
    sq_norms: Vec<f64>,
}

impl NeighborIndex {
    /// Rows are kept as given; cosine scores divide by the row norms, so
    /// zero rows are an error in cosine mode.
    pub fn new(vectors: Embeddings, labels: Vec<u32>, metric: Metric) -> Result<Self> {
        if labels.len() != vectors.len() {
            return Err(ClassifyError::Invalid(format!(
                "{} labels for {} index rows",
                labels.len(),
                vectors.len()
            )));
        }
        let sq_norms = sq_norms(&vectors);
        if metric == Metric::Cosine {
            if let Some(i) = sq_norms.iter().position(|&s| s <= 0.0) {
                return Err(ClassifyError::ZeroVector(format!("index row {i}")));
            }
        }
        Ok(NeighborIndex {
            vectors,
            labels,
            metric,
            sq_norms,
        })
    }

    pub fn from_dataset(ds: &EmbeddingDataset, metric: Metric) -> Result<Self> {
        Self::new(ds.embeddings.clone(), ds.labels.clone(), metric)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn vectors(&self) -> &Embeddings {
        &self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Index limited to rows whose label is in `class_set`.
    pub fn restrict(&self, class_set: &[u32]) -> Result<NeighborIndex> {
        let keep: std::collections::BTreeSet<u32> = class_set.iter().copied().collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        NeighborIndex::new(
            self.vectors.select(&rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.metric,
        )
    }

    /// Memory held by the index vectors (`N · d · 4`).
    pub fn index_bytes(&self) -> u64 {
        index_bytes(self.len(), self.dim())
    }
}

/// Output of [`knn_classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    /// Winning label per query.
    pub labels: Vec<u32>,
    /// Labels present among the neighbors, best vote first.
    pub rankings: Vec<Vec<u32>>,
    /// The `k` nearest rows per query, nearest first.
    pub neighbors: Vec<Vec<Neighbor>>,
}

pub fn knn_classify(queries: &Embeddings, index: &NeighborIndex, k: usize) -> Result<KnnResult> {
    knn_classify_with(queries, index, k, SearchParams::default())
}

pub fn knn_classify_with(
    queries: &Embeddings,
    index: &NeighborIndex,
    k: usize,
    params: SearchParams,
) -> Result<KnnResult> {
    if queries.dim() != index.dim() {
        return Err(ClassifyError::DimMismatch {
            expected: index.dim(),
            found: queries.dim(),
        });
    }
    if k == 0 {
        return Err(ClassifyError::ZeroK);
    }
    if k > index.len() {
        return Err(ClassifyError::KTooLarge {
            k,
            size: index.len(),
        });
    }
    let hits = exact_search(
        queries,
        &index.vectors,
        &index.sq_norms,
        index.metric,
        k,
        params,
    );
    let mut labels = Vec::with_capacity(hits.len());
    let mut rankings = Vec::with_capacity(hits.len());
    let mut neighbors = Vec::with_capacity(hits.len());
    for h in hits {
        let nbrs: Vec<Neighbor> = h
            .into_iter()
            .map(|(key, i)| Neighbor {
                index: i,
                label: index.labels[i as usize],
                score: key_to_score(index.metric, key),
            })
            .collect();
        let ranking = vote(&nbrs, index.metric);
        labels.push(ranking[0]);
        rankings.push(ranking);
        neighbors.push(nbrs);
    }
    Ok(KnnResult {
        labels,
        rankings,
        neighbors,
    })
}

/// Orders neighbor labels by vote count, then by summed distance (summed
/// similarity for cosine), then by class id.
pub fn vote(neighbors: &[Neighbor], metric: Metric) -> Vec<u32> {
    let mut tally: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for n in neighbors {
        let e = tally.entry(n.label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += n.score;
    }
    let mut entries: Vec<(u32, usize, f64)> =
        tally.into_iter().map(|(l, (c, s))| (l, c, s)).collect();
    entries.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| match metric {
                Metric::Cosine => b.2.total_cmp(&a.2),
                Metric::Euclidean => a.2.total_cmp(&b.2),
            })
            .then(a.0.cmp(&b.0))
    });
    entries.into_iter().map(|(l, _, _)| l).collect()
}

// ---------------------------------------------------------------------------
// bank files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub metric: Metric,
    pub modality: Modality,
    pub transform_id: Option<String>,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<prefix>.kfeb`, `<prefix>.kflb` and `<prefix>.json`.
pub fn save_bank(
    bank: &PrototypeBank,
    transform_id: Option<String>,
    prefix: impl AsRef<Path>,
) -> Result<()> {
    let prefix = prefix.as_ref();
    dataio::write_embeddings(&bank.vectors, with_ext(prefix, "kfeb"))?;
    dataio::write_labels(&bank.labels, with_ext(prefix, "kflb"))?;
    let sidecar = BankSidecar {
        metric: bank.metric,
        modality: bank.modality,
        transform_id,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| ClassifyError::Invalid(e.to_string()))?;
    std::fs::write(with_ext(prefix, "json"), json + "\n").map_err(DataError::from)?;
    Ok(())
}

pub fn load_bank(prefix: impl AsRef<Path>) -> Result<(PrototypeBank, BankSidecar)> {
    let prefix = prefix.as_ref();
    let vectors = dataio::read_embeddings(with_ext(prefix, "kfeb"))?;
    let labels = dataio::read_labels(with_ext(prefix, "kflb"))?;
    let text = std::fs::read_to_string(with_ext(prefix, "json")).map_err(DataError::from)?;
    let sidecar: BankSidecar = serde_json::from_str(&text)
        .map_err(|e| ClassifyError::Invalid(format!("bank sidecar: {e}")))?;
    let bank = PrototypeBank::new(vectors, labels, sidecar.metric, sidecar.modality)?;
    Ok((bank, sidecar))
}
