//! Accuracy metrics, the end-to-end evaluation protocol, parameter sweeps
//! and search-phase resource measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    self, build_prototypes, knn_classify, nvp_classify, Metric, NeighborIndex, PrototypeBank,
    PrototypeMode,
};
use crate::dataio::{self, EmbeddingDataset, MultiLabelGroundTruth};
use crate::stats::ScatterStats;
use crate::transform::{fit_koofu_with, ClassWeighting, FitOptions, KooFuTransform, OutDim};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ranking has width {width}, top-{k} requested")]
    WidthShortfall { width: usize, k: usize },
    #[error("{rows} rankings for {labels} ground-truth labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("{stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl EvalError {
    fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        EvalError::Stage {
            stage,
            message: err.to_string(),
        }
    }
}

/// Exact accuracy: `numerator / denominator`, with the float alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

impl Accuracy {
    /// `0/0` is reported as 0.
    pub fn new(numerator: u64, denominator: u64) -> Self {
        assert!(numerator <= denominator);
        let value = if denominator == 0 {
            0.0
        } else {
            numerator as f64 / denominator as f64
        };
        Accuracy {
            numerator,
            denominator,
            value,
        }
    }

    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

/// Fraction of rows whose ground truth is among the first `k` ranked ids.
pub fn topk_accuracy(ranked: &[Vec<u32>], gt: &[u32], k: usize) -> Result<Accuracy, EvalError> {
    if ranked.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            rows: ranked.len(),
            labels: gt.len(),
        });
    }
    let mut hits = 0u64;
    for (row, &truth) in ranked.iter().zip(gt) {
        if row.len() < k {
            return Err(EvalError::WidthShortfall {
                width: row.len(),
                k,
            });
        }
        if row[..k].contains(&truth) {
            hits += 1;
        }
    }
    Ok(Accuracy::new(hits, ranked.len() as u64))
}

/// Multi-label accuracy: row `i` is correct when its top-`k` ids meet the
/// label set of sample `i`. Rows without ground truth are not counted.
pub fn real_accuracy(
    ranked: &[Vec<u32>],
    gt: &MultiLabelGroundTruth,
    k: usize,
) -> Result<Accuracy, EvalError> {
    let mut hits = 0u64;
    let mut total = 0u64;
    for (i, row) in ranked.iter().enumerate() {
        let Some(labels) = gt.get(i) else { continue };
        if row.len() < k {
            return Err(EvalError::WidthShortfall {
                width: row.len(),
                k,
            });
        }
        total += 1;
        if row[..k].iter().any(|id| labels.contains(id)) {
            hits += 1;
        }
    }
    Ok(Accuracy::new(hits, total))
}

/// Median wall time of `repeats` runs of `f`, in seconds.
pub fn median_seconds<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

// ---------------------------------------------------------------------------
// protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Classifier {
    /// Nearest visual prototype.
    Nvp,
    /// k-nearest neighbors with plurality vote.
    Knn { k: usize },
    /// Nearest textual prototype.
    TextNvp,
}

impl Classifier {
    pub fn name(&self) -> &'static str {
        match self {
            Classifier::Nvp => "nvp",
            Classifier::Knn { .. } => "knn",
            Classifier::TextNvp => "text-nvp",
        }
    }
}

/// Candidate classes for the bank or index, with a display tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    pub tag: String,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub classifier: Classifier,
    pub metric: Metric,
    /// Ranking width for prototype classifiers.
    pub top_k: usize,
    pub class_set: Option<ClassSet>,
    pub prototype_mode: PrototypeMode,
    /// Search repetitions for the timing median.
    pub repeats: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            classifier: Classifier::Nvp,
            metric: Metric::Cosine,
            top_k: 5,
            class_set: None,
            prototype_mode: PrototypeMode::MeanThenNormalize,
            repeats: 3,
        }
    }
}

/// Data an evaluation runs against.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    /// Source of prototypes and of the k-NN index.
    pub train: &'a EmbeddingDataset,
    /// Evaluated queries; their labels are the single-label ground truth.
    pub queries: &'a EmbeddingDataset,
    pub multi_label: Option<&'a MultiLabelGroundTruth>,
    /// Untransformed textual prototypes for [`Classifier::TextNvp`].
    pub text_bank: Option<&'a PrototypeBank>,
    pub train_id: &'a str,
    pub queries_id: &'a str,
}

impl<'a> Experiment<'a> {
    pub fn new(train: &'a EmbeddingDataset, queries: &'a EmbeddingDataset) -> Self {
        Experiment {
            train,
            queries,
            multi_label: None,
            text_bank: None,
            train_id: "memory",
            queries_id: "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// `raw` for the untransformed space, `koofu` otherwise.
    pub space: String,
    pub lambda: Option<f64>,
    pub out_dim: usize,
    pub metric: Metric,
    pub classifier: String,
    pub k: usize,
    pub class_set: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerK {
    pub k: usize,
    pub accuracy: Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: Accuracy,
    pub top5: Option<Accuracy>,
    pub real_top1: Option<Accuracy>,
    pub real_top5: Option<Accuracy>,
    pub per_k: Vec<PerK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub transform_seconds: f64,
    pub build_seconds: f64,
    /// Median over `search_repeats` runs of the search phase alone.
    pub search_seconds: f64,
    pub search_repeats: usize,
    /// `rows · d · 4` of the searched vectors.
    pub index_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train: String,
    pub queries: String,
    pub transform: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub metrics: Option<Metrics>,
    pub resources: Option<Resources>,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl EvalReport {
    /// Same report without wall-clock fields, for reproducibility checks.
    pub fn without_timings(&self) -> EvalReport {
        let mut r = self.clone();
        if let Some(res) = r.resources.as_mut() {
            res.transform_seconds = 0.0;
            res.build_seconds = 0.0;
            res.search_seconds = 0.0;
        }
        r
    }
}

fn report_config(
    cfg: &ProtocolConfig,
    transform: Option<&KooFuTransform>,
    dim: usize,
) -> ReportConfig {
    ReportConfig {
        space: if transform.is_some() { "koofu" } else { "raw" }.to_string(),
        lambda: transform.map(KooFuTransform::lambda),
        out_dim: transform.map_or(dim, KooFuTransform::out_dim),
        metric: cfg.metric,
        classifier: cfg.classifier.name().to_string(),
        k: match cfg.classifier {
            Classifier::Knn { k } => k,
            _ => cfg.top_k,
        },
        class_set: cfg
            .class_set
            .as_ref()
            .map_or_else(|| "all".to_string(), |c| c.tag.clone()),
    }
}

/// Runs one evaluation: optional projection, bank or index construction
/// restricted to the class set, timed search, metrics.
pub fn run_protocol(
    exp: &Experiment<'_>,
    transform: Option<&KooFuTransform>,
    cfg: &ProtocolConfig,
) -> Result<EvalReport, EvalError> {
    let mut warnings = Vec::new();
    let dim = exp.train.dim();
    if exp.queries.dim() != dim {
        return Err(EvalError::stage(
            "load",
            format!("train D={dim}, queries D={}", exp.queries.dim()),
        ));
    }
    if let Some(t) = transform {
        if t.dim() != dim {
            return Err(EvalError::stage(
                "load",
                format!("transform D={}, embeddings D={dim}", t.dim()),
            ));
        }
    }
    if let Some(gt) = exp.multi_label {
        gt.validate(exp.queries.num_classes().max(exp.train.num_classes()))
            .map_err(|e| EvalError::stage("load", e))?;
    }
    let cosine = cfg.metric == Metric::Cosine;

    let t0 = Instant::now();
    let queries = match transform {
        Some(t) => {
            let p = t
                .apply(&exp.queries.embeddings, cosine)
                .map_err(|e| EvalError::stage("transform", e))?;
            if p.zero_rows > 0 {
                warnings.push(format!("{} query rows projected to zero", p.zero_rows));
            }
            p.embeddings
        }
        None => exp.queries.embeddings.clone(),
    };
    let train_projected = match (cfg.classifier, transform) {
        (Classifier::Knn { .. }, Some(t)) => {
            let p = t
                .apply(&exp.train.embeddings, cosine)
                .map_err(|e| EvalError::stage("transform", e))?;
            if p.zero_rows > 0 {
                warnings.push(format!("{} index rows projected to zero", p.zero_rows));
            }
            Some(p.embeddings)
        }
        _ => None,
    };
    let transform_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    enum Searcher {
        Bank(PrototypeBank),
        Index(NeighborIndex),
    }
    let searcher = match cfg.classifier {
        Classifier::Nvp => {
            let built =
                build_prototypes(exp.train, transform, cfg.metric, cfg.prototype_mode, None)
                    .map_err(|e| EvalError::stage("prototypes", e))?;
            if !built.excluded.is_empty() {
                warnings.push(format!(
                    "degenerate prototypes excluded: {:?}",
                    built.excluded
                ));
            }
            Searcher::Bank(built.bank)
        }
        Classifier::TextNvp => {
            let raw = exp
                .text_bank
                .ok_or_else(|| EvalError::Config("text-nvp needs textual prototypes".into()))?;
            let bank = match transform {
                Some(t) => {
                    let built = raw
                        .transformed(t)
                        .map_err(|e| EvalError::stage("prototypes", e))?;
                    if !built.excluded.is_empty() {
                        warnings.push(format!(
                            "degenerate prototypes excluded: {:?}",
                            built.excluded
                        ));
                    }
                    built.bank
                }
                None => raw.clone(),
            };
            Searcher::Bank(bank)
        }
        Classifier::Knn { .. } => {
            let vectors = train_projected.unwrap_or_else(|| exp.train.embeddings.clone());
            Searcher::Index(
                NeighborIndex::new(vectors, exp.train.labels.clone(), cfg.metric)
                    .map_err(|e| EvalError::stage("index", e))?,
            )
        }
    };
    let searcher = match (&cfg.class_set, searcher) {
        (None, s) => s,
        (Some(set), Searcher::Bank(b)) => Searcher::Bank(
            b.restrict(&set.ids)
                .map_err(|e| EvalError::stage("class-set", e))?,
        ),
        (Some(set), Searcher::Index(ix)) => Searcher::Index(
            ix.restrict(&set.ids)
                .map_err(|e| EvalError::stage("class-set", e))?,
        ),
    };
    let build_seconds = t1.elapsed().as_secs_f64();

    let (index_bytes, candidates) = match &searcher {
        Searcher::Bank(b) => (b.index_bytes(), b.len()),
        Searcher::Index(ix) => (ix.index_bytes(), ix.len()),
    };
    if candidates == 0 {
        return Err(EvalError::stage(
            "class-set",
            "no candidates left after restriction",
        ));
    }

    let mut ranked: Vec<Vec<u32>> = Vec::new();
    let mut failure = None;
    let search_seconds = median_seconds(cfg.repeats, || {
        let out = match &searcher {
            Searcher::Bank(b) => nvp_classify(&queries, b, cfg.top_k.min(b.len())),
            Searcher::Index(ix) => match cfg.classifier {
                Classifier::Knn { k } => knn_classify(&queries, ix, k)
                    .map(|r| r.labels.into_iter().map(|l| vec![l]).collect()),
                _ => unreachable!("index built only for k-NN"),
            },
        };
        match out {
            Ok(r) => ranked = r,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(EvalError::stage("search", e));
    }

    let width = ranked.first().map_or(0, Vec::len);
    let gt = &exp.queries.labels;
    let per_k = (1..=width)
        .map(|k| topk_accuracy(&ranked, gt, k).map(|accuracy| PerK { k, accuracy }))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = |k: usize| per_k.iter().find(|p| p.k == k).map(|p| p.accuracy);
    let real = |k: usize| -> Result<Option<Accuracy>, EvalError> {
        match exp.multi_label {
            Some(m) if width >= k => real_accuracy(&ranked, m, k).map(Some),
            _ => Ok(None),
        }
    };
    let metrics = Metrics {
        top1: topk_accuracy(&ranked, gt, 1)?,
        top5: pick(5),
        real_top1: real(1)?,
        real_top5: real(5)?,
        per_k,
    };

    Ok(EvalReport {
        config: report_config(cfg, transform, dim),
        metrics: Some(metrics),
        resources: Some(Resources {
            transform_seconds,
            build_seconds,
            search_seconds,
            search_repeats: cfg.repeats.max(1),
            index_bytes,
        }),
        provenance: Provenance {
            train: exp.train_id.to_string(),
            queries: exp.queries_id.to_string(),
            transform: transform.and_then(|t| dataio::transform_id(t).ok()),
        },
        warnings,
        error: None,
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Lambda,
    OutDim,
    K,
}

/// Fixed settings around the swept axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepBase {
    /// Shrinkage of the fitted transform; `None` evaluates the raw space
    /// (only meaningful for the `k` axis).
    pub lambda: Option<f64>,
    pub out_dim: OutDim,
    pub weighting: ClassWeighting,
    pub protocol: ProtocolConfig,
}

fn failed_report(
    exp: &Experiment<'_>,
    cfg: &ProtocolConfig,
    space: &str,
    lambda: Option<f64>,
    out_dim: usize,
    err: impl std::fmt::Display,
) -> EvalReport {
    let mut config = report_config(cfg, None, out_dim);
    config.space = space.to_string();
    config.lambda = lambda;
    EvalReport {
        config,
        metrics: None,
        resources: None,
        provenance: Provenance {
            train: exp.train_id.to_string(),
            queries: exp.queries_id.to_string(),
            transform: None,
        },
        warnings: Vec::new(),
        error: Some(err.to_string()),
    }
}

/// One report per value of `axis`. Failures are recorded in the failing
/// point's report; the remaining points still run. Out-dim sweeps fit the
/// full transform once and truncate it per point.
pub fn sweep(
    exp: &Experiment<'_>,
    stats: &ScatterStats,
    base: &SweepBase,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<EvalReport>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Config("sweep needs at least one value".into()));
    }
    let fit = |lambda: f64, out_dim: OutDim| {
        fit_koofu_with(
            stats,
            &FitOptions {
                lambda,
                out_dim,
                weighting: base.weighting,
            },
        )
    };
    let d = stats.dim();
    let mut reports = Vec::with_capacity(values.len());
    match axis {
        SweepAxis::Lambda => {
            for &lambda in values {
                let r = fit(lambda, base.out_dim)
                    .map_err(|e| EvalError::stage("fit", e))
                    .and_then(|t| run_protocol(exp, Some(&t), &base.protocol));
                reports.push(r.unwrap_or_else(|e| {
                    failed_report(exp, &base.protocol, "koofu", Some(lambda), d, e)
                }));
            }
        }
        SweepAxis::OutDim => {
            let lambda = base
                .lambda
                .ok_or_else(|| EvalError::Config("out-dim sweep needs a λ".into()))?;
            let full = fit(lambda, OutDim::Full);
            for &v in values {
                let l = as_count(v)?;
                let r = full
                    .as_ref()
                    .map_err(|e| EvalError::stage("fit", e))
                    .and_then(|t| t.truncate(l).map_err(|e| EvalError::stage("truncate", e)))
                    .and_then(|t| run_protocol(exp, Some(&t), &base.protocol));
                reports.push(r.unwrap_or_else(|e| {
                    failed_report(exp, &base.protocol, "koofu", Some(lambda), l, e)
                }));
            }
        }
        SweepAxis::K => {
            let transform = base
                .lambda
                .map(|lambda| fit(lambda, base.out_dim).map_err(|e| EvalError::stage("fit", e)));
            for &v in values {
                let k = as_count(v)?;
                let cfg = ProtocolConfig {
                    classifier: Classifier::Knn { k },
                    ..base.protocol.clone()
                };
                let r = match &transform {
                    Some(Err(e)) => Err(EvalError::Stage {
                        stage: "fit",
                        message: e.to_string(),
                    }),
                    Some(Ok(t)) => run_protocol(exp, Some(t), &cfg),
                    None => run_protocol(exp, None, &cfg),
                };
                let space = if base.lambda.is_some() {
                    "koofu"
                } else {
                    "raw"
                };
                reports
                    .push(r.unwrap_or_else(|e| failed_report(exp, &cfg, space, base.lambda, d, e)));
            }
        }
    }
    Ok(reports)
}

fn as_count(v: f64) -> Result<usize, EvalError> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(EvalError::Config(format!("{v} is not a positive integer")))
    }
}

// ---------------------------------------------------------------------------
// rendering

/// One JSON object per line.
pub fn to_ndjson(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("reports serialize"));
        out.push('\n');
    }
    out
}

fn pct(a: Option<Accuracy>) -> String {
    a.map_or_else(|| "-".to_string(), |a| format!("{:.2}", a.percent()))
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = [
        "space",
        "lambda",
        "dim",
        "metric",
        "classifier",
        "k",
        "classes",
        "top1",
        "top5",
        "real1",
        "real5",
        "search_s",
        "index_MiB",
        "error",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let c = &r.config;
        let m = r.metrics.as_ref();
        let res = r.resources.as_ref();
        rows.push(vec![
            c.space.clone(),
            c.lambda.map_or_else(|| "-".into(), |l| format!("{l}")),
            c.out_dim.to_string(),
            c.metric.to_string(),
            c.classifier.clone(),
            c.k.to_string(),
            c.class_set.clone(),
            pct(m.map(|m| m.top1)),
            pct(m.and_then(|m| m.top5)),
            pct(m.and_then(|m| m.real_top1)),
            pct(m.and_then(|m| m.real_top5)),
            res.map_or_else(|| "-".into(), |r| format!("{:.4}", r.search_seconds)),
            res.map_or_else(
                || "-".into(),
                |r| format!("{:.1}", r.index_bytes as f64 / (1024.0 * 1024.0)),
            ),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:>w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Bytes of the searched vectors for a given store size.
pub fn index_bytes(rows: usize, dim: usize) -> u64 {
    classify::index_bytes(rows, dim)
}
