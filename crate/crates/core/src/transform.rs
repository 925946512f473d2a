//! Regularized Fukunaga–Koontz transform and the classic LDA baseline.
//!
//! The transform whitens the (shrunk) within-class scatter,
//! `Z = (S_w + λI)^{-1/2}`, eigendecomposes the between-class scatter seen
//! through the whitener, `S'_b = Z S_b Z = U Γ Uᵀ`, and keeps the top `L`
//! eigenvectors: `T = U_Lᵀ Z`. An embedding is mapped as `T (x − μ)`.
//!
//! With `L = D` the projection simultaneously diagonalizes both scatters:
//! `T (S_w + λI) Tᵀ = I` and `T S_b Tᵀ = Γ`.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::dataio::{DataError, Embeddings};
use crate::linalg::{self, SortedEigen};
use crate::par;
use crate::stats::{ScatterStats, StatsError};

/// Relative eigenvalue floor for `S_w + λI`.
pub const PD_EPS: f64 = 1e-10;

const APPLY_CHUNK_ROWS: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error(
        "S_w + λI is not positive definite (smallest eigenvalue {min_eig:.6e}); \
         try λ ≥ {suggested_lambda}"
    )]
    NonPositiveEigenvalue { min_eig: f64, suggested_lambda: f64 },
    #[error("need at least 2 classes with samples, found {0}")]
    TooFewClasses(usize),
    #[error("requested {requested} discriminant directions but the rank bound is {max}")]
    RankExceeded { requested: usize, max: usize },
    #[error("output dimension {requested} not in 1..={dim}")]
    OutDimOutOfRange { requested: usize, dim: usize },
    #[error("invalid shrinkage λ = {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: transform expects D={expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid transform parts: {0}")]
    InvalidParts(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Number of retained discriminant directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutDim {
    #[default]
    Full,
    Dims(usize),
}

impl OutDim {
    fn resolve(self, dim: usize) -> Result<usize, FitError> {
        let l = match self {
            OutDim::Full => dim,
            OutDim::Dims(l) => l,
        };
        if l == 0 || l > dim {
            return Err(FitError::OutDimOutOfRange { requested: l, dim });
        }
        Ok(l)
    }
}

impl From<usize> for OutDim {
    fn from(l: usize) -> Self {
        OutDim::Dims(l)
    }
}

/// Per-class weights in the whitened between-class scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    /// `N_k`, the textbook between-class scatter.
    #[default]
    Count,
    /// Every present class weighted by the mean class size `N / K`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda: f64,
    pub out_dim: OutDim,
    pub weighting: ClassWeighting,
}

impl FitOptions {
    pub fn new(lambda: f64) -> Self {
        FitOptions {
            lambda,
            out_dim: OutDim::Full,
            weighting: ClassWeighting::Count,
        }
    }
}

/// Smallest shrinkage for which `m + λI` clears the positive-definiteness
/// floor, given the extreme eigenvalues of `m`. Zero when any positive λ
/// works.
pub fn shrinkage_floor(min_eig: f64, max_eig: f64) -> f64 {
    ((PD_EPS * max_eig - min_eig) / (1.0 - PD_EPS)).max(0.0)
}

fn clears_floor(min_eig: f64, max_eig: f64, lambda: f64) -> bool {
    min_eig + lambda > PD_EPS * (max_eig + lambda)
}

/// Two-significant-digit λ that clears the floor.
fn suggest_lambda(min_eig: f64, max_eig: f64) -> f64 {
    let mut s = linalg::ceil_two_sig(shrinkage_floor(min_eig, max_eig).max(f64::MIN_POSITIVE));
    while !clears_floor(min_eig, max_eig, s) {
        s = linalg::ceil_two_sig(s * (1.0 + 1e-12) + f64::MIN_POSITIVE);
    }
    s
}

fn check_floor(eig: &SortedEigen, lambda: f64) -> Result<(), FitError> {
    let (min_eig, max_eig) = (eig.min(), eig.max());
    if clears_floor(min_eig, max_eig, lambda) {
        Ok(())
    } else {
        Err(FitError::NonPositiveEigenvalue {
            min_eig: min_eig + lambda,
            suggested_lambda: suggest_lambda(min_eig, max_eig),
        })
    }
}

/// `(m + λI)^{-1/2}` for symmetric `m`, symmetric to the last bit.
pub fn inverse_sqrt_psd(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>, FitError> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(FitError::InvalidLambda(lambda));
    }
    let eig = linalg::eigh_desc(m);
    check_floor(&eig, lambda)?;
    let scale = eig.values.map(|e| 1.0 / (e + lambda).sqrt());
    let scaled = &eig.vectors * DMatrix::from_diagonal(&scale);
    let z = &scaled * eig.vectors.transpose();
    Ok(linalg::symmetrize(&z))
}

/// Fitted regularized Fukunaga–Koontz projection.
#[derive(Debug, Clone, PartialEq)]
pub struct KooFuTransform {
    lambda: f64,
    mean: DVector<f64>,
    whitener: DMatrix<f64>,
    rotation: DMatrix<f64>,
    gammas: DVector<f64>,
    projection: DMatrix<f64>,
    /// `projection` flattened row-major for the apply loop.
    projection_rows: Vec<f64>,
}

impl KooFuTransform {
    /// Assembles a transform from stored parts; `T = U_Lᵀ Z` is recomputed.
    pub fn from_parts(
        lambda: f64,
        mean: Vec<f64>,
        whitener: DMatrix<f64>,
        rotation: DMatrix<f64>,
        gammas: Vec<f64>,
    ) -> Result<Self, FitError> {
        let d = mean.len();
        if d == 0 {
            return Err(FitError::InvalidParts("empty mean".into()));
        }
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(FitError::InvalidLambda(lambda));
        }
        if whitener.shape() != (d, d) {
            return Err(FitError::InvalidParts(format!(
                "whitener is {:?}, expected ({d}, {d})",
                whitener.shape()
            )));
        }
        let l = rotation.ncols();
        if rotation.nrows() != d || l == 0 || l > d {
            return Err(FitError::InvalidParts(format!(
                "rotation is {:?}, expected ({d}, 1..={d})",
                rotation.shape()
            )));
        }
        if gammas.len() != l {
            return Err(FitError::InvalidParts(format!(
                "{} eigenvalues for {l} directions",
                gammas.len()
            )));
        }
        let projection = rotation.tr_mul(&whitener);
        let projection_rows = linalg::to_row_major(&projection);
        Ok(KooFuTransform {
            lambda,
            mean: DVector::from_vec(mean),
            whitener,
            rotation,
            gammas: DVector::from_vec(gammas),
            projection,
            projection_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.rotation.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn gammas(&self) -> &DVector<f64> {
        &self.gammas
    }

    /// `L × D` projection `T`.
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    /// Keeps the `l` leading directions. No refit: the rotation columns
    /// are already sorted by eigenvalue.
    pub fn truncate(&self, l: usize) -> Result<KooFuTransform, FitError> {
        if l == 0 || l > self.out_dim() {
            return Err(FitError::OutDimOutOfRange {
                requested: l,
                dim: self.out_dim(),
            });
        }
        KooFuTransform::from_parts(
            self.lambda,
            self.mean.as_slice().to_vec(),
            self.whitener.clone(),
            self.rotation.columns(0, l).into_owned(),
            self.gammas.as_slice()[..l].to_vec(),
        )
    }

    /// Maps every row `x` to `T (x − μ)`, optionally scaled to unit norm.
    pub fn apply(&self, vectors: &Embeddings, renormalize: bool) -> Result<Projected, FitError> {
        project_rows(
            &self.projection_rows,
            self.out_dim(),
            self.mean.as_slice(),
            vectors,
            renormalize,
        )
    }

    /// Violated invariants, empty when the transform is consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let g = self.gammas.as_slice();
        if g.windows(2).any(|w| w[1] > w[0]) {
            bad.push("eigenvalues are not sorted in non-increasing order".to_string());
        }
        let g1 = g.first().copied().unwrap_or(0.0).abs();
        if let Some(neg) = g.iter().find(|&&x| x < -1e-9 * g1) {
            bad.push(format!("eigenvalue {neg} below -1e-9·γ_1"));
        }
        let l = self.out_dim();
        let gram = self.rotation.tr_mul(&self.rotation);
        let ortho = (&gram - DMatrix::<f64>::identity(l, l)).norm();
        if ortho > 1e-8 {
            bad.push(format!(
                "rotation columns not orthonormal (deviation {ortho:.3e})"
            ));
        }
        let comp = (&self.projection - self.rotation.tr_mul(&self.whitener)).norm();
        if comp > 1e-10 {
            bad.push(format!("projection differs from Uᵀ Z by {comp:.3e}"));
        }
        let asym = (&self.whitener - self.whitener.transpose()).norm();
        if asym > 1e-10 {
            bad.push(format!("whitener asymmetric by {asym:.3e}"));
        }
        bad
    }
}

/// Output of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub embeddings: Embeddings,
    /// Rows that projected to zero and were left unnormalized.
    pub zero_rows: usize,
}

fn project_rows(
    projection_rows: &[f64],
    out_dim: usize,
    mean: &[f64],
    vectors: &Embeddings,
    renormalize: bool,
) -> Result<Projected, FitError> {
    let d = mean.len();
    if vectors.dim() != d {
        return Err(FitError::DimMismatch {
            expected: d,
            found: vectors.dim(),
        });
    }
    let n = vectors.len();
    let mut out = vec![0.0f32; n * out_dim];
    let zero_flags: Vec<std::sync::atomic::AtomicUsize> = (0..n.div_ceil(APPLY_CHUNK_ROWS).max(1))
        .map(|_| std::sync::atomic::AtomicUsize::new(0))
        .collect();
    par::for_each_chunk_mut(&mut out, APPLY_CHUNK_ROWS * out_dim.max(1), |ci, chunk| {
        let mut centered = vec![0.0f64; d];
        let mut row_out = vec![0.0f64; out_dim];
        let mut zeros = 0;
        for (r, dst) in chunk.chunks_exact_mut(out_dim).enumerate() {
            let src = vectors.row(ci * APPLY_CHUNK_ROWS + r);
            for ((c, &x), &m) in centered.iter_mut().zip(src).zip(mean) {
                *c = x as f64 - m;
            }
            for (o, t) in row_out.iter_mut().zip(projection_rows.chunks_exact(d)) {
                *o = linalg::dot(t, &centered);
            }
            if renormalize {
                let norm = linalg::dot(&row_out, &row_out).sqrt();
                if norm > 0.0 {
                    row_out.iter_mut().for_each(|v| *v /= norm);
                } else {
                    zeros += 1;
                }
            }
            for (o, &v) in dst.iter_mut().zip(&row_out) {
                *o = v as f32;
            }
        }
        zero_flags[ci].store(zeros, std::sync::atomic::Ordering::Relaxed);
    });
    let zero_rows = zero_flags
        .iter()
        .map(|z| z.load(std::sync::atomic::Ordering::Relaxed))
        .sum();
    if zero_rows > 0 {
        log::warn!("{zero_rows} rows projected to zero and were left unnormalized");
    }
    let embeddings = Embeddings::new(out_dim, out).map_err(|e| match e {
        DataError::NonFinite { row, col } => FitError::InvalidParts(format!(
            "projection produced a non-finite value at ({row}, {col})"
        )),
        other => FitError::InvalidParts(other.to_string()),
    })?;
    Ok(Projected {
        embeddings,
        zero_rows,
    })
}

/// Fits the regularized Fukunaga–Koontz transform with `N_k` weighting.
pub fn fit_koofu(
    stats: &ScatterStats,
    lambda: f64,
    out_dim: impl Into<OutDim>,
) -> Result<KooFuTransform, FitError> {
    fit_koofu_with(
        stats,
        &FitOptions {
            out_dim: out_dim.into(),
            ..FitOptions::new(lambda)
        },
    )
}

pub fn fit_koofu_with(stats: &ScatterStats, opts: &FitOptions) -> Result<KooFuTransform, FitError> {
    let d = stats.dim();
    let present = stats.present_classes();
    if present.len() < 2 {
        return Err(FitError::TooFewClasses(present.len()));
    }
    let l = opts.out_dim.resolve(d)?;
    let within = stats.within_scatter();
    let whitener = inverse_sqrt_psd(&within, opts.lambda)?;
    let mu = stats.global_mean()?;

    let weights = match opts.weighting {
        ClassWeighting::Count => None,
        ClassWeighting::Uniform => {
            let w = stats.total() as f64 / present.len() as f64;
            Some(vec![w; present.len()])
        }
    };
    let deviations = stats.weighted_deviations(&mu, weights.as_deref());
    let between = linalg::gram(&deviations, present.len(), d);
    let whitened_between = &whitener * between * &whitener;
    let eig = linalg::eigh_desc(&whitened_between);

    KooFuTransform::from_parts(
        opts.lambda,
        mu.as_slice().to_vec(),
        whitener,
        eig.vectors.columns(0, l).into_owned(),
        eig.values.as_slice()[..l].to_vec(),
    )
}

/// Classic LDA projection solving `S_b v = λ_gen (S_w + λI) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    mean: DVector<f64>,
    /// `L × D`, rows are the generalized eigenvectors `v_j`, normalized so
    /// that `v_jᵀ (S_w + λI) v_j = 1`.
    projection: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    projection_rows: Vec<f64>,
}

impl LdaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Maps every row `x` to `W_Lᵀ (x − μ)`.
    pub fn apply(&self, vectors: &Embeddings, renormalize: bool) -> Result<Projected, FitError> {
        project_rows(
            &self.projection_rows,
            self.out_dim(),
            self.mean.as_slice(),
            vectors,
            renormalize,
        )
    }
}

pub fn fit_lda(
    stats: &ScatterStats,
    lambda: f64,
    out_dim: usize,
) -> Result<LdaTransform, FitError> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(FitError::InvalidLambda(lambda));
    }
    let d = stats.dim();
    let present = stats.present_classes();
    if present.len() < 2 {
        return Err(FitError::TooFewClasses(present.len()));
    }
    let max = (present.len() - 1).min(d);
    if out_dim == 0 || out_dim > max {
        return Err(FitError::RankExceeded {
            requested: out_dim,
            max,
        });
    }

    let within = stats.within_scatter();
    check_floor(&linalg::eigh_desc(&within), lambda)?;
    let regularized = linalg::symmetrize(&(within + DMatrix::<f64>::identity(d, d) * lambda));
    let between = stats.between_scatter()?;
    let chol = Cholesky::new(regularized).ok_or(FitError::NonPositiveEigenvalue {
        min_eig: 0.0,
        suggested_lambda: linalg::ceil_two_sig(lambda.max(f64::MIN_POSITIVE) * 10.0),
    })?;
    let lower = chol.l();
    // C = L⁻¹ S_b L⁻ᵀ is symmetric with the generalized eigenvalues.
    let left = lower
        .solve_lower_triangular(&between)
        .expect("Cholesky factor has a positive diagonal");
    let reduced = lower
        .solve_lower_triangular(&left.transpose())
        .expect("Cholesky factor has a positive diagonal");
    let eig = linalg::eigh_desc(&reduced);

    let upper = lower.transpose();
    let mut projection = DMatrix::zeros(out_dim, d);
    for j in 0..out_dim {
        let y = eig.vectors.column(j).clone_owned();
        let mut v = upper
            .solve_upper_triangular(&y)
            .expect("Cholesky factor has a positive diagonal");
        linalg::orient(&mut v);
        projection.set_row(j, &v.transpose());
    }
    let projection_rows = linalg::to_row_major(&projection);
    Ok(LdaTransform {
        mean: stats.global_mean()?,
        projection,
        eigenvalues: DVector::from_column_slice(&eig.values.as_slice()[..out_dim]),
        projection_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{ClassTable, EmbeddingDataset};

    fn two_class_stats() -> ScatterStats {
        let ds = EmbeddingDataset::new(
            Embeddings::from_rows(2, &[[0.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]).unwrap(),
            vec![0, 0, 1, 1],
            ClassTable::numbered(2),
        )
        .unwrap();
        ScatterStats::from_dataset(&ds).unwrap()
    }

    #[test]
    fn inverse_sqrt_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 8.0]));
        let z = inverse_sqrt_psd(&m, 1.0).unwrap();
        assert!((z[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((z[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(z[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn inverse_sqrt_identity_with_tiny_lambda() {
        let z = inverse_sqrt_psd(&DMatrix::identity(2, 2), 1e-12).unwrap();
        assert!((z - DMatrix::<f64>::identity(2, 2)).norm() < 1e-11);
    }

    #[test]
    fn lambda_floor_reports_suggestion() {
        // eigenvalues −5 and 10: need λ > (1e-10·10 + 5)/(1 − 1e-10) ≈ 5
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-5.0, 10.0]));
        match inverse_sqrt_psd(&m, 1.0) {
            Err(FitError::NonPositiveEigenvalue {
                min_eig,
                suggested_lambda,
            }) => {
                assert_eq!(min_eig, -4.0);
                assert_eq!(suggested_lambda, 5.1);
                assert!(inverse_sqrt_psd(&m, suggested_lambda).is_ok());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(inverse_sqrt_psd(&m, 0.0), Err(FitError::InvalidLambda(0.0)));
    }

    #[test]
    fn two_class_direction() {
        let t = fit_koofu(&two_class_stats(), 1e-9, 1).unwrap();
        let u = t.rotation().column(0);
        let expected = [1.0 / 5f64.sqrt(), -2.0 / 5f64.sqrt()];
        let dot = (u[0] * expected[0] + u[1] * expected[1]).abs();
        assert!((dot - 1.0).abs() < 1e-10, "direction {u:?}");
        assert!(t.gammas()[0] > 0.0);
        assert!(t.check_invariants().is_empty());
    }

    #[test]
    fn fit_errors() {
        let s = two_class_stats();
        assert_eq!(
            fit_koofu(&s, 1.0, 3).unwrap_err(),
            FitError::OutDimOutOfRange {
                requested: 3,
                dim: 2
            }
        );
        let one = ScatterStats::new(2, 2);
        assert_eq!(
            fit_koofu(&one, 1.0, OutDim::Full).unwrap_err(),
            FitError::TooFewClasses(0)
        );
        assert_eq!(
            fit_lda(&s, 0.0, 2).unwrap_err(),
            FitError::RankExceeded {
                requested: 2,
                max: 1
            }
        );
    }

    #[test]
    fn lda_two_class_has_one_direction() {
        let lda = fit_lda(&two_class_stats(), 0.0, 1).unwrap();
        assert_eq!(lda.out_dim(), 1);
        assert!(lda.eigenvalues()[0] > 1e-9);
    }

    #[test]
    fn apply_centers_and_identity() {
        let d = 3;
        let mean = vec![0.5, -1.0, 2.0];
        let t = KooFuTransform::from_parts(
            1.0,
            mean.clone(),
            DMatrix::identity(d, d),
            DMatrix::identity(d, d),
            vec![1.0; d],
        )
        .unwrap();
        let x = Embeddings::from_rows(3, &[[0.5f32, -1.0, 2.0]]).unwrap();
        let out = t.apply(&x, false).unwrap();
        assert!(out.embeddings.as_slice().iter().all(|&v| v == 0.0));
        let renorm = t.apply(&x, true).unwrap();
        assert_eq!(renorm.zero_rows, 1);

        let ident = KooFuTransform::from_parts(
            1.0,
            vec![0.0; d],
            DMatrix::identity(d, d),
            DMatrix::identity(d, d),
            vec![1.0; d],
        )
        .unwrap();
        let y = Embeddings::from_rows(3, &[[0.25f32, -7.5, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(ident.apply(&y, false).unwrap().embeddings, y);
        assert!(matches!(
            ident.apply(&Embeddings::empty(2).unwrap(), false),
            Err(FitError::DimMismatch { .. })
        ));
    }

    #[test]
    fn truncate_keeps_leading_rows() {
        let t = fit_koofu(&two_class_stats(), 0.5, OutDim::Full).unwrap();
        let t1 = t.truncate(1).unwrap();
        assert_eq!(t1.projection().row(0), t.projection().row(0));
        assert!(t.truncate(3).is_err());
    }
}
