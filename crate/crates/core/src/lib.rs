//! Discriminative whitening of embedding spaces.
//!
//! `koofu-core` learns a regularized Fukunaga–Koontz projection (whitened
//! linear discriminant analysis) from labeled embeddings and evaluates
//! nearest-prototype, k-nearest-neighbor and textual-prototype
//! classification in the original and the projected space.
//!
//! The pipeline is:
//!
//! 1. accumulate [`stats::ScatterStats`] in one streaming, mergeable pass,
//! 2. fit a [`transform::KooFuTransform`] (`T = U_Lᵀ Z`, `Z = (S_w + λI)^{-1/2}`),
//! 3. map embeddings with [`transform::KooFuTransform::apply`],
//! 4. classify with [`classify`] and score with [`eval`].
//!
//! Data-parallel loops (scatter accumulation, projection, exact search) use
//! rayon when the `parallel` feature is enabled (default) and fall back to
//! plain iterators otherwise. Results are bitwise identical either way.

pub mod classify;
pub mod dataio;
pub mod eval;
pub mod linalg;
pub mod par;
pub mod stats;
pub mod synth;
pub mod transform;

pub use classify::{
    build_prototypes, knn_classify, nvp_classify, Metric, Modality, NeighborIndex, PrototypeBank,
};
pub use dataio::{ClassTable, EmbeddingDataset, Embeddings, MultiLabelGroundTruth};
pub use stats::ScatterStats;
pub use transform::{fit_koofu, fit_lda, KooFuTransform, LdaTransform, OutDim};
