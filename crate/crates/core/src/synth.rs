//! Seeded synthetic class-conditional Gaussian embeddings with a shared,
//! ill-conditioned covariance.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{ClassTable, DataError, EmbeddingDataset, Embeddings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Condition number of the shared covariance; variances are
    /// log-spaced from 1 down to `1 / condition`.
    pub condition: f64,
    /// Class means are drawn from `N(0, separation² I)`.
    pub separation: f64,
    /// Common offset added to every sample along a random unit direction.
    pub offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 20,
            dim: 64,
            train_per_class: 200,
            test_per_class: 50,
            condition: 100.0,
            separation: 0.16,
            offset: 1.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Shared covariance `R diag(s) Rᵀ`.
    pub covariance: DMatrix<f64>,
    /// Class means, `K × D` row-major.
    pub means: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix, with
/// the signs fixed by `diag(R) > 0`.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Generates train and test splits. Rows are grouped by class, class ids
/// run `0..K`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData, DataError> {
    let SynthConfig {
        classes: k, dim: d, ..
    } = *cfg;
    if k == 0 || d == 0 || cfg.train_per_class == 0 {
        return Err(DataError::Invalid(
            "classes, dim and train_per_class must be positive".into(),
        ));
    }
    let valid = cfg.condition.is_finite()
        && cfg.condition >= 1.0
        && cfg.separation.is_finite()
        && cfg.separation >= 0.0
        && cfg.offset.is_finite();
    if !valid {
        return Err(DataError::Invalid(
            "condition must be ≥ 1, separation ≥ 0, all finite".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let rotation = random_rotation(d, &mut rng);
    let std: Vec<f64> = (0..d)
        .map(|i| {
            let t = if d > 1 {
                i as f64 / (d - 1) as f64
            } else {
                0.0
            };
            cfg.condition.powf(-t).sqrt()
        })
        .collect();
    let mut offset_dir: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let norm = offset_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    offset_dir.iter_mut().for_each(|x| *x *= cfg.offset / norm);

    let means: Vec<f64> = (0..k * d)
        .map(|i| offset_dir[i % d] + cfg.separation * gaussian(&mut rng))
        .collect();

    // x = μ_k + R diag(std) z
    let sample = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(k * per_class * d);
        let mut labels = Vec::with_capacity(k * per_class);
        let mut z = vec![0.0f64; d];
        for class in 0..k {
            let mu = &means[class * d..(class + 1) * d];
            for _ in 0..per_class {
                for (zi, s) in z.iter_mut().zip(&std) {
                    *zi = gaussian(rng) * s;
                }
                for (r, m) in mu.iter().enumerate() {
                    let x: f64 = rotation.row(r).iter().zip(&z).map(|(a, b)| a * b).sum();
                    data.push((m + x) as f32);
                }
                labels.push(class as u32);
            }
        }
        (data, labels)
    };
    let (train_x, train_y) = sample(cfg.train_per_class, &mut rng);
    let (test_x, test_y) = sample(cfg.test_per_class, &mut rng);

    let train = EmbeddingDataset::new(
        Embeddings::new(d, train_x)?,
        train_y,
        ClassTable::numbered(k),
    )?;
    let test = EmbeddingDataset::new(Embeddings::new(d, test_x)?, test_y, ClassTable::numbered(k))?;

    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        std.iter().map(|s| s * s),
    ));
    let covariance = &rotation * diag * rotation.transpose();
    Ok(SynthData {
        train,
        test,
        covariance,
        means,
    })
}
