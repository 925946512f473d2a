#![allow(dead_code)]

use std::collections::BTreeMap;

use koofu_core::{EmbeddingDataset, Embeddings, Metric};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian rows with per-class offsets; every class gets at least one row
/// when `n >= k`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> EmbeddingDataset {
    let centers: Vec<f64> = (0..k * d).map(|_| normal(rng)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = if i < k { i } else { rng.random_range(0..k) };
        for j in 0..d {
            data.push((centers[c * d + j] + 0.7 * normal(rng)) as f32);
        }
        labels.push(c as u32);
    }
    EmbeddingDataset::new(
        Embeddings::new(d, data).unwrap(),
        labels,
        koofu_core::ClassTable::numbered(k),
    )
    .unwrap()
}

pub fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Embeddings {
    Embeddings::new(d, (0..n * d).map(|_| normal(rng) as f32).collect()).unwrap()
}

pub fn unit_rows(e: &Embeddings) -> Embeddings {
    let d = e.dim();
    let mut out = Vec::with_capacity(e.len() * d);
    for r in e.rows() {
        let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        out.extend(r.iter().map(|&x| (x as f64 / n) as f32));
    }
    Embeddings::new(d, out).unwrap()
}

fn row(e: &Embeddings, i: usize) -> DVector<f64> {
    DVector::from_iterator(e.dim(), e.row(i).iter().map(|&x| x as f64))
}

/// Deviation-form scatter matrices `(S_w, S_b, S_t)` straight from samples.
pub fn naive_scatters(ds: &EmbeddingDataset) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = ds.dim();
    let n = ds.len();
    let mut means: BTreeMap<u32, (DVector<f64>, f64)> = BTreeMap::new();
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        let x = row(&ds.embeddings, i);
        let e = means
            .entry(ds.labels[i])
            .or_insert((DVector::zeros(d), 0.0));
        e.0 += &x;
        e.1 += 1.0;
        mu += x;
    }
    mu /= n as f64;
    for (s, c) in means.values_mut() {
        *s /= *c;
    }
    let mut sw = DMatrix::zeros(d, d);
    let mut st = DMatrix::zeros(d, d);
    for i in 0..n {
        let x = row(&ds.embeddings, i);
        let dev = &x - &means[&ds.labels[i]].0;
        sw += &dev * dev.transpose();
        let tdev = &x - &mu;
        st += &tdev * tdev.transpose();
    }
    let mut sb = DMatrix::zeros(d, d);
    for (m, c) in means.values() {
        let dev = m - &mu;
        sb += (&dev * dev.transpose()) * *c;
    }
    (sw, sb, st)
}

/// `(key, row)` pairs sorted best first: `−cos` or squared distance.
pub fn brute_ranking(query: &[f32], base: &Embeddings, metric: Metric) -> Vec<(f64, usize)> {
    let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut keyed: Vec<(f64, usize)> = base
        .rows()
        .enumerate()
        .map(|(i, r)| {
            let x: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            let key = match metric {
                Metric::Cosine => {
                    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    -q.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / (qn * xn)
                }
                Metric::Euclidean => q.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum(),
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed
}

/// Plurality vote over the `k` nearest rows: count, then summed
/// similarity (cosine) or summed distance (Euclidean), then class id.
pub fn brute_knn(
    queries: &Embeddings,
    base: &Embeddings,
    labels: &[u32],
    metric: Metric,
    k: usize,
) -> Vec<u32> {
    queries
        .rows()
        .map(|q| {
            let ranked = brute_ranking(q, base, metric);
            let mut tally: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
            for &(key, i) in &ranked[..k] {
                let score = match metric {
                    Metric::Cosine => -key,
                    Metric::Euclidean => key.sqrt(),
                };
                let e = tally.entry(labels[i]).or_default();
                e.0 += 1;
                e.1 += score;
            }
            let mut v: Vec<(u32, usize, f64)> =
                tally.into_iter().map(|(l, (c, s))| (l, c, s)).collect();
            v.sort_by(|a, b| {
                b.1.cmp(&a.1)
                    .then(match metric {
                        Metric::Cosine => b.2.total_cmp(&a.2),
                        Metric::Euclidean => a.2.total_cmp(&b.2),
                    })
                    .then(a.0.cmp(&b.0))
            });
            v[0].0
        })
        .collect()
}

pub fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
