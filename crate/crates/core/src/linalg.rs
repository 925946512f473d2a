//! Small dense linear-algebra helpers shared by the fitting code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "symmetrize needs a square matrix");
    (m + m.transpose()) * 0.5
}

/// Frobenius norm of `a - b` divided by the Frobenius norm of `b`
/// (absolute when `b` is zero).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// non-increasing order and a deterministic sign per eigenvector.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    /// Eigenvectors as columns, aligned with `values`.
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Symmetric eigensolver. The input is symmetrized first so asymmetric
/// rounding residue never reaches the solver.
pub fn eigh_desc(m: &DMatrix<f64>) -> SortedEigen {
    let sym = symmetrize(m);
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: degenerate eigenvalues keep the solver's order.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        orient(&mut col);
        vectors.set_column(dst, &col);
    }
    SortedEigen { values, vectors }
}

/// Flips `v` so that its largest-magnitude component is positive; among
/// equal magnitudes the lowest index wins.
pub fn orient(v: &mut DVector<f64>) {
    let mut best = 0usize;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Dot product with a fixed four-lane accumulation order, so the result
/// for a row never depends on how rows were batched.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `aᵀ a` for a row-major `(n × d)` matrix `a`, exactly symmetric (the
/// upper triangle is mirrored onto the lower one).
pub fn gram(a: &[f64], n: usize, d: usize) -> DMatrix<f64> {
    cross(a, a, n, d)
}

/// `aᵀ b` for row-major `(n × d)` matrices, with the upper triangle
/// mirrored onto the lower one. Only meaningful when the product is
/// symmetric in exact arithmetic.
pub fn cross(a: &[f64], b: &[f64], n: usize, d: usize) -> DMatrix<f64> {
    assert_eq!(a.len(), n * d);
    assert_eq!(b.len(), n * d);
    let mut c = vec![0.0f64; d * d];
    if n > 0 && d > 0 {
        // SAFETY: the strides describe `aᵀ` (d × n), `b` (n × d) and `c`
        // (d × d) inside buffers of exactly those sizes.
        unsafe {
            matrixmultiply::dgemm(
                d,
                n,
                d,
                1.0,
                a.as_ptr(),
                1,
                d as isize,
                b.as_ptr(),
                d as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                d as isize,
                1,
            );
        }
    }
    mirror_upper(&mut c, d);
    DMatrix::from_row_slice(d, d, &c)
}

/// Copies the upper triangle of a row-major square buffer onto the lower.
pub fn mirror_upper(c: &mut [f64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            c[j * d + i] = c[i * d + j];
        }
    }
}

/// Row-major `(rows × cols)` f64 buffer to an nalgebra matrix.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// nalgebra matrix to a row-major f64 buffer.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Rounds a positive value up to two significant digits.
pub fn ceil_two_sig(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.log10().floor() as i32 - 1;
    let build = |n: f64| {
        if exp < 0 {
            n / 10f64.powi(-exp)
        } else {
            n * 10f64.powi(exp)
        }
    };
    let mut n = if exp < 0 {
        (x * 10f64.powi(-exp)).ceil()
    } else {
        (x / 10f64.powi(exp)).ceil()
    };
    // the scaled round trip can land a hair below x
    while build(n) < x {
        n += 1.0;
    }
    build(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_sorted_and_oriented() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let e = eigh_desc(&m);
        assert_eq!(e.values.as_slice(), &[5.0, 2.0, 1.0]);
        for c in 0..3 {
            let col = e.vectors.column(c);
            let (imax, _) = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            assert!(col[imax] > 0.0);
        }
        assert_eq!(e.vectors[(1, 0)], 1.0);
    }

    #[test]
    fn orient_tie_prefers_lowest_index() {
        let mut v = DVector::from_vec(vec![-0.5, 0.5, 0.1]);
        orient(&mut v);
        assert_eq!(v[0], 0.5);
        let mut w = DVector::from_vec(vec![0.5, -0.5]);
        orient(&mut w);
        assert_eq!(w[0], 0.5);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn ceil_two_sig_rounds_up() {
        assert_eq!(ceil_two_sig(0.0123), 0.013);
        assert_eq!(ceil_two_sig(27.01), 28.0);
        assert_eq!(ceil_two_sig(150.0), 150.0);
        assert!(ceil_two_sig(1.234e-7) >= 1.234e-7);
        assert!((ceil_two_sig(1.234e-7) - 1.3e-7).abs() < 1e-20);
    }

    #[test]
    fn gram_matches_naive() {
        let (n, d) = (7, 5);
        let a: Vec<f64> = (0..n * d).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let g = gram(&a, n, d);
        for i in 0..d {
            for j in 0..d {
                let naive: f64 = (0..n).map(|r| a[r * d + i] * a[r * d + j]).sum();
                assert_eq!(g[(i, j)], naive);
            }
        }
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn row_major_round_trip() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = from_row_major(2, 3, &data);
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(to_row_major(&m), data.to_vec());
    }
}
