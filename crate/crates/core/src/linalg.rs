//! Small dense linear-algebra helpers on top of ndarray/nalgebra.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

const ROW_CHUNK: usize = 1024;

pub(crate) fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `a · b`, parallel over row blocks of `a`. Each output row is computed by a
/// single thread, so the result does not depend on the thread count.
pub fn par_dot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    if n <= ROW_CHUNK {
        return a.dot(&b);
    }
    let blocks: Vec<Array2<f64>> = (0..n)
        .step_by(ROW_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + ROW_CHUNK).min(n);
            a.slice(s![start..end, ..]).dot(&b)
        })
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("blocks share column count")
}

/// `aᵀ · b` for tall `a` and `b`, reduced over row blocks in a fixed order.
pub fn par_tdot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    if n <= ROW_CHUNK {
        return a.t().dot(&b);
    }
    let partials: Vec<Array2<f64>> = (0..n)
        .step_by(ROW_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + ROW_CHUNK).min(n);
            a.slice(s![start..end, ..]).t().dot(&b.slice(s![start..end, ..]))
        })
        .collect();
    let mut acc = Array2::zeros((a.ncols(), b.ncols()));
    for p in &partials {
        acc += p;
    }
    acc
}

/// Thin orthonormal basis for the column space of `a` (Householder QR).
pub fn orthonormalize(a: &Array2<f64>) -> Array2<f64> {
    let qr = to_dmatrix(a.view()).qr();
    from_dmatrix(&qr.q())
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
/// Eigenvectors are the columns of the returned matrix.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let eig = to_dmatrix(a.view()).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((a.nrows(), order.len()), |(r, c)| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Per-column mean.
pub fn column_means(a: ArrayView2<f64>) -> Array1<f64> {
    if a.nrows() == 0 {
        return Array1::zeros(a.ncols());
    }
    a.sum_axis(Axis(0)) / a.nrows() as f64
}

/// Per-column population standard deviation around `mean`.
pub fn column_stds(a: ArrayView2<f64>, mean: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows().max(1) as f64;
    let mut acc = Array1::<f64>::zeros(a.ncols());
    for row in a.rows() {
        for ((acc, &x), &m) in acc.iter_mut().zip(row).zip(mean) {
            let d = x - m;
            *acc += d * d;
        }
    }
    acc.mapv(|s| (s / n).sqrt())
}
