#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use perturbench::data::Metadata;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
}

/// Singular values of `a` by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(a: ArrayView2<f64>) -> Vec<f64> {
    let mut u = if a.nrows() >= a.ncols() { a.to_owned() } else { a.t().to_owned() };
    let n = u.ncols();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u.column(p).dot(&u.column(p));
                let beta: f64 = u.column(q).dot(&u.column(q));
                let gamma: f64 = u.column(p).dot(&u.column(q));
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..u.nrows() {
                    let up = u[[i, p]];
                    let uq = u[[i, q]];
                    u[[i, p]] = c * up - s * uq;
                    u[[i, q]] = s * up + c * uq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).dot(&u.column(j)).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

pub fn center_columns(a: ArrayView2<f64>) -> Array2<f64> {
    let mean: Array1<f64> = a.mean_axis(Axis(0)).unwrap();
    &a - &mean
}

/// `n_batches` equal batches named `b0..`, perturbation labels cycling
/// through `labels`.
pub fn metadata_cycling(n: usize, labels: &[String], n_batches: usize) -> Metadata {
    let perts: Vec<String> = (0..n).map(|i| labels[i % labels.len()].clone()).collect();
    let batches: Vec<String> = (0..n).map(|i| format!("b{}", i * n_batches / n)).collect();
    Metadata::from_labels(&perts, &batches).unwrap()
}
