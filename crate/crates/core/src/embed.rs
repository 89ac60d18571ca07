//! Model-free baseline embedders: randomized PCA on raw counts and i.i.d.
//! Gaussian embeddings.

use log::warn;
use nalgebra::SVD;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, ExpressionMatrix, Layout, Metadata, SampleMetadata};
use crate::error::{Error, Result};
use crate::linalg::{column_means, from_dmatrix, orthonormalize, par_dot, par_tdot, to_dmatrix};

pub const DEFAULT_PCA_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcaParams {
    pub d_out: usize,
    pub seed: u64,
    pub oversample: usize,
    pub power_iters: usize,
    pub solver: PcaSolver,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSolver {
    /// Full SVD for small inputs or when `d_out` is close to the rank,
    /// randomized otherwise.
    #[default]
    Auto,
    Randomized,
    Full,
}

/// Inputs with both dimensions at most this size use the full solver.
const FULL_SOLVER_MAX_DIM: usize = 500;

impl Default for PcaParams {
    fn default() -> Self {
        Self {
            d_out: DEFAULT_PCA_DIM,
            seed: 0,
            oversample: 10,
            power_iters: 4,
            solver: PcaSolver::Auto,
        }
    }
}

impl PcaParams {
    pub fn new(d_out: usize, seed: u64) -> Self {
        Self {
            d_out,
            seed,
            ..Self::default()
        }
    }
}

/// Top principal directions of mean-centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// Input features × components, orthonormal columns.
    pub components: Array2<f64>,
    /// Non-increasing.
    pub singular_values: Array1<f64>,
    /// Squared Frobenius norm of the centered fit data.
    pub total_sum_squares: f64,
    pub n_fit: usize,
    pub seed: u64,
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn d_in(&self) -> usize {
        self.components.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.components.ncols()
    }

    pub fn explained_variance_ratio(&self) -> Array1<f64> {
        if self.total_sum_squares <= 0.0 {
            return Array1::zeros(self.d_out());
        }
        self.singular_values
            .mapv(|s| s * s / self.total_sum_squares)
    }

    pub fn provenance(&self) -> String {
        format!("pca:d={}:seed={}", self.d_out(), self.seed)
    }

    /// Maps scores back to input space: `scores · componentsᵀ + mean`.
    pub fn inverse_transform(&self, scores: ArrayView2<f64>) -> Array2<f64> {
        let mut out = par_dot(scores, self.components.t());
        out += &self.mean;
        out
    }
}

/// Randomized PCA of a raw count matrix.
pub fn fit_pca(expr: &ExpressionMatrix, params: &PcaParams) -> Result<PcaModel> {
    if expr.layout() != Layout::RawCounts {
        return Err(Error::InvalidArgument(
            "PCA baseline is fit on raw counts".into(),
        ));
    }
    fit_pca_matrix(expr.values().view(), params)
}

/// Randomized range finder with power iterations, followed by an exact SVD
/// of the small projected matrix. Small problems go straight to a full SVD
/// under [`PcaSolver::Auto`].
pub fn fit_pca_matrix(x: ArrayView2<f64>, params: &PcaParams) -> Result<PcaModel> {
    let (n, g) = x.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs n >= 2 rows, got {n}")));
    }
    let max_rank = n.min(g);
    if params.d_out == 0 || params.d_out > max_rank {
        return Err(Error::InvalidArgument(format!(
            "d_out = {} must be in 1..={max_rank}",
            params.d_out
        )));
    }
    let mean = column_means(x);
    let full = match params.solver {
        PcaSolver::Full => true,
        PcaSolver::Randomized => false,
        PcaSolver::Auto => {
            n.max(g) <= FULL_SOLVER_MAX_DIM || params.d_out * 5 >= max_rank * 4
        }
    };
    let svd = if full {
        let mut xc = x.to_owned();
        xc -= &mean;
        SVD::new(to_dmatrix(xc.view()), false, true)
    } else {
        let l = (params.d_out + params.oversample).min(max_rank);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let omega = Array2::from_shape_simple_fn((g, l), || rng.sample::<f64, _>(StandardNormal));

        let mut q = orthonormalize(&centered_dot(x, &mean, omega.view()));
        for _ in 0..params.power_iters {
            let z = orthonormalize(&centered_tdot(x, &mean, q.view()));
            q = orthonormalize(&centered_dot(x, &mean, z.view()));
        }
        // B = Qᵀ Xc, small (l × g)
        let b = centered_tdot(x, &mean, q.view()).reversed_axes();
        SVD::new(to_dmatrix(b.view()), false, true)
    };
    let v_t = from_dmatrix(svd.v_t.as_ref().expect("requested V"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    order.truncate(params.d_out);

    let singular_values = Array1::from_iter(order.iter().map(|&i| svd.singular_values[i]));
    let mut components = Array2::zeros((g, params.d_out));
    for (c, &i) in order.iter().enumerate() {
        let mut col = v_t.row(i).to_owned();
        // sign convention: the largest-magnitude loading is positive
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, &v)| if v.abs() > best.1.abs() { (j, v) } else { best })
            .1;
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        components.column_mut(c).assign(&col);
    }

    let leading = singular_values[0];
    let rank_deficient = singular_values.iter().any(|&s| s < 1e-10 * leading);
    if rank_deficient {
        warn!(
            "PCA: trailing singular values below 1e-10 x leading ({:e}); data rank < d_out = {}",
            leading, params.d_out
        );
    }

    let total_sum_squares: f64 = x
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();

    Ok(PcaModel {
        mean,
        components,
        singular_values,
        total_sum_squares,
        n_fit: n,
        seed: params.seed,
        rank_deficient,
    })
}

/// `(x − mean) · components`.
pub fn transform_pca(model: &PcaModel, expr: &ExpressionMatrix) -> Result<EmbeddingMatrix> {
    let scores = transform_pca_matrix(model, expr.values().view())?;
    EmbeddingMatrix::new(scores, model.provenance())
}

pub fn transform_pca_matrix(model: &PcaModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.d_in() {
        return Err(Error::InvalidArgument(format!(
            "PCA model expects {} features, got {}",
            model.d_in(),
            x.ncols()
        )));
    }
    Ok(centered_dot(x, &model.mean, model.components.view()))
}

fn centered_dot(x: ArrayView2<f64>, mean: &Array1<f64>, m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = par_dot(x, m);
    let shift = mean.dot(&m);
    out -= &shift;
    out
}

fn centered_tdot(x: ArrayView2<f64>, mean: &Array1<f64>, q: ArrayView2<f64>) -> Array2<f64> {
    let mut out = par_tdot(x, q);
    let colsum = q.sum_axis(Axis(0));
    for (mut row, &m) in out.rows_mut().into_iter().zip(mean) {
        row.scaled_add(-m, &colsum);
    }
    out
}

/// i.i.d. standard normal `n × d` matrix. Row `i` is drawn from its own
/// ChaCha stream, so the result depends only on `(n, d, seed)`.
pub fn random_embed(n: usize, d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "random embedding needs n, d >= 1 (got {n} x {d})"
        )));
    }
    let mut values = Array2::<f64>::zeros((n, d));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            row.iter_mut()
                .for_each(|v| *v = rng.sample(StandardNormal));
        });
    EmbeddingMatrix::new(values, format!("random:d={d}:seed={seed}"))
}

/// Permutes perturbation labels among non-control samples. Used to build
/// label-shuffled nulls; controls and batches stay put.
pub fn shuffle_labels(meta: &Metadata, seed: u64) -> Result<Metadata> {
    let rows: Vec<usize> = (0..meta.len()).filter(|&i| !meta.get(i).is_control).collect();
    let mut labels: Vec<String> = rows.iter().map(|&i| meta.get(i).perturbation.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let mut samples: Vec<SampleMetadata> = meta.samples().to_vec();
    for (&i, label) in rows.iter().zip(labels) {
        samples[i].perturbation = label;
    }
    Metadata::new(samples, meta.control_label())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_axis_data_fully_explained() {
        let x = array![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, -2.0, 0.0],
            [3.0, 1.0, 0.0]
        ];
        let m = fit_pca_matrix(x.view(), &PcaParams::new(2, 7)).unwrap();
        let total: f64 = m.explained_variance_ratio().sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn mean_row_maps_to_zero() {
        let x = Array2::from_shape_fn((12, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let m = fit_pca_matrix(x.view(), &PcaParams::new(3, 1)).unwrap();
        let mean_row = m.mean.clone().insert_axis(Axis(0));
        let z = transform_pca_matrix(&m, mean_row.view()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn d_out_too_large() {
        let x = Array2::<f64>::zeros((4, 3));
        assert!(fit_pca_matrix(x.view(), &PcaParams::new(4, 0)).is_err());
    }

    #[test]
    fn full_rank_reconstruction_exact() {
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 5 + j * j * 3) % 7) as f64 + 0.5 * j as f64);
        let m = fit_pca_matrix(x.view(), &PcaParams::new(4, 3)).unwrap();
        let z = transform_pca_matrix(&m, x.view()).unwrap();
        let back = m.inverse_transform(z.view());
        let err = (&back - &x).iter().map(|d| d * d).sum::<f64>();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let x = Array2::from_shape_fn((30, 6), |(i, j)| (((i + 1) * (j + 2)) % 9) as f64);
        let a = fit_pca_matrix(x.view(), &PcaParams::new(3, 5)).unwrap();
        let b = fit_pca_matrix(x.view(), &PcaParams::new(3, 5)).unwrap();
        assert_eq!(a, b);
        for col in a.components.columns() {
            let max = col.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn random_embed_seeded() {
        let a = random_embed(50, 4, 9).unwrap();
        let b = random_embed(50, 4, 9).unwrap();
        let c = random_embed(50, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert!(random_embed(0, 4, 0).is_err());
    }

    #[test]
    fn shuffle_keeps_controls() {
        let meta = Metadata::from_labels(
            &["A", "B", "non-targeting", "C", "D"],
            &["b", "b", "b", "c", "c"],
        )
        .unwrap();
        let s = shuffle_labels(&meta, 3).unwrap();
        assert!(s.get(2).is_control);
        let mut before = meta.perturbations();
        let mut after = s.perturbations();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }
}
