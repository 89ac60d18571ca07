//! Expression reconstruction: a two-layer decoder from embeddings to
//! log-normalized expression, Spearman agreement, and structural integrity.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Metadata;
use crate::error::{Error, Result};
use crate::linalg::column_means;
use crate::optim::{AdamW, WarmupCosine};

const GRAD_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" | "rectifier" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderHyper {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub total_epochs: usize,
    /// Hidden width; the embedding dimension when `None`.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for DecoderHyper {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 1e-4,
            weight_decay: 1e-6,
            warmup_epochs: 10,
            warmup_start_lr: 3e-5,
            total_epochs: 30,
            hidden: None,
            activation: Activation::Identity,
            seed: 0,
        }
    }
}

impl DecoderHyper {
    pub fn validate(&self) -> Result<()> {
        crate::optim::check_schedule(
            "decoder",
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_start_lr,
            self.warmup_epochs,
            self.total_epochs,
        )?;
        if self.hidden == Some(0) {
            return Err(Error::InvalidArgument("decoder: hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
    /// Mean squared error per epoch.
    pub train_log: Vec<f64>,
}

impl DecoderModel {
    fn hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w1) + &self.b1;
        if self.activation == Activation::Relu {
            h.mapv_inplace(|v| v.max(0.0));
        }
        h
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.w1.nrows() {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} does not match decoder input {}",
                x.ncols(),
                self.w1.nrows()
            )));
        }
        Ok(self.hidden(x).dot(&self.w2) + &self.b2)
    }
}

/// Fits `x → y` with squared-error loss.
///
/// The output layer starts at zero weights with bias equal to the per-gene
/// train mean, so an uninformative embedding predicts the mean profile.
pub fn train_decoder(x: ArrayView2<f64>, y: ArrayView2<f64>, hyper: &DecoderHyper) -> Result<DecoderModel> {
    hyper.validate()?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} embedding rows but {} expression rows",
            y.nrows()
        )));
    }
    if n == 0 || x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::InsufficientData("decoder needs non-empty inputs".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("decoder input contains non-finite values".into()));
    }
    let d = x.ncols();
    let g = y.ncols();
    let h = hyper.hidden.unwrap_or(d);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let bound = 1.0 / (d as f64).sqrt();
    let mut model = DecoderModel {
        w1: Array2::from_shape_fn((d, h), |_| rng.random_range(-bound..bound)),
        b1: Array1::from_shape_fn(h, |_| rng.random_range(-bound..bound)),
        w2: Array2::zeros((h, g)),
        b2: column_means(y),
        activation: hyper.activation,
        train_log: Vec::with_capacity(hyper.total_epochs),
    };

    let schedule = WarmupCosine {
        base_lr: hyper.lr,
        warmup_start_lr: hyper.warmup_start_lr,
        warmup_epochs: hyper.warmup_epochs,
        total_epochs: hyper.total_epochs,
    };
    let mut opt = AdamW::new(&[d * h, h, h * g, g], hyper.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..hyper.total_epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let (loss, grads) = mse_gradient(&model, x, y, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "decoder loss is {loss} at epoch {epoch} (lr {lr:.3e})"
                )));
            }
            sse += loss;
            opt.begin_step();
            let [gw1, gb1, gw2, gb2] = grads;
            opt.update(0, lr, model.w1.as_slice_mut().unwrap(), gw1.as_slice().unwrap());
            opt.update(1, lr, model.b1.as_slice_mut().unwrap(), gb1.as_slice().unwrap());
            opt.update(2, lr, model.w2.as_slice_mut().unwrap(), gw2.as_slice().unwrap());
            opt.update(3, lr, model.b2.as_slice_mut().unwrap(), gb2.as_slice().unwrap());
        }
        model.train_log.push(sse / (n * g) as f64);
    }
    Ok(model)
}

/// Summed squared error over `rows` and gradients of the mean over entries.
fn mse_gradient(
    model: &DecoderModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    rows: &[usize],
) -> (f64, [Array2<f64>; 4]) {
    let scale = 2.0 / (rows.len() * y.ncols()) as f64;
    let partials: Vec<(f64, Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>)> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let xc = x.select(Axis(0), chunk);
            let yc = y.select(Axis(0), chunk);
            let pre = xc.dot(&model.w1) + &model.b1;
            let hid = match model.activation {
                Activation::Identity => pre.clone(),
                Activation::Relu => pre.mapv(|v| v.max(0.0)),
            };
            let resid = hid.dot(&model.w2) + &model.b2 - &yc;
            let sse = resid.iter().map(|r| r * r).sum::<f64>();
            let gw2 = hid.t().dot(&resid);
            let gb2 = resid.sum_axis(Axis(0));
            let mut gh = resid.dot(&model.w2.t());
            if model.activation == Activation::Relu {
                Zip::from(&mut gh).and(&pre).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let gw1 = xc.t().dot(&gh);
            let gb1 = gh.sum_axis(Axis(0));
            (sse, gw1, gb1, gw2, gb2)
        })
        .collect();

    let mut sse = 0.0;
    let mut gw1 = Array2::zeros(model.w1.raw_dim());
    let mut gb1 = Array1::zeros(model.b1.len());
    let mut gw2 = Array2::zeros(model.w2.raw_dim());
    let mut gb2 = Array1::zeros(model.b2.len());
    for (s, a, b, c, d) in partials {
        sse += s;
        gw1 += &a;
        gb1 += &b;
        gw2 += &c;
        gb2 += &d;
    }
    let to2 = |v: Array1<f64>| {
        let len = v.len();
        v.into_shape_with_order((1, len)).expect("1-row reshape") * scale
    };
    (sse, [gw1 * scale, to2(gb1), gw2 * scale, to2(gb2)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpearmanAxis {
    /// One coefficient per sample, across genes.
    #[default]
    PerSample,
    /// One coefficient per gene, across samples.
    PerGene,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub mean: f64,
    pub n_scored: usize,
    /// Vectors with zero rank variance, scored as 0.
    pub n_constant: usize,
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(v: ArrayView1<f64>) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Mean Spearman correlation between matched rows (or columns) of `pred` and `actual`.
pub fn spearman_score(pred: ArrayView2<f64>, actual: ArrayView2<f64>, axis: SpearmanAxis) -> Result<SpearmanResult> {
    if pred.dim() != actual.dim() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            pred.dim(),
            actual.dim()
        )));
    }
    let ax = match axis {
        SpearmanAxis::PerSample => Axis(0),
        SpearmanAxis::PerGene => Axis(1),
    };
    if pred.len_of(ax) < 1 || pred.len_of(Axis(1 - ax.index())) < 2 {
        return Err(Error::InsufficientData(format!(
            "spearman needs at least 2 entries per vector, shape {:?}",
            pred.dim()
        )));
    }
    let scores: Vec<Option<f64>> = pred
        .axis_iter(ax)
        .into_par_iter()
        .zip(actual.axis_iter(ax).into_par_iter())
        .map(|(p, a)| pearson(&average_ranks(p), &average_ranks(a)))
        .collect();
    let n_constant = scores.iter().filter(|s| s.is_none()).count();
    if n_constant > 0 {
        log::warn!("{n_constant} constant vectors scored as Spearman 0");
    }
    let n = scores.len();
    let mean = scores.iter().map(|s| s.unwrap_or(0.0)).sum::<f64>() / n as f64;
    Ok(SpearmanResult {
        mean,
        n_scored: n,
        n_constant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralIntegrityResult {
    /// `‖Ỹ_pred − Ỹ_actual‖_F / n_b` per evaluated batch.
    pub per_batch_distance: BTreeMap<String, f64>,
    pub distance: f64,
    /// `(2/B) Σ ‖Ỹ_actual‖_F / n_b`.
    pub distance_max: f64,
    pub integrity: f64,
    pub integrity_unclamped: f64,
    /// Batches without controls or without perturbed samples.
    pub skipped_batches: Vec<String>,
    /// Largest actual value, used as M in the bound below.
    pub m: f64,
    /// `(1/B) Σ 2M √(n_b · g)`; diagnostic only.
    pub distance_max_m_bound: f64,
}

/// Control-centered Frobenius distance between predicted and actual
/// expression, averaged over batches and normalized by the antipodal distance.
pub fn structural_integrity(
    pred: ArrayView2<f64>,
    actual: ArrayView2<f64>,
    meta: &Metadata,
) -> Result<StructuralIntegrityResult> {
    if pred.dim() != actual.dim() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            pred.dim(),
            actual.dim()
        )));
    }
    if pred.nrows() != meta.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows but metadata has {}",
            pred.nrows(),
            meta.len()
        )));
    }
    let g = pred.ncols();
    let batches: Vec<(String, Vec<usize>)> = meta.rows_by_batch().into_iter().collect();

    // (batch, distance/n_b, ‖Ỹa‖/n_b, n_b) or None when skipped
    let per: Vec<(String, Option<(f64, f64, usize)>)> = batches
        .par_iter()
        .map(|(b, rows)| {
            let (ctl, pert): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| meta.get(r).is_control);
            if ctl.is_empty() || pert.is_empty() {
                return (b.clone(), None);
            }
            let pc = pred.select(Axis(0), &ctl).mean_axis(Axis(0)).unwrap();
            let ac = actual.select(Axis(0), &ctl).mean_axis(Axis(0)).unwrap();
            let mut diff_sq = 0.0;
            let mut act_sq = 0.0;
            for &r in &pert {
                for j in 0..g {
                    let yp = pred[[r, j]] - pc[j];
                    let ya = actual[[r, j]] - ac[j];
                    diff_sq += (yp - ya) * (yp - ya);
                    act_sq += ya * ya;
                }
            }
            let nb = pert.len() as f64;
            (b.clone(), Some((diff_sq.sqrt() / nb, act_sq.sqrt() / nb, pert.len())))
        })
        .collect();

    let mut per_batch_distance = BTreeMap::new();
    let mut skipped_batches = Vec::new();
    let mut dist_sum = 0.0;
    let mut max_sum = 0.0;
    let mut bound_sum = 0.0;
    let m = actual.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (b, r) in per {
        match r {
            Some((d, a, nb)) => {
                per_batch_distance.insert(b, d);
                dist_sum += d;
                max_sum += a;
                bound_sum += 2.0 * m * ((nb * g) as f64).sqrt();
            }
            None => skipped_batches.push(b),
        }
    }
    if !skipped_batches.is_empty() {
        log::warn!(
            "structural integrity skipped {} batches lacking controls or perturbed samples",
            skipped_batches.len()
        );
    }
    let nb = per_batch_distance.len();
    if nb == 0 {
        return Err(Error::InsufficientData(
            "no batch has both control and perturbed samples".into(),
        ));
    }
    let distance = dist_sum / nb as f64;
    let distance_max = 2.0 * max_sum / nb as f64;
    if distance_max == 0.0 {
        return Err(Error::Degenerate(
            "actual perturbed rows equal their control means; distance_max is 0".into(),
        ));
    }
    let integrity_unclamped = 1.0 - distance / distance_max;
    Ok(StructuralIntegrityResult {
        per_batch_distance,
        distance,
        distance_max,
        integrity: integrity_unclamped.clamp(0.0, 1.0),
        integrity_unclamped,
        skipped_batches,
        m,
        distance_max_m_bound: bound_sum / nb as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDiagnostics {
    pub mse: f64,
    pub mae: f64,
    /// Mean per-sample Pearson correlation across genes.
    pub pearson: f64,
}

pub fn diagnostics(pred: ArrayView2<f64>, actual: ArrayView2<f64>) -> Result<ReconstructionDiagnostics> {
    if pred.dim() != actual.dim() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            pred.dim(),
            actual.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    Zip::from(pred).and(actual).for_each(|&p, &a| {
        mse += (p - a) * (p - a);
        mae += (p - a).abs();
    });
    let rows: Vec<f64> = pred
        .axis_iter(Axis(0))
        .zip(actual.axis_iter(Axis(0)))
        .map(|(p, a)| pearson(&p.to_vec(), &a.to_vec()).unwrap_or(0.0))
        .collect();
    Ok(ReconstructionDiagnostics {
        mse: mse / n,
        mae: mae / n,
        pearson: rows.iter().sum::<f64>() / rows.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn spearman_hand_cases() {
        let s = |p: ndarray::Array2<f64>, a: ndarray::Array2<f64>| {
            spearman_score(p.view(), a.view(), SpearmanAxis::PerSample).unwrap().mean
        };
        assert!((s(array![[3.0, 1.0, 2.0]], array![[30.0, 10.0, 20.0]]) - 1.0).abs() < 1e-12);
        assert!((s(array![[1.0, 3.0, 2.0]], array![[10.0, 20.0, 30.0]]) - 0.5).abs() < 1e-12);
        assert!((s(array![[1.0, 2.0, 3.0]], array![[-1.0, -2.0, -3.0]]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(array![5.0, 1.0, 5.0, 2.0].view()), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_row_counts_as_zero() {
        let r = spearman_score(
            array![[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]].view(),
            array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]].view(),
            SpearmanAxis::PerSample,
        )
        .unwrap();
        assert_eq!(r.n_constant, 1);
        assert!((r.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn per_gene_axis() {
        let p = array![[1.0, 5.0], [2.0, 4.0], [3.0, 6.0]];
        let a = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let r = spearman_score(p.view(), a.view(), SpearmanAxis::PerGene).unwrap();
        assert!((r.mean - (1.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    fn si_fixture() -> (Metadata, Array2<f64>) {
        let perts = ["non-targeting", "a", "b", "non-targeting", "non-targeting", "a", "c"];
        let batches = ["x", "x", "x", "y", "y", "y", "y"];
        let meta = Metadata::from_labels(&perts, &batches).unwrap();
        let actual = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.25 * j as f64);
        (meta, actual)
    }

    #[test]
    fn integrity_anchors() {
        let (meta, actual) = si_fixture();
        let same = structural_integrity(actual.view(), actual.view(), &meta).unwrap();
        assert_eq!(same.integrity, 1.0);
        assert_eq!(same.distance, 0.0);

        let zeros = Array2::zeros(actual.raw_dim());
        let half = structural_integrity(zeros.view(), actual.view(), &meta).unwrap();
        assert!((half.integrity - 0.5).abs() < 1e-12);

        // mirror each batch about its control mean
        let mut anti = actual.clone();
        for rows in meta.rows_by_batch().values() {
            let ctl: Vec<usize> = rows.iter().copied().filter(|&r| meta.get(r).is_control).collect();
            let c = actual.select(Axis(0), &ctl).mean_axis(Axis(0)).unwrap();
            for &r in rows {
                let mirrored = &c * 2.0 - &actual.row(r);
                anti.row_mut(r).assign(&mirrored);
            }
        }
        let zero = structural_integrity(anti.view(), actual.view(), &meta).unwrap();
        assert!(zero.integrity.abs() < 1e-12);
    }

    #[test]
    fn batch_without_controls_is_skipped() {
        let meta = Metadata::from_labels(&["non-targeting", "a", "a"], &["x", "x", "y"]).unwrap();
        let a = array![[0.0, 1.0], [1.0, 3.0], [2.0, 2.0]];
        let r = structural_integrity(a.view(), a.view(), &meta).unwrap();
        assert_eq!(r.skipped_batches, vec!["y".to_string()]);
        let none = Metadata::from_labels(&["a", "a"], &["x", "y"]).unwrap();
        assert!(structural_integrity(a.slice(ndarray::s![..2, ..]), a.slice(ndarray::s![..2, ..]), &none).is_err());
    }

    #[test]
    fn decoder_tiny_dimension_runs() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 / 20.0);
        let y = Array2::from_shape_fn((20, 3), |(i, j)| (i + j) as f64 / 10.0);
        let m = train_decoder(x.view(), y.view(), &DecoderHyper::default()).unwrap();
        let p = m.predict(x.view()).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(m.train_log.len(), 30);
    }

    #[test]
    fn decoder_learns_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((600, 6), |_| rng.random_range(-1.0..1.0));
        let y = x.clone() + 2.0;
        let hyper = DecoderHyper {
            lr: 1e-2,
            batch_size: 64,
            total_epochs: 60,
            ..Default::default()
        };
        let m = train_decoder(x.view(), y.view(), &hyper).unwrap();
        let mse = diagnostics(m.predict(x.view()).unwrap().view(), y.view()).unwrap().mse;
        assert!(mse < 0.01 * (1.0 / 3.0), "mse {mse}");
        assert!(m.train_log.last().unwrap() < &m.train_log[0]);
    }
}
