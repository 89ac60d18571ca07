//! Label separability: a softmax linear probe and kNN label ranking.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::knn_search;
use crate::optim::{AdamW, WarmupCosine};

const GRAD_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub total_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            lr: 1e-3,
            weight_decay: 1e-6,
            warmup_epochs: 10,
            warmup_start_lr: 3e-5,
            total_epochs: 250,
            seed: 0,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        crate::optim::check_schedule(
            "probe",
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_start_lr,
            self.warmup_epochs,
            self.total_epochs,
        )
    }

    pub(crate) fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            base_lr: self.lr,
            warmup_start_lr: self.warmup_start_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeModel {
    /// d × C
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Sorted class labels; column `c` of `weights` scores `class_labels[c]`.
    pub class_labels: Vec<String>,
    /// Mean cross-entropy per epoch.
    pub train_log: Vec<f64>,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }
}

/// Trains a multinomial logistic regression on `x` with AdamW.
pub fn train_linear_probe<S: AsRef<str>>(
    x: ArrayView2<f64>,
    labels: &[S],
    hyper: &ProbeHyper,
) -> Result<ProbeModel> {
    hyper.validate()?;
    let n = x.nrows();
    let d = x.ncols();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} rows", labels.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("probe input contains non-finite values".into()));
    }
    let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "probe needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let c = classes.len();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search_by(|k| k.as_str().cmp(l.as_ref())).unwrap())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let bound = 1.0 / (d.max(1) as f64).sqrt();
    let mut weights = Array2::from_shape_fn((d, c), |_| rng.random_range(-bound..bound));
    let mut bias = Array1::from_shape_fn(c, |_| rng.random_range(-bound..bound));

    let schedule = hyper.schedule();
    let mut opt = AdamW::new(&[d * c, c], hyper.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_log = Vec::with_capacity(hyper.total_epochs);

    for epoch in 0..hyper.total_epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let (loss, gw, gb) = softmax_gradient(x, &y, batch, &weights, &bias);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "probe loss is {loss} at epoch {epoch} (lr {lr:.3e})"
                )));
            }
            epoch_loss += loss;
            opt.begin_step();
            opt.update(0, lr, weights.as_slice_mut().unwrap(), gw.as_slice().unwrap());
            opt.update(1, lr, bias.as_slice_mut().unwrap(), gb.as_slice().unwrap());
        }
        train_log.push(epoch_loss / n as f64);
    }

    Ok(ProbeModel {
        weights,
        bias,
        class_labels: classes,
        train_log,
    })
}

/// Summed loss over `rows` and the gradients of the mean loss.
fn softmax_gradient(
    x: ArrayView2<f64>,
    y: &[usize],
    rows: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> (f64, Array2<f64>, Array1<f64>) {
    let m = rows.len() as f64;
    let partials: Vec<(f64, Array2<f64>, Array1<f64>)> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let xc = x.select(Axis(0), chunk);
            let mut p = xc.dot(w) + b;
            let mut loss = 0.0;
            for (mut row, &r) in p.axis_iter_mut(Axis(0)).zip(chunk) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let z = row.sum();
                row /= z;
                loss -= row[y[r]].max(f64::MIN_POSITIVE).ln();
                row[y[r]] -= 1.0;
            }
            let gw = xc.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            (loss, gw, gb)
        })
        .collect();

    let mut loss = 0.0;
    let mut gw = Array2::zeros(w.raw_dim());
    let mut gb = Array1::zeros(b.len());
    for (l, w_part, b_part) in partials {
        loss += l;
        gw += &w_part;
        gb += &b_part;
    }
    gw /= m;
    gb /= m;
    (loss, gw, gb)
}

/// Fraction of rows whose label is among the top `k` logits, for each `k`.
/// Equal logits rank the lower class index first.
pub fn topk_accuracy<S: AsRef<str>>(
    model: &ProbeModel,
    x: ArrayView2<f64>,
    labels: &[S],
    k_list: &[usize],
) -> Result<Vec<f64>> {
    if labels.len() != x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if x.ncols() != model.weights.nrows() {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {} does not match probe dim {}",
            x.ncols(),
            model.weights.nrows()
        )));
    }
    let truth = labels
        .iter()
        .map(|l| {
            model
                .class_index(l.as_ref())
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} unseen by probe", l.as_ref())))
        })
        .collect::<Result<Vec<_>>>()?;
    if truth.is_empty() {
        return Err(Error::InsufficientData("no rows to score".into()));
    }
    let logits = model.logits(x);
    let ranks: Vec<usize> = logits
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(truth.par_iter())
        .map(|(row, &t)| {
            let lt = row[t];
            row.iter()
                .enumerate()
                .filter(|&(c, &v)| v > lt || (v == lt && c < t))
                .count()
        })
        .collect();
    let n = ranks.len() as f64;
    Ok(k_list
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnTopMode {
    /// Rank labels by neighbor count, then mean distance, then label order.
    #[default]
    RankedFrequency,
    /// Top-N hit if the label is carried by any of the N nearest rows.
    NearestRows,
}

pub fn default_knn_k(n_ref: usize) -> usize {
    ((n_ref as f64).sqrt().floor() as usize).max(1)
}

/// kNN label accuracy of `query` against `reference` for every N in `top_n_list`.
pub fn knn_accuracy<S: AsRef<str>, T: AsRef<str>>(
    reference: ArrayView2<f64>,
    reference_labels: &[S],
    query: ArrayView2<f64>,
    query_labels: &[T],
    k: Option<usize>,
    top_n_list: &[usize],
    mode: KnnTopMode,
) -> Result<Vec<f64>> {
    if reference_labels.len() != reference.nrows() || query_labels.len() != query.nrows() {
        return Err(Error::InvalidArgument("label count does not match row count".into()));
    }
    if query.nrows() == 0 {
        return Err(Error::InsufficientData("no query rows".into()));
    }
    let k = k.unwrap_or_else(|| default_knn_k(reference.nrows()));
    if k == 0 || k > reference.nrows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} but reference has {} rows",
            reference.nrows()
        )));
    }
    if mode == KnnTopMode::NearestRows {
        if let Some(&n) = top_n_list.iter().find(|&&n| n > k) {
            return Err(Error::InvalidArgument(format!("top-{n} exceeds k = {k}")));
        }
    }

    let mut codes: BTreeMap<&str, usize> = BTreeMap::new();
    for l in reference_labels {
        codes.entry(l.as_ref()).or_insert(0);
    }
    for (i, v) in codes.values_mut().enumerate() {
        *v = i;
    }
    let ref_codes: Vec<usize> = reference_labels.iter().map(|l| codes[l.as_ref()]).collect();
    let query_codes: Vec<Option<usize>> = query_labels
        .iter()
        .map(|l| codes.get(l.as_ref()).copied())
        .collect();

    let nn = knn_search(reference, query, k, false)?;
    let ranks: Vec<Option<usize>> = (0..query.nrows())
        .into_par_iter()
        .map(|q| {
            let truth = query_codes[q]?;
            let ids = nn.indices(q);
            match mode {
                KnnTopMode::RankedFrequency => {
                    // (code, count, summed distance)
                    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
                    for (&j, &d2) in ids.iter().zip(nn.sq_dists(q)) {
                        let c = ref_codes[j];
                        match tally.iter_mut().find(|t| t.0 == c) {
                            Some(t) => {
                                t.1 += 1;
                                t.2 += d2.sqrt();
                            }
                            None => tally.push((c, 1, d2.sqrt())),
                        }
                    }
                    tally.sort_by(|a, b| {
                        b.1.cmp(&a.1)
                            .then((a.2 / a.1 as f64).total_cmp(&(b.2 / b.1 as f64)))
                            .then(a.0.cmp(&b.0))
                    });
                    tally.iter().position(|t| t.0 == truth)
                }
                KnnTopMode::NearestRows => ids.iter().position(|&j| ref_codes[j] == truth),
            }
        })
        .collect();

    let n = ranks.len() as f64;
    Ok(top_n_list
        .iter()
        .map(|&top| ranks.iter().filter(|r| r.is_some_and(|r| r < top)).count() as f64 / n)
        .collect())
}

/// Top-N accuracy of a trained probe on its own training data; used in diagnostics.
pub fn train_accuracy<S: AsRef<str>>(model: &ProbeModel, x: ArrayView2<f64>, labels: &[S]) -> Result<f64> {
    Ok(topk_accuracy(model, x, labels, &[1])?[0])
}

/// Last-epoch loss, or NaN for an untrained model.
pub fn final_loss(model: &ProbeModel) -> f64 {
    model.train_log.last().copied().unwrap_or(f64::NAN)
}
