//! Naive reference implementations of the metrics.
//!
//! Everything here is written from the formulas with plain loops and shares
//! no kernels with the fast paths, so agreement between the two is evidence
//! that both are right. Inputs are capped at [`ORACLE_MAX_SAMPLES`] rows.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Metadata};
use crate::error::{Error, Result};

pub const ORACLE_MAX_SAMPLES: usize = 500;

fn guard(n: usize) -> Result<()> {
    if n > ORACLE_MAX_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "oracle size guard: {n} rows exceeds {ORACLE_MAX_SAMPLES}"
        )));
    }
    Ok(())
}

fn sq_dist(x: ArrayView2<f64>, i: usize, y: ArrayView2<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..x.ncols() {
        let d = x[[i, c]] - y[[j, c]];
        s += d * d;
    }
    s
}

/// Entropy-matching bisection over β with explicit bracket bookkeeping.
fn naive_kernel(dists: &[f64], perplexity: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let lo_d = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let entropy_at = |beta: f64| -> (f64, Vec<f64>) {
        let w: Vec<f64> = dists.iter().map(|d| (-(d - lo_d) * beta).exp()).collect();
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / z).collect();
        let h = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
        (h, p)
    };
    if dists.iter().all(|&d| d == lo_d) {
        return vec![1.0 / dists.len() as f64; dists.len()];
    }
    let target = perplexity.ln();
    let mean = dists.iter().map(|d| d - lo_d).sum::<f64>() / dists.len() as f64;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0 / mean;
    let mut best = (f64::INFINITY, beta);
    for _ in 0..max_iter {
        let (h, p) = entropy_at(beta);
        if (h - target).abs() < best.0 {
            best = ((h - target).abs(), beta);
        }
        if (h - target).abs() < tol {
            return p;
        }
        if h > target {
            lo = beta;
            beta = if hi == f64::INFINITY { beta * 2.0 } else { (beta + hi) / 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    entropy_at(best.1).1
}

/// Raw iLISI by full distance matrix and full sort.
pub fn naive_ilisi(
    x: ArrayView2<f64>,
    batch: &[usize],
    perplexity: f64,
    k: usize,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let n = x.nrows();
    guard(n)?;
    let n_batches = batch.iter().collect::<BTreeSet<_>>().len();
    let mut total = 0.0;
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(x, i, x, j), j)).collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cand.truncate(k);
        let dists: Vec<f64> = cand.iter().map(|c| c.0).collect();
        let p = naive_kernel(&dists, perplexity, tol, max_iter);
        let mut per_batch: BTreeMap<usize, f64> = BTreeMap::new();
        for (c, pj) in cand.iter().zip(&p) {
            *per_batch.entry(batch[c.1]).or_insert(0.0) += pj;
        }
        let simpson: f64 = per_batch.values().map(|v| v * v).sum();
        total += (1.0 / simpson).max(1.0).min(n_batches as f64);
    }
    Ok(total / n as f64)
}

/// Mean of cos(x_i, x_j) over all ordered pairs, zero rows removed.
pub fn naive_avg_cosine(x: ArrayView2<f64>) -> Result<f64> {
    guard(x.nrows())?;
    let norm = |i: usize| (0..x.ncols()).map(|c| x[[i, c]] * x[[i, c]]).sum::<f64>().sqrt();
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| norm(i) > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("all rows zero".into()));
    }
    let mut s = 0.0;
    for &i in &rows {
        for &j in &rows {
            let dot: f64 = (0..x.ncols()).map(|c| x[[i, c]] * x[[j, c]]).sum();
            s += dot / (norm(i) * norm(j));
        }
    }
    Ok(s / (rows.len() * rows.len()) as f64)
}

/// kNN top-N accuracy with ranked label frequencies.
pub fn naive_knn_accuracy(
    reference: ArrayView2<f64>,
    reference_labels: &[String],
    query: ArrayView2<f64>,
    query_labels: &[String],
    k: usize,
    top_n: &[usize],
) -> Result<Vec<f64>> {
    guard(reference.nrows().max(query.nrows()))?;
    let mut hits = vec![0usize; top_n.len()];
    for q in 0..query.nrows() {
        let mut cand: Vec<(f64, usize)> =
            (0..reference.nrows()).map(|r| (sq_dist(query, q, reference, r), r)).collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        let mut dist: BTreeMap<&str, f64> = BTreeMap::new();
        for &(d, r) in cand.iter().take(k) {
            let label = reference_labels[r].as_str();
            *count.entry(label).or_insert(0) += 1;
            *dist.entry(label).or_insert(0.0) += d.sqrt();
        }
        let mut ranked: Vec<&str> = count.keys().copied().collect();
        ranked.sort_by(|a, b| {
            let ma = dist[a] / count[a] as f64;
            let mb = dist[b] / count[b] as f64;
            count[b].cmp(&count[a]).then(ma.partial_cmp(&mb).unwrap()).then(a.cmp(b))
        });
        let pos = ranked.iter().position(|l| *l == query_labels[q]);
        for (h, &t) in hits.iter_mut().zip(top_n) {
            if pos.is_some_and(|p| p < t) {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / query.nrows() as f64).collect())
}

/// Pairs `(a, b)` with `a < b` whose centroid cosine is at or beyond the
/// percentile cutoffs.
pub fn naive_predicted_links(
    x: ArrayView2<f64>,
    meta: &Metadata,
    low_pct: f64,
    high_pct: f64,
) -> Result<BTreeSet<(String, String)>> {
    guard(x.nrows())?;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..x.nrows() {
        let s = meta.get(i);
        if s.is_control {
            continue;
        }
        let e = sums.entry(s.perturbation.clone()).or_insert((vec![0.0; x.ncols()], 0));
        for c in 0..x.ncols() {
            e.0[c] += x[[i, c]];
        }
        e.1 += 1;
    }
    let cents: Vec<(String, Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (v, n))| (k, v.into_iter().map(|s| s / n as f64).collect()))
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut sims = Vec::new();
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            sims.push((cos(&cents[i].1, &cents[j].1), i, j));
        }
    }
    let mut vals: Vec<f64> = sims.iter().map(|s| s.0).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = |q: f64| {
        let h = (vals.len() - 1) as f64 * q / 100.0;
        let f = h.floor();
        let base = vals[f as usize];
        if f as usize + 1 < vals.len() {
            base + (h - f) * (vals[f as usize + 1] - base)
        } else {
            base
        }
    };
    let (low, high) = (cut(low_pct), cut(high_pct));
    Ok(sims
        .into_iter()
        .filter(|s| s.0 <= low || s.0 >= high)
        .map(|(_, i, j)| (cents[i].0.clone(), cents[j].0.clone()))
        .collect())
}

fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Per-sample Spearman averaged over rows; constant rows score 0.
pub fn naive_spearman(pred: ArrayView2<f64>, actual: ArrayView2<f64>) -> Result<f64> {
    guard(pred.nrows())?;
    let mut total = 0.0;
    for i in 0..pred.nrows() {
        let rp = count_ranks(&pred.row(i).to_vec());
        let ra = count_ranks(&actual.row(i).to_vec());
        let m = (rp.len() as f64 + 1.0) / 2.0;
        let cov: f64 = rp.iter().zip(&ra).map(|(a, b)| (a - m) * (b - m)).sum();
        let vp: f64 = rp.iter().map(|a| (a - m) * (a - m)).sum();
        let va: f64 = ra.iter().map(|b| (b - m) * (b - m)).sum();
        if vp > 0.0 && va > 0.0 {
            total += cov / (vp * va).sqrt();
        }
    }
    Ok(total / pred.nrows() as f64)
}

/// `(distance, distance_max)` of the structural integrity score.
pub fn naive_structural_distance(
    pred: ArrayView2<f64>,
    actual: ArrayView2<f64>,
    meta: &Metadata,
) -> Result<(f64, f64)> {
    guard(pred.nrows())?;
    let g = pred.ncols();
    let mut batches: BTreeSet<&str> = BTreeSet::new();
    for s in meta.samples() {
        batches.insert(&s.batch);
    }
    let (mut dist, mut dmax, mut used) = (0.0, 0.0, 0usize);
    for b in batches {
        let in_b: Vec<usize> = (0..meta.len()).filter(|&i| meta.get(i).batch == b).collect();
        let ctl: Vec<usize> = in_b.iter().copied().filter(|&i| meta.get(i).is_control).collect();
        let pert: Vec<usize> = in_b.iter().copied().filter(|&i| !meta.get(i).is_control).collect();
        if ctl.is_empty() || pert.is_empty() {
            continue;
        }
        let mut d2 = 0.0;
        let mut a2 = 0.0;
        for j in 0..g {
            let pc = ctl.iter().map(|&i| pred[[i, j]]).sum::<f64>() / ctl.len() as f64;
            let ac = ctl.iter().map(|&i| actual[[i, j]]).sum::<f64>() / ctl.len() as f64;
            for &i in &pert {
                let diff = (pred[[i, j]] - pc) - (actual[[i, j]] - ac);
                d2 += diff * diff;
                a2 += (actual[[i, j]] - ac).powi(2);
            }
        }
        dist += d2.sqrt() / pert.len() as f64;
        dmax += 2.0 * a2.sqrt() / pert.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InsufficientData("no evaluable batch".into()));
    }
    Ok((dist / used as f64, dmax / used as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub perplexity: f64,
    pub k_mixing: usize,
    pub calibration_tol: f64,
    pub calibration_max_iter: usize,
    pub k_knn: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            perplexity: 10.0,
            k_mixing: 30,
            calibration_tol: 1e-10,
            calibration_max_iter: 200,
            k_knn: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub ilisi_raw: f64,
    pub avg_cosine: BTreeMap<String, f64>,
    /// Top-1 and top-5, reference = even batches, query = odd batches.
    pub knn: Vec<f64>,
    pub predicted_links: BTreeSet<(String, String)>,
    /// Lognorm expression vs the per-perturbation mean profile predictor.
    pub spearman: f64,
    pub structural_distance: f64,
    pub structural_distance_max: f64,
}

/// Reference values of every metric on a small dataset, computed on the
/// named embedding and (if present) the expression payload.
pub fn oracle_suite(dataset: &Dataset, embedding: &str, params: &OracleParams) -> Result<OracleReport> {
    let n = dataset.n_samples();
    guard(n)?;
    let meta = &dataset.metadata;
    let x = dataset.embedding(embedding)?.values().view();

    let batch_names: Vec<&str> = meta.samples().iter().map(|s| s.batch.as_str()).collect();
    let distinct: Vec<&str> = batch_names.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let batch: Vec<usize> = batch_names.iter().map(|b| distinct.iter().position(|d| d == b).unwrap()).collect();
    let ilisi_raw = naive_ilisi(
        x,
        &batch,
        params.perplexity,
        params.k_mixing,
        params.calibration_tol,
        params.calibration_max_iter,
    )?;

    let mut avg_cosine = BTreeMap::new();
    for p in meta.perturbations() {
        let rows: Vec<usize> = (0..n).filter(|&i| meta.get(i).perturbation == p).collect();
        let sub = Array2::from_shape_fn((rows.len(), x.ncols()), |(r, c)| x[[rows[r], c]]);
        avg_cosine.insert(p, naive_avg_cosine(sub.view())?);
    }

    let (ref_rows, query_rows): (Vec<usize>, Vec<usize>) = (0..n)
        .filter(|&i| !meta.get(i).is_control)
        .partition(|&i| batch[i] % 2 == 0);
    let pick = |rows: &[usize]| Array2::from_shape_fn((rows.len(), x.ncols()), |(r, c)| x[[rows[r], c]]);
    let labels = |rows: &[usize]| rows.iter().map(|&i| meta.get(i).perturbation.clone()).collect::<Vec<_>>();
    let knn = naive_knn_accuracy(
        pick(&ref_rows).view(),
        &labels(&ref_rows),
        pick(&query_rows).view(),
        &labels(&query_rows),
        params.k_knn,
        &[1, 5],
    )?;

    let predicted_links = naive_predicted_links(x, meta, 5.0, 95.0)?;

    let (spearman, structural_distance, structural_distance_max) = match &dataset.expression {
        Some(expr) => {
            let actual = naive_lognorm(expr.values().view(), expr.layout() == crate::data::Layout::RawCounts);
            let pred = perturbation_mean_predictor(actual.view(), meta);
            let s = naive_spearman(pred.view(), actual.view())?;
            let (d, m) = naive_structural_distance(pred.view(), actual.view(), meta)?;
            (s, d, m)
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };

    Ok(OracleReport {
        ilisi_raw,
        avg_cosine,
        knn,
        predicted_links,
        spearman,
        structural_distance,
        structural_distance_max,
    })
}

fn naive_lognorm(x: ArrayView2<f64>, raw: bool) -> Array2<f64> {
    if !raw {
        return x.to_owned();
    }
    let mut out = x.to_owned();
    for i in 0..x.nrows() {
        let total: f64 = (0..x.ncols()).map(|j| x[[i, j]]).sum();
        for j in 0..x.ncols() {
            out[[i, j]] = (1.0 + 1e4 * x[[i, j]] / total).ln();
        }
    }
    out
}

/// Replaces each row with the mean of all rows sharing its perturbation label.
pub fn perturbation_mean_predictor(y: ArrayView2<f64>, meta: &Metadata) -> Array2<f64> {
    let mut out = Array2::zeros(y.raw_dim());
    for i in 0..y.nrows() {
        let label = &meta.get(i).perturbation;
        let rows: Vec<usize> = (0..y.nrows()).filter(|&r| &meta.get(r).perturbation == label).collect();
        for j in 0..y.ncols() {
            out[[i, j]] = rows.iter().map(|&r| y[[r, j]]).sum::<f64>() / rows.len() as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn size_guard() {
        let x = Array2::<f64>::zeros((501, 1));
        assert!(naive_avg_cosine(x.view()).is_err());
    }

    #[test]
    fn count_ranks_average_ties() {
        assert_eq!(count_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn naive_cosine_hand_case() {
        assert!(naive_avg_cosine(array![[1.0, 0.0], [-1.0, 0.0]].view()).unwrap().abs() < 1e-15);
    }
}
