//! Batch mixing: integration local inverse Simpson's index (iLISI).
//!
//! Each sample gets a Gaussian kernel over its `k_n` exact nearest neighbors
//! (squared Euclidean distances), with the bandwidth chosen by bisection so the
//! kernel's perplexity hits the target. The per-sample score is the inverse
//! Simpson index of the kernel-weighted batch composition.
//!
//! The normalized score divides `raw − 1` by `null − 1`, where `null` is the
//! raw score of the same kernels after randomly permuting batch labels. A
//! batch-agnostic embedding therefore scores ≈ 1 regardless of neighborhood
//! size or batch count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::knn_search;
use ndarray::ArrayView2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelNeighborhood {
    pub probabilities: Vec<f64>,
    pub beta: f64,
    /// Shannon entropy (nats) of `probabilities`.
    pub entropy: f64,
    pub converged: bool,
}

/// Finds β such that `exp(H(p)) ≈ target_perplexity` for
/// `p_j ∝ exp(−β·d_j)`, by doubling/halving then bisection.
///
/// All-equal distances leave the entropy pinned at `ln k`; the result is then
/// uniform with `converged = false`.
pub fn calibrate_beta(
    distances: &[f64],
    target_perplexity: f64,
    max_iter: usize,
    tol: f64,
) -> Result<KernelNeighborhood> {
    let k = distances.len();
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidArgument(
            "distances must be finite and non-negative".into(),
        ));
    }
    if !(target_perplexity > 1.0 && target_perplexity < k as f64) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {target_perplexity} must lie in (1, {k})"
        )));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = distances.iter().map(|d| d - min).collect();
    let spread = shifted.iter().copied().fold(0.0, f64::max);
    if spread <= 0.0 {
        return Ok(KernelNeighborhood {
            probabilities: vec![1.0 / k as f64; k],
            beta: 0.0,
            entropy: (k as f64).ln(),
            converged: false,
        });
    }

    let target = target_perplexity.ln();
    let mean = shifted.iter().sum::<f64>() / k as f64;
    let mut beta = 1.0 / mean;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut probs = vec![0.0; k];
    let mut best: Option<(f64, f64)> = None; // (|diff|, beta)

    for _ in 0..max_iter {
        let h = kernel_entropy(&shifted, beta, &mut probs);
        let diff = h - target;
        if best.is_none_or(|(b, _)| diff.abs() < b) {
            best = Some((diff.abs(), beta));
        }
        if diff.abs() < tol {
            return Ok(KernelNeighborhood {
                probabilities: probs,
                beta,
                entropy: h,
                converged: true,
            });
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    let beta = best.map_or(beta, |(_, b)| b);
    let entropy = kernel_entropy(&shifted, beta, &mut probs);
    Ok(KernelNeighborhood {
        probabilities: probs,
        beta,
        entropy,
        converged: false,
    })
}

/// Fills `probs` with the normalized kernel and returns its entropy.
/// `shifted` must have minimum 0 so the largest weight is exactly 1.
fn kernel_entropy(shifted: &[f64], beta: f64, probs: &mut [f64]) -> f64 {
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (p, &d) in probs.iter_mut().zip(shifted) {
        let w = (-beta * d).exp();
        *p = w;
        z += w;
        weighted += d * w;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    z.ln() + beta * weighted / z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlisiParams {
    pub perplexity: f64,
    /// Neighborhood size; defaults to `3 · perplexity`.
    pub k_neighbors: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    /// Label permutations used for the normalizing null.
    pub null_permutations: usize,
    pub seed: u64,
}

impl Default for IlisiParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            k_neighbors: None,
            max_iter: 100,
            tol: 1e-5,
            null_permutations: 10,
            seed: 0,
        }
    }
}

impl IlisiParams {
    pub fn neighborhood_size(&self) -> usize {
        self.k_neighbors
            .unwrap_or_else(|| (3.0 * self.perplexity).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlisiScore {
    /// Mean inverse Simpson index, in `[1, B]`.
    pub raw: f64,
    /// `(raw − 1) / (null − 1)` clamped to `[0, 1]`; `None` for a single batch.
    pub normalized: Option<f64>,
    /// Raw score under permuted batch labels (same kernels).
    pub null_raw: f64,
    /// `(raw − 1) / (B − 1)`.
    pub normalized_by_batches: Option<f64>,
    pub n_batches: usize,
    pub n_unconverged: usize,
}

/// iLISI over all rows of `x`. `batch` holds one small integer code per row.
pub fn ilisi(x: ArrayView2<f64>, batch: &[usize], params: &IlisiParams) -> Result<IlisiScore> {
    let n = x.nrows();
    if batch.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} batch labels for {n} rows",
            batch.len()
        )));
    }
    let k = params.neighborhood_size();
    if n <= k {
        return Err(Error::InsufficientData(format!(
            "iLISI needs more than k_n = {k} samples, got {n}"
        )));
    }
    let n_codes = batch.iter().copied().max().map_or(0, |m| m + 1);
    let mut present = vec![false; n_codes];
    for &b in batch {
        present[b] = true;
    }
    let n_batches = present.iter().filter(|&&p| p).count();

    let nn = knn_search(x, x, k, true)?;

    let mut permutations: Vec<Vec<usize>> = Vec::with_capacity(params.null_permutations);
    for r in 0..params.null_permutations {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(r as u64);
        let mut p = batch.to_vec();
        p.shuffle(&mut rng);
        permutations.push(p);
    }

    // per sample: (isi, converged, null isi per permutation)
    let per_sample: Vec<Result<(f64, bool, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let kernel = calibrate_beta(nn.sq_dists(i), params.perplexity, params.max_iter, params.tol)?;
            let ids = nn.indices(i);
            let isi = inverse_simpson(ids, &kernel.probabilities, batch, n_batches);
            let nulls = permutations
                .iter()
                .map(|perm| inverse_simpson(ids, &kernel.probabilities, perm, n_batches))
                .collect();
            Ok((isi, kernel.converged, nulls))
        })
        .collect();

    let mut sum = 0.0;
    let mut null_sums = vec![0.0; params.null_permutations];
    let mut n_unconverged = 0;
    for r in per_sample {
        let (isi, converged, nulls) = r?;
        sum += isi;
        n_unconverged += usize::from(!converged);
        for (acc, v) in null_sums.iter_mut().zip(nulls) {
            *acc += v;
        }
    }
    let raw = sum / n as f64;
    let null_raw = if null_sums.is_empty() {
        f64::NAN
    } else {
        null_sums.iter().sum::<f64>() / (n as f64 * null_sums.len() as f64)
    };

    let (normalized, normalized_by_batches) = if n_batches < 2 {
        (None, None)
    } else {
        let by_b = (raw - 1.0) / (n_batches as f64 - 1.0);
        let norm = if null_raw.is_finite() && null_raw - 1.0 > 1e-12 {
            Some(((raw - 1.0) / (null_raw - 1.0)).clamp(0.0, 1.0))
        } else {
            None
        };
        (norm, Some(by_b))
    };

    Ok(IlisiScore {
        raw,
        normalized,
        null_raw,
        normalized_by_batches,
        n_batches,
        n_unconverged,
    })
}

fn inverse_simpson(ids: &[usize], probs: &[f64], labels: &[usize], n_batches: usize) -> f64 {
    let mut mass: Vec<(usize, f64)> = ids.iter().map(|&j| labels[j]).zip(probs.iter().copied()).collect();
    mass.sort_unstable_by_key(|&(c, _)| c);
    let mut simpson = 0.0;
    let mut start = 0;
    while start < mass.len() {
        let c = mass[start].0;
        let mut pc = 0.0;
        let mut end = start;
        while end < mass.len() && mass[end].0 == c {
            pc += mass[end].1;
            end += 1;
        }
        simpson += pc * pc;
        start = end;
    }
    (1.0 / simpson).clamp(1.0, n_batches.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn perplexity_five_on_ramp() {
        let d: Vec<f64> = (0..10).map(f64::from).collect();
        let k = calibrate_beta(&d, 5.0, 100, 1e-5).unwrap();
        assert!(k.converged);
        // independent re-evaluation from the returned probabilities
        assert!((entropy(&k.probabilities).exp() - 5.0).abs() < 1e-3);
        assert!((k.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_neighbor_limit_is_uniform() {
        let k = calibrate_beta(&[0.0, 4.0], 1.9999, 200, 1e-9).unwrap();
        assert!((k.probabilities[0] - 0.5).abs() < 0.01);
        assert!(k.beta < 0.01);
    }

    #[test]
    fn equal_distances_unconverged_uniform() {
        let k = calibrate_beta(&[2.0; 6], 3.0, 100, 1e-5).unwrap();
        assert!(!k.converged);
        assert!(k.probabilities.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn perplexity_out_of_range() {
        assert!(calibrate_beta(&[0.0, 1.0, 2.0], 3.0, 100, 1e-5).is_err());
        assert!(calibrate_beta(&[0.0, 1.0, 2.0], 1.0, 100, 1e-5).is_err());
    }

    #[test]
    fn separated_batches_score_near_zero() {
        let n = 200;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let offset = if i < n / 2 { 0.0 } else { 1000.0 };
            offset + ((i * 7 + j * 13) % 17) as f64 * 0.1
        });
        let batch: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let params = IlisiParams {
            perplexity: 10.0,
            ..Default::default()
        };
        let s = ilisi(x.view(), &batch, &params).unwrap();
        assert!(s.normalized.unwrap() < 0.05, "{s:?}");
        assert!((s.raw - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_batch_has_no_normalized_score() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 5 + j) % 11) as f64);
        let s = ilisi(
            x.view(),
            &[0; 40],
            &IlisiParams {
                perplexity: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s.raw, 1.0);
        assert!(s.normalized.is_none());
    }

    #[test]
    fn too_few_samples() {
        let x = Array2::<f64>::zeros((10, 2));
        assert!(ilisi(x.view(), &[0; 10], &IlisiParams::default()).is_err());
    }
}
