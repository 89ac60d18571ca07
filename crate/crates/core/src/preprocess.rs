//! Count filtering, library-size normalization and batch-disjoint splits.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, Layout, Metadata};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNTS: f64 = 1000.0;
pub const DEFAULT_TARGET_SUM: f64 = 10_000.0;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.7;

/// Rows whose total raw count is strictly above `threshold`.
pub fn filter_min_counts(expr: &ExpressionMatrix, threshold: f64) -> Result<Vec<bool>> {
    require_raw(expr)?;
    Ok(expr
        .values()
        .axis_iter(Axis(0))
        .map(|row| row.sum() > threshold)
        .collect())
}

/// `ln(1 + target_sum * x / rowsum)` per entry.
pub fn normalize_log1p(expr: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    require_raw(expr)?;
    if !(target_sum > 0.0 && target_sum.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target_sum must be positive, got {target_sum}"
        )));
    }
    let values = log1p_rows(expr.values(), target_sum)?;
    ExpressionMatrix::new(expr.gene_ids().to_vec(), values, Layout::Lognorm)
}

pub(crate) fn log1p_rows(values: &Array2<f64>, target_sum: f64) -> Result<Array2<f64>> {
    let sums = values.sum_axis(Axis(1));
    if let Some(row) = sums.iter().position(|&s| s <= 0.0) {
        return Err(Error::Degenerate(format!(
            "row {row} has zero total count; cannot normalize"
        )));
    }
    let mut out = values.clone();
    Zip::from(out.rows_mut()).and(&sums).par_for_each(|mut row, &s| {
        let scale = target_sum / s;
        row.mapv_inplace(|x| (x * scale).ln_1p());
    });
    Ok(out)
}

/// Log-normalized view of any expression matrix: raw counts are normalized,
/// lognorm values are passed through.
pub fn lognorm_values(expr: &ExpressionMatrix, target_sum: f64) -> Result<Array2<f64>> {
    match expr.layout() {
        Layout::RawCounts => log1p_rows(expr.values(), target_sum),
        Layout::Lognorm => Ok(expr.values().clone()),
    }
}

fn require_raw(expr: &ExpressionMatrix) -> Result<()> {
    if expr.layout() != Layout::RawCounts {
        return Err(Error::InvalidArgument(format!(
            "expected raw_counts layout, got {}",
            expr.layout()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Same perturbations on both sides, distinct batches.
    Probe,
    /// Distinct batches and distinct (non-control) perturbations.
    Reconstruction,
}

/// Batch-level train/test partition, serialized as JSON so splits can be
/// shipped alongside results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub kind: SplitKind,
    pub train_batches: BTreeSet<String>,
    pub test_batches: BTreeSet<String>,
    pub held_out_perturbations: BTreeSet<String>,
    /// Perturbations missing from one side of a probe split; excluded from the label space.
    #[serde(default)]
    pub flagged_perturbations: BTreeSet<String>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SplitSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Row indices `(train, test)` for `meta` under this split.
    ///
    /// Probe splits keep rows whose perturbation is not flagged (controls
    /// included). Reconstruction splits keep non-held-out perturbations on the
    /// train side and held-out ones on the test side; controls go to both.
    pub fn rows(&self, meta: &Metadata) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in meta.samples().iter().enumerate() {
            let held_out = self.held_out_perturbations.contains(&s.perturbation);
            let flagged = self.flagged_perturbations.contains(&s.perturbation);
            if self.train_batches.contains(&s.batch) {
                if s.is_control || (!held_out && !flagged) {
                    train.push(i);
                }
            } else if self.test_batches.contains(&s.batch) {
                let keep = match self.kind {
                    SplitKind::Probe => s.is_control || !flagged,
                    SplitKind::Reconstruction => s.is_control || held_out,
                };
                if keep {
                    test.push(i);
                }
            }
        }
        (train, test)
    }
}

/// Greedy batch assignment: batches sorted by size (ties shuffled by seed) are
/// added to train until it holds at least `train_frac` of rows, keeping at
/// least one batch for test.
fn assign_batches(
    meta: &Metadata,
    train_frac: f64,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    let by_batch = meta.rows_by_batch();
    if by_batch.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 batches to split, found {}",
            by_batch.len()
        )));
    }
    let mut batches: Vec<(String, usize)> =
        by_batch.into_iter().map(|(b, rows)| (b, rows.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    batches.sort_by(|a, b| b.1.cmp(&a.1));

    let total = meta.len() as f64;
    let mut train = BTreeSet::new();
    let mut train_rows = 0usize;
    for (b, size) in &batches[..batches.len() - 1] {
        if train_rows as f64 >= train_frac * total {
            break;
        }
        train.insert(b.clone());
        train_rows += size;
    }
    let test: BTreeSet<String> = batches
        .iter()
        .map(|(b, _)| b.clone())
        .filter(|b| !train.contains(b))
        .collect();
    let achieved = train_rows as f64 / total;
    if (achieved - train_frac).abs() > 0.05 {
        let msg = format!(
            "train fraction {achieved:.3} deviates from requested {train_frac:.3} ({} train / {} test batches)",
            train.len(),
            test.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok((train, test))
}

pub fn make_probe_split(meta: &Metadata, train_frac: f64, seed: u64) -> Result<SplitSpec> {
    let mut warnings = Vec::new();
    let (train_batches, test_batches) = assign_batches(meta, train_frac, seed, &mut warnings)?;

    let mut train_perts = BTreeSet::new();
    let mut test_perts = BTreeSet::new();
    for s in meta.samples().iter().filter(|s| !s.is_control) {
        if train_batches.contains(&s.batch) {
            train_perts.insert(s.perturbation.clone());
        } else {
            test_perts.insert(s.perturbation.clone());
        }
    }
    let flagged: BTreeSet<String> = train_perts
        .symmetric_difference(&test_perts)
        .cloned()
        .collect();
    if !flagged.is_empty() {
        let msg = format!(
            "{} perturbation(s) absent from one side of the split are excluded from the label space",
            flagged.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(SplitSpec {
        name: "probe".into(),
        kind: SplitKind::Probe,
        train_batches,
        test_batches,
        held_out_perturbations: BTreeSet::new(),
        flagged_perturbations: flagged,
        seed,
        warnings,
    })
}

pub fn make_recon_split(
    meta: &Metadata,
    train_frac: f64,
    pert_holdout_frac: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(pert_holdout_frac > 0.0 && pert_holdout_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pert_holdout_frac must be in (0, 1), got {pert_holdout_frac}"
        )));
    }
    let mut perts = meta.perturbations();
    if perts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 non-control perturbations, found {}",
            perts.len()
        )));
    }
    let mut warnings = Vec::new();
    let (train_batches, test_batches) = assign_batches(meta, train_frac, seed, &mut warnings)?;

    // Separate stream from the batch assignment so the two choices are independent.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    perts.shuffle(&mut rng);
    let n_hold = ((pert_holdout_frac * perts.len() as f64).round() as usize).clamp(1, perts.len() - 1);
    let held_out: BTreeSet<String> = perts[..n_hold].iter().cloned().collect();

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in meta.samples().iter().filter(|s| test_batches.contains(&s.batch)) {
        if held_out.contains(&s.perturbation) {
            *counts.entry(s.perturbation.as_str()).or_default() += 1;
        }
    }
    let missing = held_out.len() - counts.len();
    if missing > 0 {
        let msg = format!("{missing} held-out perturbation(s) have no rows in the test batches");
        warn!("{msg}");
        warnings.push(msg);
    }

    Ok(SplitSpec {
        name: "recon".into(),
        kind: SplitKind::Reconstruction,
        train_batches,
        test_batches,
        held_out_perturbations: held_out,
        flagged_perturbations: BTreeSet::new(),
        seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn raw(values: Array2<f64>) -> ExpressionMatrix {
        let genes = (0..values.ncols()).map(|j| format!("g{j}")).collect();
        ExpressionMatrix::new(genes, values, Layout::RawCounts).unwrap()
    }

    fn grid_meta(n_batches: usize, per_batch: usize, perts: &[&str]) -> Metadata {
        let mut p = Vec::new();
        let mut b = Vec::new();
        for bi in 0..n_batches {
            for c in 0..per_batch {
                p.push(perts[c % perts.len()].to_string());
                b.push(format!("b{bi:02}"));
            }
        }
        Metadata::from_labels(&p, &b).unwrap()
    }

    #[test]
    fn min_counts_is_strict() {
        let e = raw(array![[999.0, 0.0], [500.0, 500.0], [1000.0, 1.0]]);
        assert_eq!(filter_min_counts(&e, 1000.0).unwrap(), vec![false, false, true]);
        assert_eq!(filter_min_counts(&e, 0.0).unwrap(), vec![true, true, true]);
    }

    #[test]
    fn min_counts_requires_raw() {
        let e = normalize_log1p(&raw(array![[1.0, 2.0]]), 10.0).unwrap();
        assert!(filter_min_counts(&e, 0.0).is_err());
    }

    #[test]
    fn log1p_direct_formula() {
        let e = raw(array![[1.0, 1.0, 2.0, 0.0]]);
        let out = normalize_log1p(&e, 10_000.0).unwrap();
        let v = out.values();
        assert!((v[[0, 0]] - 2501f64.ln()).abs() < 1e-12);
        assert!((v[[0, 1]] - 2501f64.ln()).abs() < 1e-12);
        assert!((v[[0, 2]] - 5001f64.ln()).abs() < 1e-12);
        assert_eq!(v[[0, 3]], 0.0);
        assert_eq!(out.layout(), Layout::Lognorm);
    }

    #[test]
    fn log1p_zero_row_errors() {
        assert!(normalize_log1p(&raw(array![[0.0, 0.0]]), 1e4).is_err());
    }

    #[test]
    fn ten_equal_batches_split_seven_three() {
        let meta = grid_meta(10, 20, &["A", "B", "non-targeting"]);
        for seed in 0..5 {
            let s = make_probe_split(&meta, 0.7, seed).unwrap();
            assert_eq!(s.train_batches.len(), 7);
            assert_eq!(s.test_batches.len(), 3);
            assert!(s.warnings.is_empty());
        }
    }

    #[test]
    fn two_batches_split_one_one_with_warning() {
        let meta = grid_meta(2, 10, &["A", "non-targeting"]);
        let s = make_probe_split(&meta, 0.7, 3).unwrap();
        assert_eq!((s.train_batches.len(), s.test_batches.len()), (1, 1));
        assert!(s.warnings.iter().any(|w| w.contains("deviates")));
    }

    #[test]
    fn single_batch_is_error() {
        let meta = grid_meta(1, 10, &["A", "non-targeting"]);
        assert!(make_probe_split(&meta, 0.7, 0).is_err());
    }

    #[test]
    fn recon_holds_out_half_of_four() {
        let meta = grid_meta(6, 20, &["A", "B", "C", "D", "non-targeting"]);
        let s = make_recon_split(&meta, 0.7, 0.5, 11).unwrap();
        assert_eq!(s.held_out_perturbations.len(), 2);
        let (train, test) = s.rows(&meta);
        let train_ctl = train.iter().any(|&i| meta.get(i).is_control);
        let test_ctl = test.iter().any(|&i| meta.get(i).is_control);
        assert!(train_ctl && test_ctl);
    }

    #[test]
    fn recon_needs_two_perturbations() {
        let meta = grid_meta(4, 10, &["A", "non-targeting"]);
        assert!(matches!(
            make_recon_split(&meta, 0.7, 0.5, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn flagged_perturbations_excluded() {
        // "X" only lives in batch b00
        let mut p = vec!["X".to_string()];
        let mut b = vec!["b00".to_string()];
        for bi in 0..4 {
            for c in 0..6 {
                p.push(["A", "B", "non-targeting"][c % 3].into());
                b.push(format!("b{bi:02}"));
            }
        }
        let meta = Metadata::from_labels(&p, &b).unwrap();
        let s = make_probe_split(&meta, 0.7, 0).unwrap();
        assert!(s.flagged_perturbations.contains("X"));
        let (train, test) = s.rows(&meta);
        assert!(train.iter().chain(&test).all(|&i| meta.get(i).perturbation != "X"));
    }

    #[test]
    fn split_json_round_trip() {
        let meta = grid_meta(5, 10, &["A", "B", "non-targeting"]);
        let s = make_recon_split(&meta, 0.7, 0.5, 4).unwrap();
        assert_eq!(SplitSpec::from_json(&s.to_json().unwrap()).unwrap(), s);
    }
}
