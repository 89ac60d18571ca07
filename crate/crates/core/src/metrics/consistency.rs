//! Perturbation consistency: within-perturbation cosine similarity tested
//! against a null built from perturbations of unexpressed genes.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, Metadata};
use crate::error::{Error, Result};
use crate::preprocess::{lognorm_values, DEFAULT_TARGET_SUM};

pub const DEFAULT_NULL_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MIN_NULL: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Mean cosine similarity over all ordered row pairs, self-pairs included.
///
/// Computed as `‖Σ x̂_i‖² / n²` over unit-normalized rows. Zero rows are
/// dropped with a warning.
pub fn avg_cosine(x: ArrayView2<f64>) -> Result<f64> {
    let mut sum = vec![0.0; x.ncols()];
    let mut n = 0usize;
    for row in x.axis_iter(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            continue;
        }
        n += 1;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v / norm;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("all rows have zero norm".into()));
    }
    if n < x.nrows() {
        log::warn!("avg_cosine dropped {} zero-norm rows", x.nrows() - n);
    }
    let sq: f64 = sum.iter().map(|v| v * v).sum();
    Ok((sq / (n * n) as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSelection {
    pub null_set: BTreeSet<String>,
    /// Mean log-normalized control expression of every mapped target gene.
    pub control_expression: BTreeMap<String, f64>,
    /// Perturbation labels that are not gene ids of the expression matrix.
    pub unmapped: Vec<String>,
}

/// Perturbations whose target gene is essentially unexpressed in controls.
///
/// Raw counts are log-normalized first; lognorm input is used as is.
pub fn select_null_perturbations(
    expr: &ExpressionMatrix,
    meta: &Metadata,
    expression_threshold: f64,
    min_null: usize,
) -> Result<NullSelection> {
    if expr.n_samples() != meta.len() {
        return Err(Error::InvalidArgument(format!(
            "expression has {} rows, metadata {}",
            expr.n_samples(),
            meta.len()
        )));
    }
    let controls = meta.control_rows();
    if controls.is_empty() {
        return Err(Error::InsufficientData("no control samples for null selection".into()));
    }
    let ctl = lognorm_values(&expr.select_rows(&controls), DEFAULT_TARGET_SUM)?;
    let means = ctl.mean_axis(Axis(0)).expect("controls non-empty");
    let gene_index: BTreeMap<&str, usize> = expr
        .gene_ids()
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();

    let mut null_set = BTreeSet::new();
    let mut control_expression = BTreeMap::new();
    let mut unmapped = Vec::new();
    for p in meta.perturbations() {
        match gene_index.get(p.as_str()) {
            Some(&g) => {
                let m = means[g];
                if m < expression_threshold {
                    null_set.insert(p.clone());
                }
                control_expression.insert(p, m);
            }
            None => unmapped.push(p),
        }
    }
    if !unmapped.is_empty() {
        log::warn!(
            "{} perturbation labels do not match any gene id and were skipped",
            unmapped.len()
        );
    }
    if null_set.len() < min_null {
        return Err(Error::InsufficientData(format!(
            "only {} null perturbations at expression threshold {expression_threshold}; \
             need {min_null} (raise the threshold or lower min_null)",
            null_set.len()
        )));
    }
    Ok(NullSelection {
        null_set,
        control_expression,
        unmapped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Significant when similarity is high: `#{null ≥ obs}`.
    #[default]
    Right,
    /// The literal inequality `#{null ≤ obs}`.
    LeftAsPrinted,
}

impl std::str::FromStr for Tail {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Tail::Right),
            "left_as_printed" => Ok(Tail::LeftAsPrinted),
            other => Err(Error::InvalidArgument(format!("unknown tail {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationScore {
    pub avgsim: f64,
    pub p_value: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    /// Tested (non-null) perturbations.
    pub per_perturbation: BTreeMap<String, PerturbationScore>,
    /// avgsim of each null perturbation.
    pub null_values: BTreeMap<String, f64>,
    pub null_size: usize,
    pub fraction_significant: f64,
    pub alpha: f64,
    pub tail: Tail,
}

/// Empirical p-value of `obs` against ascending `sorted_null`.
pub fn empirical_p(sorted_null: &[f64], obs: f64, tail: Tail) -> f64 {
    let k = sorted_null.len();
    let count = match tail {
        Tail::Right => k - sorted_null.partition_point(|&v| v < obs),
        Tail::LeftAsPrinted => sorted_null.partition_point(|&v| v <= obs),
    };
    count.max(1) as f64 / k as f64
}

/// Scores every non-control perturbation of `meta` on embedding `x`; those
/// in `null_set` form the null distribution, the rest are tested.
pub fn consistency_test(
    x: ArrayView2<f64>,
    meta: &Metadata,
    null_set: &BTreeSet<String>,
    alpha: f64,
    tail: Tail,
) -> Result<ConsistencyResult> {
    if x.nrows() != meta.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding has {} rows, metadata {}",
            x.nrows(),
            meta.len()
        )));
    }
    let groups: Vec<(String, Vec<usize>)> = meta.rows_by_perturbation().into_iter().collect();
    let scores: Vec<f64> = groups
        .par_iter()
        .map(|(_, rows)| avg_cosine(x.select(Axis(0), rows).view()))
        .collect::<Result<_>>()?;

    let mut null_values = BTreeMap::new();
    let mut tested = Vec::new();
    for ((label, rows), s) in groups.into_iter().zip(scores) {
        if null_set.contains(&label) {
            null_values.insert(label, s);
        } else {
            tested.push((label, s, rows.len()));
        }
    }
    if null_values.is_empty() {
        return Err(Error::InsufficientData(
            "empty null set: no null perturbation has samples".into(),
        ));
    }
    let missing = null_set.len() - null_values.len();
    if missing > 0 {
        log::warn!("{missing} null perturbations have no samples in this embedding");
    }
    let mut sorted: Vec<f64> = null_values.values().copied().collect();
    sorted.sort_by(f64::total_cmp);

    let per_perturbation: BTreeMap<String, PerturbationScore> = tested
        .into_iter()
        .map(|(label, avgsim, n_samples)| {
            let p_value = empirical_p(&sorted, avgsim, tail);
            (
                label,
                PerturbationScore {
                    avgsim,
                    p_value,
                    n_samples,
                },
            )
        })
        .collect();
    let fraction_significant = if per_perturbation.is_empty() {
        0.0
    } else {
        per_perturbation.values().filter(|s| s.p_value < alpha).count() as f64
            / per_perturbation.len() as f64
    };
    Ok(ConsistencyResult {
        per_perturbation,
        null_size: sorted.len(),
        null_values,
        fraction_significant,
        alpha,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Layout;
    use ndarray::{array, Array2};

    #[test]
    fn single_row_is_one() {
        assert_eq!(avg_cosine(array![[3.0, 4.0]].view()).unwrap(), 1.0);
    }

    #[test]
    fn antipodal_pair_is_zero() {
        assert!(avg_cosine(array![[1.0, 0.0], [-2.0, 0.0]].view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn zero_rows_dropped_or_rejected() {
        assert!((avg_cosine(array![[0.0, 0.0], [1.0, 1.0]].view()).unwrap() - 1.0).abs() < 1e-15);
        assert!(avg_cosine(array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn p_value_hand_case() {
        let null = [0.1, 0.2, 0.3, 0.3, 0.5];
        assert_eq!(empirical_p(&null, 0.3, Tail::Right), 3.0 / 5.0);
        assert_eq!(empirical_p(&null, 0.3, Tail::LeftAsPrinted), 4.0 / 5.0);
        assert_eq!(empirical_p(&null, 0.9, Tail::Right), 1.0 / 5.0);
        assert_eq!(empirical_p(&null, 0.0, Tail::LeftAsPrinted), 1.0 / 5.0);
        assert_eq!(empirical_p(&null, 0.0, Tail::Right), 1.0);
    }

    #[test]
    fn null_selection_by_control_expression() {
        let genes: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let counts = array![
            [100.0, 0.0, 50.0, 50.0],
            [100.0, 0.0, 50.0, 50.0],
            [10.0, 10.0, 10.0, 10.0],
            [10.0, 10.0, 10.0, 10.0],
            [10.0, 10.0, 10.0, 10.0],
        ];
        let expr = ExpressionMatrix::new(genes, counts, Layout::RawCounts).unwrap();
        let perts = ["non-targeting", "non-targeting", "A", "B", "Z"];
        let batches = ["b0"; 5];
        let meta = Metadata::from_labels(&perts, &batches).unwrap();
        let sel = select_null_perturbations(&expr, &meta, 0.01, 1).unwrap();
        assert_eq!(sel.null_set, BTreeSet::from(["B".to_string()]));
        assert_eq!(sel.unmapped, vec!["Z".to_string()]);
        let all = select_null_perturbations(&expr, &meta, f64::INFINITY, 1).unwrap();
        assert_eq!(all.null_set.len(), 2);
        assert!(select_null_perturbations(&expr, &meta, 0.01, 2).is_err());
    }

    #[test]
    fn consistency_end_to_end_small() {
        let perts = ["a", "a", "n1", "n1", "n2", "n2"];
        let meta = Metadata::from_labels(&perts, &["b"; 6]).unwrap();
        let x: Array2<f64> = array![[1.0, 0.0], [1.0, 0.1], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let nulls = BTreeSet::from(["n1".to_string(), "n2".to_string()]);
        let r = consistency_test(x.view(), &meta, &nulls, 0.05, Tail::Right).unwrap();
        assert_eq!(r.null_size, 2);
        let a = r.per_perturbation["a"];
        assert_eq!(a.p_value, 0.5);
        assert!(r.null_values["n1"].abs() < 1e-15);
        assert!((r.null_values["n2"] - 0.5).abs() < 1e-15);
    }
}
