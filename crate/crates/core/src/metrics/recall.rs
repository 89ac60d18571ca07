//! Zero-shot recall of known gene-gene links from perturbation centroids.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{LinkDatabase, Metadata};
use crate::error::{Error, Result};
use crate::linalg::par_dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMap {
    /// Sorted non-control perturbation labels.
    pub labels: Vec<String>,
    /// P × d, one centroid per label.
    pub centroids: Array2<f64>,
}

/// Unweighted mean embedding of each non-control perturbation.
pub fn aggregate_perturbations(x: ArrayView2<f64>, meta: &Metadata) -> Result<PerturbationMap> {
    if x.nrows() != meta.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding has {} rows, metadata {}",
            x.nrows(),
            meta.len()
        )));
    }
    let groups = meta.rows_by_perturbation();
    if groups.is_empty() {
        return Err(Error::InsufficientData("no non-control perturbations".into()));
    }
    let mut centroids = Array2::zeros((groups.len(), x.ncols()));
    let mut labels = Vec::with_capacity(groups.len());
    for (mut out, (label, rows)) in centroids.axis_iter_mut(Axis(0)).zip(groups) {
        for &r in &rows {
            out += &x.row(r);
        }
        out /= rows.len() as f64;
        labels.push(label);
    }
    Ok(PerturbationMap { labels, centroids })
}

/// Percentile of ascending `sorted` with linear interpolation between order
/// statistics at position `q/100 · (N − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Cosine similarity of every unordered centroid pair `(i, j)`, `i < j`, in
/// row-major pair order. Zero-norm centroids have similarity 0 to everything.
pub fn pair_similarities(centroids: ArrayView2<f64>) -> Vec<f64> {
    let p = centroids.nrows();
    let mut unit = centroids.to_owned();
    let mut n_zero = 0;
    for mut row in unit.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        } else {
            n_zero += 1;
        }
    }
    if n_zero > 0 {
        log::warn!("{n_zero} perturbation centroids have zero norm; their similarities are 0");
    }
    let gram = par_dot(unit.view(), unit.t());
    let mut sims = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            sims.push(gram[[i, j]].clamp(-1.0, 1.0));
        }
    }
    sims
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLinks {
    /// Canonical `(lo, hi)` label pairs.
    pub pairs: BTreeSet<(String, String)>,
    pub n_pairs: usize,
    pub low_threshold: f64,
    pub high_threshold: f64,
    /// True when the two thresholds coincide (e.g. identical centroids).
    pub degenerate: bool,
}

impl PredictedLinks {
    pub fn contains(&self, a: &str, b: &str) -> bool {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.pairs.contains(&(lo.to_string(), hi.to_string()))
    }
}

/// Pairs whose similarity is at or below the `low_pct` percentile or at or
/// above the `high_pct` percentile of all pair similarities.
pub fn predicted_links(map: &PerturbationMap, low_pct: f64, high_pct: f64) -> Result<PredictedLinks> {
    let p = map.labels.len();
    if p < 3 {
        return Err(Error::InsufficientData(format!(
            "link prediction needs at least 3 perturbations, got {p}"
        )));
    }
    if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct > high_pct {
        return Err(Error::InvalidArgument(format!(
            "bad percentiles {low_pct}, {high_pct}"
        )));
    }
    let sims = pair_similarities(map.centroids.view());
    let mut sorted = sims.clone();
    sorted.sort_by(f64::total_cmp);
    let low = percentile(&sorted, low_pct);
    let high = percentile(&sorted, high_pct);
    let degenerate = low == high;
    if degenerate {
        log::warn!("pair similarity percentiles coincide at {low}; every pair is selected");
    }

    let mut pairs = BTreeSet::new();
    let mut k = 0;
    for i in 0..p {
        for j in i + 1..p {
            let s = sims[k];
            k += 1;
            if s <= low || s >= high {
                pairs.insert((map.labels[i].clone(), map.labels[j].clone()));
            }
        }
    }
    Ok(PredictedLinks {
        pairs,
        n_pairs: sims.len(),
        low_threshold: low,
        high_threshold: high,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub database: String,
    pub recall: f64,
    pub n_evaluable: usize,
    pub n_recovered: usize,
}

/// Fraction of database links with both genes in `universe` that were predicted.
pub fn recall_against_db(
    predicted: &PredictedLinks,
    db: &LinkDatabase,
    universe: &BTreeSet<String>,
) -> Result<RecallResult> {
    let mut n_evaluable = 0;
    let mut n_recovered = 0;
    for (a, b) in db.iter() {
        if universe.contains(a) && universe.contains(b) {
            n_evaluable += 1;
            n_recovered += usize::from(predicted.contains(a, b));
        }
    }
    if n_evaluable == 0 {
        return Err(Error::InsufficientData(format!(
            "no evaluable links in {:?}",
            db.name()
        )));
    }
    Ok(RecallResult {
        database: db.name().to_string(),
        recall: n_recovered as f64 / n_evaluable as f64,
        n_evaluable,
        n_recovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map(labels: &[&str], c: Array2<f64>) -> PerturbationMap {
        PerturbationMap {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            centroids: c,
        }
    }

    #[test]
    fn centroids_are_group_means() {
        let meta = Metadata::from_labels(&["a", "a", "non-targeting", "b"], &["x"; 4]).unwrap();
        let x = array![[1.0, 0.0], [-1.0, 0.0], [9.0, 9.0], [2.0, 3.0]];
        let m = aggregate_perturbations(x.view(), &meta).unwrap();
        assert_eq!(m.labels, vec!["a", "b"]);
        assert_eq!(m.centroids, array![[0.0, 0.0], [2.0, 3.0]]);
    }

    #[test]
    fn no_perturbations_errors() {
        let meta = Metadata::from_labels(&["non-targeting"], &["x"]).unwrap();
        assert!(aggregate_perturbations(array![[1.0]].view(), &meta).is_err());
    }

    #[test]
    fn numpy_style_percentiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert!((percentile(&s, 5.0) - 1.15).abs() < 1e-12);
        assert!((percentile(&s, 95.0) - 3.85).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 50.0), 7.0);
    }

    #[test]
    fn orthogonal_centroids_select_everything() {
        let m = map(&["a", "b", "c"], Array2::eye(3));
        let p = predicted_links(&m, 5.0, 95.0).unwrap();
        assert_eq!(p.n_pairs, 3);
        assert_eq!(p.pairs.len(), 3);
        assert!(p.degenerate);
    }

    #[test]
    fn five_centroid_hand_case() {
        // unit vectors at 0, 20, 50, 95, 180 degrees
        let deg = [0.0f64, 20.0, 50.0, 95.0, 180.0];
        let c = Array2::from_shape_fn((5, 2), |(i, j)| {
            let t = deg[i].to_radians();
            if j == 0 { t.cos() } else { t.sin() }
        });
        let m = map(&["a", "b", "c", "d", "e"], c);
        let p = predicted_links(&m, 5.0, 95.0).unwrap();
        // sorted pair angles: 180, 160, 130, 95, 85, 75, 50, 45, 30, 20
        // q05 sits 0.45 of the way from cos 180 to cos 160, q95 0.55 from cos 30 to cos 20
        let cos = |d: f64| d.to_radians().cos();
        let low = cos(180.0) + 0.45 * (cos(160.0) - cos(180.0));
        let high = cos(30.0) + 0.55 * (cos(20.0) - cos(30.0));
        assert!((p.low_threshold - low).abs() < 1e-12);
        assert!((p.high_threshold - high).abs() < 1e-12);
        let expected: BTreeSet<(String, String)> = [("a", "e"), ("a", "b")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        assert_eq!(p.pairs, expected);
    }

    #[test]
    fn recall_fraction_and_empty_universe() {
        let m = map(&["a", "b", "c"], Array2::eye(3));
        let p = predicted_links(&m, 5.0, 95.0).unwrap();
        let db = LinkDatabase::from_pairs("db", [("a", "b"), ("c", "zz")]);
        let universe: BTreeSet<String> = m.labels.iter().cloned().collect();
        let r = recall_against_db(&p, &db, &universe).unwrap();
        assert_eq!((r.recall, r.n_evaluable), (1.0, 1));
        let far = LinkDatabase::from_pairs("far", [("x", "y")]);
        assert!(recall_against_db(&p, &far, &universe).is_err());
    }
}
