//! Embedding post-processing: control centering, center scaling and typical
//! variation normalization (TVN), plus raw pass-through.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, Metadata};
use crate::error::{Error, Result};
use crate::linalg::{column_means, column_stds, par_dot, symmetric_eigen};

pub const STD_FLOOR: f64 = 1e-8;
pub const EIGEN_FLOOR_REL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcessing {
    Raw,
    Center,
    CenterScale,
    Tvn,
}

impl PostProcessing {
    pub const ALL: [PostProcessing; 4] = [
        PostProcessing::Raw,
        PostProcessing::Center,
        PostProcessing::CenterScale,
        PostProcessing::Tvn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PostProcessing::Raw => "raw",
            PostProcessing::Center => "center",
            PostProcessing::CenterScale => "center_scale",
            PostProcessing::Tvn => "tvn",
        }
    }
}

impl fmt::Display for PostProcessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PostProcessing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PostProcessing::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown post-processing {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Subtract the mean of the control rows of each row's own batch.
    #[default]
    PerBatchControl,
    /// Subtract the per-feature mean of all rows.
    Global,
}

/// A transformed embedding plus any fallbacks that were taken.
#[derive(Debug, Clone)]
pub struct Processed {
    pub embedding: EmbeddingMatrix,
    pub warnings: Vec<String>,
}

/// Applies `kind` to `emb`, recording it in the provenance string.
pub fn apply(
    kind: PostProcessing,
    emb: &EmbeddingMatrix,
    meta: &Metadata,
    mode: CenterMode,
) -> Result<Processed> {
    check_rows(emb, meta)?;
    let mut out = match kind {
        PostProcessing::Raw => Processed {
            embedding: emb.clone(),
            warnings: Vec::new(),
        },
        PostProcessing::Center => center(emb, meta, mode)?,
        PostProcessing::CenterScale => center_scale(emb, meta, mode)?,
        PostProcessing::Tvn => {
            let t = fit_tvn(emb, meta)?;
            let warnings = t.warnings.clone();
            Processed {
                embedding: apply_tvn(&t, emb)?,
                warnings,
            }
        }
    };
    out.embedding = EmbeddingMatrix::new(
        out.embedding.into_values(),
        format!("{}+{}", emb.provenance(), kind),
    )?;
    Ok(out)
}

pub fn center(emb: &EmbeddingMatrix, meta: &Metadata, mode: CenterMode) -> Result<Processed> {
    affine_normalize(emb, meta, mode, false)
}

pub fn center_scale(emb: &EmbeddingMatrix, meta: &Metadata, mode: CenterMode) -> Result<Processed> {
    affine_normalize(emb, meta, mode, true)
}

fn affine_normalize(
    emb: &EmbeddingMatrix,
    meta: &Metadata,
    mode: CenterMode,
    scale: bool,
) -> Result<Processed> {
    check_rows(emb, meta)?;
    let x = emb.values();
    let mut out = x.clone();
    let mut warnings = Vec::new();
    let global_mean = column_means(x.view());
    let global_std = column_stds(x.view(), &global_mean);

    let groups: Vec<(String, Vec<usize>, Array1<f64>, Array1<f64>)> = match mode {
        CenterMode::Global => vec![(
            "<all>".into(),
            (0..x.nrows()).collect(),
            global_mean,
            global_std,
        )],
        CenterMode::PerBatchControl => meta
            .rows_by_batch()
            .into_iter()
            .map(|(batch, rows)| {
                let controls: Vec<usize> =
                    rows.iter().copied().filter(|&i| meta.get(i).is_control).collect();
                if controls.is_empty() {
                    let msg = format!("batch {batch:?} has no controls; using global statistics");
                    warn!("{msg}");
                    warnings.push(msg);
                    (batch, rows, global_mean.clone(), global_std.clone())
                } else {
                    let ctl = x.select(Axis(0), &controls);
                    let mean = column_means(ctl.view());
                    let std = column_stds(ctl.view(), &mean);
                    (batch, rows, mean, std)
                }
            })
            .collect(),
    };

    for (batch, rows, mean, std) in groups {
        let divisor = if scale {
            let floored = std.iter().filter(|&&s| s < STD_FLOOR).count();
            if floored > 0 {
                let msg = format!(
                    "{floored} feature(s) with near-zero std in {batch:?}; divisor floored at {STD_FLOOR:e}"
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            Some(std.mapv(|s| s.max(STD_FLOOR)))
        } else {
            None
        };
        for &i in &rows {
            let mut row = out.row_mut(i);
            row -= &mean;
            if let Some(d) = &divisor {
                row /= d;
            }
        }
    }
    Ok(Processed {
        embedding: EmbeddingMatrix::new(out, emb.provenance())?,
        warnings,
    })
}

/// Whitening fitted on pooled control rows:
/// `x ↦ T · (x − μ_ctl) / σ_ctl` with `T = W · D^{-1/2} · Wᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvnTransform {
    pub control_mean: Array1<f64>,
    /// Floored at [`STD_FLOOR`].
    pub control_std: Array1<f64>,
    /// Orthogonal; columns are eigenvectors of the scaled-control covariance.
    pub rotation: Array2<f64>,
    /// Descending, floored at `EIGEN_FLOOR_REL · max`.
    pub eigenvalues: Array1<f64>,
    pub n_controls: usize,
    pub n_floored: usize,
    pub warnings: Vec<String>,
}

impl TvnTransform {
    /// The symmetric whitening matrix `W · D^{-1/2} · Wᵀ`.
    pub fn matrix(&self) -> Array2<f64> {
        let scaled = &self.rotation * &self.eigenvalues.mapv(|l| l.powf(-0.5));
        scaled.dot(&self.rotation.t())
    }
}

pub fn fit_tvn(emb: &EmbeddingMatrix, meta: &Metadata) -> Result<TvnTransform> {
    check_rows(emb, meta)?;
    let controls = meta.control_rows();
    if controls.is_empty() {
        return Err(Error::InsufficientData("TVN requires control samples".into()));
    }
    let d = emb.dim();
    let mut warnings = Vec::new();
    if controls.len() < d + 1 {
        let msg = format!(
            "TVN: {} controls for dim {d}; covariance is rank deficient, eigenvalues will be floored",
            controls.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let ctl = emb.values().select(Axis(0), &controls);
    let mean = column_means(ctl.view());
    let std = column_stds(ctl.view(), &mean).mapv(|s| s.max(STD_FLOOR));
    let scaled = (&ctl - &mean) / &std;
    let cov = scaled.t().dot(&scaled) / controls.len() as f64;
    let (mut eigenvalues, rotation) = symmetric_eigen(&cov);
    let max = eigenvalues[0];
    if !(max > 0.0) {
        return Err(Error::Degenerate(
            "control covariance is zero; TVN undefined".into(),
        ));
    }
    let floor = EIGEN_FLOOR_REL * max;
    let mut n_floored = 0;
    eigenvalues.mapv_inplace(|l| {
        if l < floor {
            n_floored += 1;
            floor
        } else {
            l
        }
    });
    Ok(TvnTransform {
        control_mean: mean,
        control_std: std,
        rotation,
        eigenvalues,
        n_controls: controls.len(),
        n_floored,
        warnings,
    })
}

pub fn apply_tvn(t: &TvnTransform, emb: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if emb.dim() != t.control_mean.len() {
        return Err(Error::InvalidArgument(format!(
            "TVN fitted for dim {}, got {}",
            t.control_mean.len(),
            emb.dim()
        )));
    }
    let scaled = (emb.values() - &t.control_mean) / &t.control_std;
    // T is symmetric, so row-vector application is scaled · T.
    let out = par_dot(scaled.view(), t.matrix().view());
    EmbeddingMatrix::new(out, emb.provenance())
}

fn check_rows(emb: &EmbeddingMatrix, meta: &Metadata) -> Result<()> {
    if emb.n_samples() != meta.len() {
        return Err(Error::RowMismatch {
            payload: "embedding".into(),
            expected: meta.len(),
            found: emb.n_samples(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn meta2() -> Metadata {
        Metadata::from_labels(
            &["non-targeting", "non-targeting", "A", "non-targeting", "B", "B"],
            &["b1", "b1", "b1", "b2", "b2", "b2"],
        )
        .unwrap()
    }

    #[test]
    fn per_batch_controls_mean_zero() {
        let emb = EmbeddingMatrix::new(
            array![[1.0, 2.0], [3.0, 4.0], [9.0, 9.0], [5.0, -1.0], [0.0, 0.0], [1.0, 1.0]],
            "x",
        )
        .unwrap();
        let out = center(&emb, &meta2(), CenterMode::PerBatchControl).unwrap();
        let v = out.embedding.values();
        assert_eq!(v.row(0).to_vec(), vec![-1.0, -1.0]);
        assert_eq!(v.row(1).to_vec(), vec![1.0, 1.0]);
        assert_eq!(v.row(2).to_vec(), vec![7.0, 6.0]);
        assert_eq!(v.row(3).to_vec(), vec![0.0, 0.0]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn batch_without_controls_falls_back() {
        let meta = Metadata::from_labels(
            &["non-targeting", "A", "B", "B"],
            &["b1", "b1", "b2", "b2"],
        )
        .unwrap();
        let emb = EmbeddingMatrix::new(array![[0.0], [2.0], [4.0], [6.0]], "x").unwrap();
        let out = center(&emb, &meta, CenterMode::PerBatchControl).unwrap();
        // global mean is 3
        assert_eq!(out.embedding.values()[[2, 0]], 1.0);
        assert_eq!(out.embedding.values()[[3, 0]], 3.0);
        assert!(out.warnings.iter().any(|w| w.contains("b2")));
    }

    #[test]
    fn constant_feature_floored() {
        let emb = EmbeddingMatrix::new(array![[1.0, 2.0], [1.0, 3.0], [1.0, 5.0]], "x").unwrap();
        let meta = Metadata::from_labels(
            &["non-targeting", "non-targeting", "A"],
            &["b", "b", "b"],
        )
        .unwrap();
        let out = center_scale(&emb, &meta, CenterMode::Global).unwrap();
        assert!(out.embedding.values().column(0).iter().all(|&v| v == 0.0));
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn tvn_requires_controls() {
        let meta = Metadata::from_labels(&["A", "B"], &["b", "b"]).unwrap();
        let emb = EmbeddingMatrix::new(array![[1.0], [2.0]], "x").unwrap();
        assert!(fit_tvn(&emb, &meta).is_err());
    }

    #[test]
    fn names_round_trip() {
        for p in PostProcessing::ALL {
            assert_eq!(p.as_str().parse::<PostProcessing>().unwrap(), p);
        }
        assert!("zca".parse::<PostProcessing>().is_err());
    }

    #[test]
    fn provenance_records_step() {
        let emb = EmbeddingMatrix::new(array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]], "pca").unwrap();
        let out = apply(PostProcessing::CenterScale, &emb, &meta2(), CenterMode::Global).unwrap();
        assert_eq!(out.embedding.provenance(), "pca+center_scale");
    }
}
