//! In-memory data model: sample metadata, expression and embedding matrices,
//! and link databases.
//!
//! Everything here is validated on construction, so downstream code can rely
//! on the invariants (unique sample ids, finite values, aligned rows).

mod bundle;
mod links;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{load_bundle, payload_checksum, write_bundle, MANIFEST_FILE};
pub use links::{load_link_db, parse_link_db, LinkDatabase, LinkDbLoad};

/// Reserved perturbation label for control samples unless the manifest overrides it.
pub const DEFAULT_CONTROL_LABEL: &str = "non-targeting";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub sample_id: String,
    pub perturbation: String,
    pub batch: String,
    pub is_control: bool,
    pub cell_line: Option<String>,
}

/// Ordered sample annotations for one bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    samples: Vec<SampleMetadata>,
    control_label: String,
}

impl Metadata {
    pub fn new(samples: Vec<SampleMetadata>, control_label: impl Into<String>) -> Result<Self> {
        let control_label = control_label.into();
        if control_label.is_empty() {
            return Err(Error::Validation("control label must be non-empty".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (row, s) in samples.iter().enumerate() {
            if s.sample_id.is_empty() {
                return Err(Error::Validation(format!("row {row}: empty sample_id")));
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate sample_id {:?}",
                    s.sample_id
                )));
            }
            if s.batch.is_empty() {
                return Err(Error::Validation(format!("row {row}: empty batch")));
            }
            if s.is_control != (s.perturbation == control_label) {
                return Err(Error::Validation(format!(
                    "row {row}: is_control={} but perturbation is {:?} (control label {:?})",
                    s.is_control, s.perturbation, control_label
                )));
            }
        }
        Ok(Self {
            samples,
            control_label,
        })
    }

    /// Convenience constructor using the default control label and deriving
    /// `is_control` from the perturbation label.
    pub fn from_labels<S: AsRef<str>>(perturbations: &[S], batches: &[S]) -> Result<Self> {
        if perturbations.len() != batches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} perturbation labels vs {} batch labels",
                perturbations.len(),
                batches.len()
            )));
        }
        let samples = perturbations
            .iter()
            .zip(batches)
            .enumerate()
            .map(|(i, (p, b))| SampleMetadata {
                sample_id: format!("s{i}"),
                perturbation: p.as_ref().to_string(),
                batch: b.as_ref().to_string(),
                is_control: p.as_ref() == DEFAULT_CONTROL_LABEL,
                cell_line: None,
            })
            .collect();
        Self::new(samples, DEFAULT_CONTROL_LABEL)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleMetadata] {
        &self.samples
    }

    pub fn get(&self, row: usize) -> &SampleMetadata {
        &self.samples[row]
    }

    pub fn control_label(&self) -> &str {
        &self.control_label
    }

    /// Sorted distinct batch identifiers.
    pub fn batches(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.batch.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Batch names (sorted) and a per-row index into them.
    pub fn batch_codes(&self) -> (Vec<String>, Vec<usize>) {
        let names = self.batches();
        let lookup: BTreeMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, b)| (b.as_str(), i))
            .collect();
        let codes = self.samples.iter().map(|s| lookup[s.batch.as_str()]).collect();
        (names, codes)
    }

    /// Sorted distinct non-control perturbation labels.
    pub fn perturbations(&self) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| !s.is_control)
            .map(|s| s.perturbation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Row indices grouped by perturbation label (controls excluded), in label order.
    pub fn rows_by_perturbation(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !s.is_control {
                groups.entry(s.perturbation.clone()).or_default().push(i);
            }
        }
        groups
    }

    /// Row indices grouped by batch, in batch order.
    pub fn rows_by_batch(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.batch.clone()).or_default().push(i);
        }
        groups
    }

    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].is_control).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Metadata {
        Metadata {
            samples: rows.iter().map(|&r| self.samples[r].clone()).collect(),
            control_label: self.control_label.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    RawCounts,
    Lognorm,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::RawCounts => "raw_counts",
            Layout::Lognorm => "lognorm",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "raw_counts" => Ok(Layout::RawCounts),
            "lognorm" => Ok(Layout::Lognorm),
            other => Err(Error::UnknownLayout(other.to_string())),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Samples × genes expression values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    gene_ids: Vec<String>,
    values: Array2<f64>,
    layout: Layout,
}

impl ExpressionMatrix {
    pub fn new(gene_ids: Vec<String>, values: Array2<f64>, layout: Layout) -> Result<Self> {
        if gene_ids.len() != values.ncols() {
            return Err(Error::Validation(format!(
                "{} gene ids for {} expression columns",
                gene_ids.len(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(gene_ids.len());
        for g in &gene_ids {
            if !seen.insert(g.as_str()) {
                return Err(Error::Validation(format!("duplicate gene id {g:?}")));
            }
        }
        check_finite(&values, "expression")?;
        if layout == Layout::RawCounts {
            if let Some(((row, col), _)) = values.indexed_iter().find(|(_, &v)| v < 0.0) {
                return Err(Error::Validation(format!(
                    "negative raw count at row {row}, column {col}"
                )));
            }
        }
        Ok(Self {
            gene_ids,
            values,
            layout,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn select_rows(&self, rows: &[usize]) -> ExpressionMatrix {
        ExpressionMatrix {
            gene_ids: self.gene_ids.clone(),
            values: self.values.select(Axis(0), rows),
            layout: self.layout,
        }
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Samples × dim embedding, row-aligned with the bundle metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
    provenance: String,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>, provenance: impl Into<String>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Validation("embedding dim must be >= 1".into()));
        }
        check_finite(&values, "embedding")?;
        Ok(Self {
            values,
            provenance: provenance.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            values: self.values.select(Axis(0), rows),
            provenance: self.provenance.clone(),
        }
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Metadata plus optional expression and named embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metadata: Metadata,
    pub expression: Option<ExpressionMatrix>,
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
}

impl Dataset {
    pub fn new(
        metadata: Metadata,
        expression: Option<ExpressionMatrix>,
        embeddings: BTreeMap<String, EmbeddingMatrix>,
    ) -> Result<Self> {
        let ds = Self {
            metadata,
            expression,
            embeddings,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.metadata.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.metadata.len();
        if let Some(expr) = &self.expression {
            if expr.n_samples() != n {
                return Err(Error::RowMismatch {
                    payload: "expression".into(),
                    expected: n,
                    found: expr.n_samples(),
                });
            }
        }
        for (name, emb) in &self.embeddings {
            validate_name(name)?;
            if emb.n_samples() != n {
                return Err(Error::RowMismatch {
                    payload: format!("embeddings/{name}"),
                    expected: n,
                    found: emb.n_samples(),
                });
            }
        }
        Ok(())
    }

    pub fn embedding(&self, name: &str) -> Result<&EmbeddingMatrix> {
        self.embeddings
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no embedding named {name:?}")))
    }

    pub fn expression(&self) -> Result<&ExpressionMatrix> {
        self.expression
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("bundle has no expression payload".into()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            metadata: self.metadata.subset(rows),
            expression: self.expression.as_ref().map(|e| e.select_rows(rows)),
            embeddings: self
                .embeddings
                .iter()
                .map(|(k, v)| (k.clone(), v.select_rows(rows)))
                .collect(),
        }
    }
}

pub(crate) fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "embedding name {name:?} must be non-empty [A-Za-z0-9_.-]"
        )))
    }
}

fn check_finite(values: &Array2<f64>, payload: &str) -> Result<()> {
    match values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(Error::NonFinite {
            payload: payload.to_string(),
            row,
            col,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(id: &str, pert: &str, batch: &str) -> SampleMetadata {
        SampleMetadata {
            sample_id: id.into(),
            perturbation: pert.into(),
            batch: batch.into(),
            is_control: pert == DEFAULT_CONTROL_LABEL,
            cell_line: None,
        }
    }

    #[test]
    fn duplicate_sample_ids_rejected() {
        let err = Metadata::new(
            vec![sample("a", "G1", "b1"), sample("a", "G2", "b1")],
            DEFAULT_CONTROL_LABEL,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn control_flag_must_match_label() {
        let mut s = sample("a", "G1", "b1");
        s.is_control = true;
        assert!(Metadata::new(vec![s], DEFAULT_CONTROL_LABEL).is_err());
    }

    #[test]
    fn raw_counts_reject_negative() {
        let err = ExpressionMatrix::new(
            vec!["g1".into(), "g2".into()],
            array![[1.0, -1.0]],
            Layout::RawCounts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        // lognorm-tagged values may be anything finite
        ExpressionMatrix::new(
            vec!["g1".into(), "g2".into()],
            array![[1.0, -1.0]],
            Layout::Lognorm,
        )
        .unwrap();
    }

    #[test]
    fn embedding_rejects_nan() {
        let err = EmbeddingMatrix::new(array![[0.0, f64::NAN]], "x").unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1, .. }));
    }

    #[test]
    fn batch_codes_are_sorted() {
        let meta = Metadata::from_labels(&["G1", "G2", "G1"], &["b2", "b1", "b2"]).unwrap();
        let (names, codes) = meta.batch_codes();
        assert_eq!(names, vec!["b1", "b2"]);
        assert_eq!(codes, vec![1, 0, 1]);
    }

    #[test]
    fn unknown_layout() {
        assert!(matches!(
            Layout::parse("tpm"),
            Err(Error::UnknownLayout(t)) if t == "tpm"
        ));
    }
}
