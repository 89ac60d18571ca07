//! On-disk bundle: `manifest.json`, `metadata.tsv`, `expression.f32` and
//! `embeddings/<name>.f32`.
//!
//! Payloads are little-endian f32, row-major, without headers. Shapes live in
//! the manifest. Values are held as f64 in memory and rounded to f32 on
//! write, so `load -> write -> load` is bit-exact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    validate_name, Dataset, EmbeddingMatrix, ExpressionMatrix, Layout, Metadata, SampleMetadata,
    DEFAULT_CONTROL_LABEL,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const METADATA_FILE: &str = "metadata.tsv";
const EXPRESSION_FILE: &str = "expression.f32";
const FORMAT_VERSION: u32 = 1;
const METADATA_COLUMNS: [&str; 5] = ["sample_id", "perturbation", "batch", "is_control", "cell_line"];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    endianness: String,
    dtype: String,
    n_samples: usize,
    #[serde(default = "default_control_label")]
    control_label: String,
    metadata: MetadataEntry,
    #[serde(default)]
    expression: Option<ExpressionEntry>,
    #[serde(default)]
    embeddings: Vec<EmbeddingEntry>,
}

fn default_control_label() -> String {
    DEFAULT_CONTROL_LABEL.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataEntry {
    file: String,
    columns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpressionEntry {
    file: String,
    n_genes: usize,
    layout_tag: String,
    gene_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingEntry {
    name: String,
    file: String,
    dim: usize,
    #[serde(default)]
    provenance: String,
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.endianness != "little" || manifest.dtype != "f32" {
        return Err(Error::Manifest(format!(
            "unsupported payload encoding {}/{}",
            manifest.endianness, manifest.dtype
        )));
    }
    if manifest.expression.is_none() && manifest.embeddings.is_empty() {
        return Err(Error::Manifest(
            "bundle has neither expression nor embedding payloads".into(),
        ));
    }

    let metadata = read_metadata(&dir.join(&manifest.metadata.file), &manifest.control_label)?;
    if metadata.len() != manifest.n_samples {
        return Err(Error::RowMismatch {
            payload: manifest.metadata.file.clone(),
            expected: manifest.n_samples,
            found: metadata.len(),
        });
    }
    let n = metadata.len();

    let expression = match &manifest.expression {
        Some(entry) => {
            let layout = Layout::parse(&entry.layout_tag)?;
            if entry.gene_ids.len() != entry.n_genes {
                return Err(Error::Manifest(format!(
                    "expression lists {} gene ids but n_genes = {}",
                    entry.gene_ids.len(),
                    entry.n_genes
                )));
            }
            let values = read_payload(&dir.join(&entry.file), &entry.file, n, entry.n_genes)?;
            Some(ExpressionMatrix::new(entry.gene_ids.clone(), values, layout)?)
        }
        None => None,
    };

    let mut embeddings = BTreeMap::new();
    for entry in &manifest.embeddings {
        validate_name(&entry.name)?;
        let values = read_payload(&dir.join(&entry.file), &entry.file, n, entry.dim)?;
        let emb = EmbeddingMatrix::new(values, entry.provenance.clone()).map_err(|e| match e {
            Error::NonFinite { row, col, .. } => Error::NonFinite {
                payload: entry.file.clone(),
                row,
                col,
            },
            other => other,
        })?;
        if embeddings.insert(entry.name.clone(), emb).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate embedding name {:?}",
                entry.name
            )));
        }
    }

    Dataset::new(metadata, expression, embeddings)
}

pub fn write_bundle(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    // Reject anything that would not survive the f32 round trip before touching disk.
    if let Some(expr) = &dataset.expression {
        check_f32_representable(expr.values(), EXPRESSION_FILE)?;
    }
    for (name, emb) in &dataset.embeddings {
        check_f32_representable(emb.values(), &format!("embeddings/{name}.f32"))?;
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metadata(&dir.join(METADATA_FILE), &dataset.metadata)?;

    let expression = match &dataset.expression {
        Some(expr) => {
            write_payload(&dir.join(EXPRESSION_FILE), expr.values())?;
            Some(ExpressionEntry {
                file: EXPRESSION_FILE.into(),
                n_genes: expr.n_genes(),
                layout_tag: expr.layout().as_str().into(),
                gene_ids: expr.gene_ids().to_vec(),
            })
        }
        None => None,
    };

    let mut embeddings = Vec::with_capacity(dataset.embeddings.len());
    if !dataset.embeddings.is_empty() {
        let emb_dir = dir.join("embeddings");
        fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
    }
    for (name, emb) in &dataset.embeddings {
        let file = format!("embeddings/{name}.f32");
        write_payload(&dir.join(&file), emb.values())?;
        embeddings.push(EmbeddingEntry {
            name: name.clone(),
            file,
            dim: emb.dim(),
            provenance: emb.provenance().to_string(),
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        dtype: "f32".into(),
        n_samples: dataset.n_samples(),
        control_label: dataset.metadata.control_label().to_string(),
        metadata: MetadataEntry {
            file: METADATA_FILE.into(),
            columns: METADATA_COLUMNS.iter().map(|c| c.to_string()).collect(),
        },
        expression,
        embeddings,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// SHA-256 over the f32 little-endian encoding of a matrix, i.e. over exactly
/// the bytes a payload file would contain.
pub fn payload_checksum(values: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    for &v in values.iter() {
        hasher.update((v as f32).to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_f32_representable(values: &Array2<f64>, payload: &str) -> Result<()> {
    match values
        .indexed_iter()
        .find(|(_, &v)| !(v as f32).is_finite())
    {
        Some(((row, col), _)) => Err(Error::NonFinite {
            payload: payload.to_string(),
            row,
            col,
        }),
        None => Ok(()),
    }
}

fn read_payload(path: &Path, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let row_bytes = cols * 4;
    if cols == 0 || bytes.len() % row_bytes != 0 {
        return Err(Error::Manifest(format!(
            "{name}: {} bytes is not a whole number of {cols}-column f32 rows",
            bytes.len()
        )));
    }
    let found = bytes.len() / row_bytes;
    if found != rows {
        return Err(Error::RowMismatch {
            payload: name.to_string(),
            expected: rows,
            found,
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            payload: name.to_string(),
            row: pos / cols,
            col: pos % cols,
        });
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Manifest(format!("{name}: {e}")))
}

fn write_payload(path: &Path, values: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for &v in values.iter() {
        out.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_metadata(path: &Path, control_label: &str) -> Result<Metadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.split('\t').collect(),
        None => return Err(Error::Validation(format!("{}: empty metadata", path.display()))),
    };
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(c_id), Some(c_pert), Some(c_batch), Some(c_ctl)) = (
        col("sample_id"),
        col("perturbation"),
        col("batch"),
        col("is_control"),
    ) else {
        return Err(Error::Validation(format!(
            "{}: header must contain sample_id, perturbation, batch, is_control",
            path.display()
        )));
    };
    let c_line = col("cell_line");

    let mut samples = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                content: line.to_string(),
            });
        }
        let is_control = match fields[c_ctl] {
            "true" | "1" | "True" | "TRUE" => true,
            "false" | "0" | "False" | "FALSE" => false,
            _ => {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    content: line.to_string(),
                })
            }
        };
        let cell_line = c_line
            .map(|c| fields[c])
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        samples.push(SampleMetadata {
            sample_id: fields[c_id].to_string(),
            perturbation: fields[c_pert].to_string(),
            batch: fields[c_batch].to_string(),
            is_control,
            cell_line,
        });
    }
    Metadata::new(samples, control_label)
}

fn write_metadata(path: &Path, meta: &Metadata) -> Result<()> {
    for s in meta.samples() {
        let fields = [&s.sample_id, &s.perturbation, &s.batch];
        if fields.iter().any(|f| f.contains(['\t', '\n', '\r']))
            || s.cell_line.as_deref().is_some_and(|c| c.contains(['\t', '\n', '\r']))
        {
            return Err(Error::Validation(format!(
                "sample {:?}: metadata fields may not contain tabs or newlines",
                s.sample_id
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", METADATA_COLUMNS.join("\t")).map_err(io)?;
    for s in meta.samples() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.sample_id,
            s.perturbation,
            s.batch,
            s.is_control,
            s.cell_line.as_deref().unwrap_or("")
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        let meta = Metadata::from_labels(
            &["G1", "non-targeting", "G2"],
            &["b1", "b1", "b2"],
        )
        .unwrap();
        let mut embs = BTreeMap::new();
        embs.insert(
            "e".to_string(),
            EmbeddingMatrix::new(array![[0.0, 1.0], [-1.0, 0.5], [2.0, -2.0]], "raw").unwrap(),
        );
        Dataset::new(meta, None, embs).unwrap()
    }

    #[test]
    fn embedding_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_bundle(&ds, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::MissingManifest(_))
        ));
    }

    #[test]
    fn truncated_embedding_is_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("embeddings/e.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::RowMismatch { expected: 3, found: 2, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("row mismatch"));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("embeddings/e.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::NonFinite { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn unknown_layout_tag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let meta = Metadata::from_labels(&["G1"], &["b1"]).unwrap();
        let expr = ExpressionMatrix::new(vec!["g".into()], array![[3.0]], Layout::RawCounts).unwrap();
        write_bundle(&Dataset::new(meta, Some(expr), BTreeMap::new()).unwrap(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("raw_counts", "tpm");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::UnknownLayout(_))));
    }

    #[test]
    fn f32_overflow_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.embeddings.insert(
            "big".into(),
            EmbeddingMatrix::new(array![[1e300], [0.0], [0.0]], "x").unwrap(),
        );
        assert!(matches!(write_bundle(&ds, dir.path().join("b")), Err(Error::NonFinite { .. })));
        assert!(!dir.path().join("b").exists());
    }
}
