//! Labeled embedding datasets: ingestion, validation, normalization and
//! persistence.
//!
//! Embeddings come from an external visual encoder and are stored as UTF-8
//! JSON lines. The first line is a header, every following line is a record:
//!
//! ```text
//! {"dim":4,"num_classes":2}
//! {"id":"a","label":0,"vector":[0.1,0.2,0.3,0.4],"image":"imgs/a.png"}
//! {"id":"b","label":1,"vector":[0.5,0.6,0.7,0.8]}
//! ```
//!
//! Coordinates are `f64` and are written with shortest round-trip formatting,
//! so `load(save(ds)) == ds` bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Tolerance used when checking that a dataset is already unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embeddings file not found: {0}")]
    FileMissing(PathBuf),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} coordinates, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: label {label} is outside 0..{num_classes}")]
    UnknownClass {
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("class {0} has no records")]
    EmptyClass(usize),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {0:?} has a non-finite coordinate")]
    NonFinite(String),
    #[error("record {0:?} is a zero vector and cannot be normalized")]
    ZeroVector(String),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: usize,
    pub vector: Vec<f64>,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label: usize, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            label,
            vector,
            image_ref: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    dim: usize,
    num_classes: usize,
}

/// An immutable, validated collection of labeled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<EmbeddingRecord>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset, checking every invariant: dimension, finiteness,
    /// label range, id uniqueness and that every class is populated.
    pub fn new(records: Vec<EmbeddingRecord>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::Validation("dim must be positive".into()));
        }
        if num_classes == 0 {
            return Err(EmbeddingError::Validation(
                "num_classes must be positive".into(),
            ));
        }
        if records.len() < num_classes {
            return Err(EmbeddingError::Validation(format!(
                "{} records cannot cover {} classes",
                records.len(),
                num_classes
            )));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut counts = vec![0usize; num_classes];
        for (i, r) in records.iter().enumerate() {
            // Record lines start after the header.
            let line = i + 2;
            check_record(r, line, dim, num_classes)?;
            if !seen.insert(r.id.as_str()) {
                return Err(EmbeddingError::DuplicateId(r.id.clone()));
            }
            counts[r.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(EmbeddingError::EmptyClass(c));
        }
        Ok(Self {
            records,
            dim,
            num_classes,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, index: usize) -> &EmbeddingRecord {
        &self.records[index]
    }

    pub fn find(&self, id: &str) -> Option<(usize, &EmbeddingRecord)> {
        self.records.iter().enumerate().find(|(_, r)| r.id == id)
    }

    /// Number of records per class, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Record indices per class, each list in dataset order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, r) in self.records.iter().enumerate() {
            members[r.label].push(i);
        }
        members
    }

    pub fn is_normalized(&self) -> bool {
        self.records
            .iter()
            .all(|r| (r.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE)
    }

    /// Returns a copy with every vector scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Result<Self> {
        let mut records = self.records.clone();
        for r in &mut records {
            let n = r.norm();
            if n.is_normal() && n > 1e-150 && n < 1e150 {
                if n != 1.0 {
                    r.vector.iter_mut().for_each(|x| *x /= n);
                }
                continue;
            }
            // The squared norm over- or underflows; rescale by the largest
            // magnitude first.
            let scale = r.vector.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if scale == 0.0 {
                return Err(EmbeddingError::ZeroVector(r.id.clone()));
            }
            r.vector.iter_mut().for_each(|x| *x /= scale);
            let n = l2_norm(&r.vector);
            r.vector.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            records,
            dim: self.dim,
            num_classes: self.num_classes,
        })
    }
}

fn check_record(r: &EmbeddingRecord, line: usize, dim: usize, num_classes: usize) -> Result<()> {
    if r.vector.len() != dim {
        return Err(EmbeddingError::DimensionMismatch {
            line,
            expected: dim,
            found: r.vector.len(),
        });
    }
    if r.vector.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(r.id.clone()));
    }
    if r.label >= num_classes {
        return Err(EmbeddingError::UnknownClass {
            line,
            label: r.label,
            num_classes,
        });
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize_dataset(ds: &Dataset) -> Result<Dataset> {
    ds.normalized()
}

/// Reads an embeddings file. Vectors are returned as stored; call
/// [`normalize_dataset`] explicitly.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(EmbeddingError::FileMissing(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| EmbeddingError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        match header {
            None => header = Some(serde_json::from_str(&line).map_err(parse_err)?),
            Some(h) => {
                let r: EmbeddingRecord = serde_json::from_str(&line).map_err(parse_err)?;
                check_record(&r, line_no, h.dim, h.num_classes)?;
                if !seen.insert(r.id.clone()) {
                    return Err(EmbeddingError::DuplicateId(r.id));
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or(EmbeddingError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Dataset::new(records, header.dim, header.num_classes)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let header = Header {
        dim: ds.dim,
        num_classes: ds.num_classes,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Maps multi-label targets onto single composite classes: each distinct
/// label vector becomes one class. Classes are numbered in lexicographic
/// order of the label vectors, so the mapping does not depend on record order.
pub fn composite_labels(targets: &[Vec<u8>]) -> (Vec<usize>, Vec<Vec<u8>>) {
    let mut index: BTreeMap<&[u8], usize> = BTreeMap::new();
    for t in targets {
        index.insert(t.as_slice(), 0);
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let labels = targets.iter().map(|t| index[t.as_slice()]).collect();
    let classes = index.keys().map(|k| k.to_vec()).collect();
    (labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: usize, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord::new(id, label, v.to_vec())
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.jsonl",
            "{\"dim\":4,\"num_classes\":2}\n\
             {\"id\":\"a\",\"label\":0,\"vector\":[1,0,0,0]}\n\
             {\"id\":\"b\",\"label\":1,\"vector\":[0,1,0,0],\"image\":\"b.png\"}\n\
             {\"id\":\"c\",\"label\":0,\"vector\":[0,0,1,0]}\n",
        );
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.get(1).image_ref.as_deref(), Some("b.png"));
    }

    #[test]
    fn short_vector_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.jsonl",
            "{\"dim\":4,\"num_classes\":1}\n{\"id\":\"a\",\"label\":0,\"vector\":[1,0,0]}\n",
        );
        assert!(matches!(
            load_dataset(&p),
            Err(EmbeddingError::DimensionMismatch {
                line: 2,
                expected: 4,
                found: 3
            })
        ));
    }

    #[test]
    fn declared_but_absent_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.jsonl",
            "{\"dim\":2,\"num_classes\":3}\n\
             {\"id\":\"a\",\"label\":0,\"vector\":[1,0]}\n\
             {\"id\":\"b\",\"label\":1,\"vector\":[0,1]}\n\
             {\"id\":\"c\",\"label\":1,\"vector\":[1,1]}\n",
        );
        assert!(matches!(load_dataset(&p), Err(EmbeddingError::EmptyClass(2))));
    }

    #[test]
    fn label_out_of_range_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.jsonl",
            "{\"dim\":1,\"num_classes\":1}\n{\"id\":\"a\",\"label\":3,\"vector\":[1]}\n",
        );
        assert!(matches!(
            load_dataset(&p),
            Err(EmbeddingError::UnknownClass { line: 2, label: 3, .. })
        ));
        let p = write(
            &dir,
            "d.jsonl",
            "{\"dim\":1,\"num_classes\":1}\n{\"id\":\"a\",\"label\":0,\"vector\":[1]}\n{\"id\":\"a\",\"label\":0,\"vector\":[2]}\n",
        );
        assert!(matches!(load_dataset(&p), Err(EmbeddingError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn garbage_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.jsonl",
            "{\"dim\":1,\"num_classes\":1}\n{\"id\":\"a\",\"label\":0,\"vector\":[1]}\nnot json\n",
        );
        assert!(matches!(load_dataset(&p), Err(EmbeddingError::Parse { line: 3, .. })));
        assert!(matches!(
            load_dataset(dir.path().join("nope.jsonl")),
            Err(EmbeddingError::FileMissing(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let ds = Dataset::new(vec![rec("a", 0, &[3.0, 4.0]), rec("b", 0, &[1.0, 0.0])], 2, 1).unwrap();
        let n = normalize_dataset(&ds).unwrap();
        assert!((n.get(0).vector[0] - 0.6).abs() < 1e-15);
        assert!((n.get(0).vector[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.get(1).vector, vec![1.0, 0.0]);
        assert_eq!(n.get(0).id, "a");

        let z = Dataset::new(vec![rec("z", 0, &[0.0, 0.0])], 2, 1).unwrap();
        assert!(matches!(normalize_dataset(&z), Err(EmbeddingError::ZeroVector(id)) if id == "z"));
    }

    #[test]
    fn empty_dataset_is_invalid() {
        assert!(matches!(
            Dataset::new(vec![], 4, 2),
            Err(EmbeddingError::Validation(_))
        ));
    }

    #[test]
    fn save_to_unwritable_location_is_io_error() {
        let ds = Dataset::new(vec![rec("a", 0, &[1.0])], 1, 1).unwrap();
        let err = save_dataset(&ds, "/nonexistent-dir/sub/file.jsonl").unwrap_err();
        assert!(matches!(err, EmbeddingError::Io(_)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Dataset::new(vec![rec("a", 0, &[f64::NAN])], 1, 1),
            Err(EmbeddingError::NonFinite(_))
        ));
    }

    #[test]
    fn composite_mapping_is_order_independent() {
        let t = vec![vec![0, 1], vec![1, 0], vec![0, 1], vec![0, 0]];
        let (labels, classes) = composite_labels(&t);
        assert_eq!(classes, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        assert_eq!(labels, vec![1, 2, 1, 0]);
    }
}
