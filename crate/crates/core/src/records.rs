//! Record schemas and newline-delimited JSON loading/emission.
//!
//! Every on-disk record file is UTF-8 JSONL: one object per line with the
//! exact field names of the structs below. Schema violations carry the
//! 1-based line number; cross-validation against the image set reports the
//! offending record id.

use crate::embedding::{ClipScore, ImageCategory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record {record_id} references unknown image {image_id}")]
    UnknownImageId {
        path: PathBuf,
        line: usize,
        record_id: String,
        image_id: String,
    },
    #[error("{path}:{line}: duplicate record id {id}")]
    DuplicateRecordId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("image {image_id} has {count} QA records; at most 2 are allowed")]
    TooManyQaRecords { image_id: String, count: usize },
    #[error("pair {pair_id} violates invariants: {message}")]
    InvariantViolation { pair_id: String, message: String },
}

/// One dataset in the generation pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset_name: String,
    pub image_count: u64,
    pub uri_prefix: String,
}

/// The data-pool manifest: dataset names are unique.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn total_images(&self) -> u64 {
        self.entries.iter().map(|e| e.image_count).sum()
    }

    pub fn contains(&self, dataset_name: &str) -> bool {
        self.entries.iter().any(|e| e.dataset_name == dataset_name)
    }
}

/// Pipeline status of a generated caption. Transitions only move forward:
/// raw -> scored -> {kept | dropped_score | dropped_length}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStatus {
    Raw,
    Scored,
    DroppedScore,
    DroppedLength,
    Kept,
}

/// Pipeline status of a generated question/answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaStatus {
    Raw,
    Scored,
    DroppedQuestion,
    DroppedAnswer,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub dataset: String,
    pub category: Option<ImageCategory>,
    /// Row index into the image embedding store.
    pub embedding_ref: usize,
}

impl ImageRecord {
    fn check(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("image_id must be non-empty".into());
        }
        if self.dataset.is_empty() {
            return Err("dataset must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub generator_id: String,
    /// Which of the five generation prompts produced this caption ("1".."5").
    pub prompt_id: String,
    pub text: String,
    pub word_count: usize,
    pub score: Option<ClipScore>,
    pub status: CaptionStatus,
}

impl CaptionRecord {
    fn check(&self) -> Result<(), String> {
        if self.caption_id.is_empty() || self.image_id.is_empty() {
            return Err("caption_id and image_id must be non-empty".into());
        }
        match self.prompt_id.parse::<u8>() {
            Ok(1..=5) => {}
            _ => {
                return Err(format!(
                    "prompt_id {:?} must be \"1\"..\"5\"",
                    self.prompt_id
                ))
            }
        }
        let actual = self.text.split_whitespace().count();
        if actual == 0 {
            return Err("text must contain at least one word".into());
        }
        if self.word_count != actual {
            return Err(format!(
                "word_count {} does not match whitespace token count {}",
                self.word_count, actual
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub qa_id: String,
    pub image_id: String,
    pub question: String,
    pub positive: String,
    pub negative: String,
    pub question_score: Option<ClipScore>,
    pub synthetic_caption: Option<String>,
    pub synthetic_score: Option<ClipScore>,
    pub status: QaStatus,
}

impl QARecord {
    fn check(&self) -> Result<(), String> {
        if self.qa_id.is_empty() || self.image_id.is_empty() {
            return Err("qa_id and image_id must be non-empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question must be non-empty".into());
        }
        if self.positive == self.negative {
            return Err("positive and negative answers must differ".into());
        }
        Ok(())
    }
}

/// Where a preference pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Caption,
    Qa,
}

/// The pipeline's output unit: (prompt, chosen, rejected) with score
/// provenance. Caption pairs carry a real margin; QA pairs are gated by the
/// synthetic-caption score and carry rejected_score = 0 and margin = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub image_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_score: ClipScore,
    pub rejected_score: ClipScore,
    pub margin: f32,
    pub source: PairSource,
}

impl PreferencePair {
    /// Check the pair invariants; `margin_min` is the caption-pair margin
    /// threshold in effect for the run.
    pub fn check(&self, margin_min: f32) -> Result<(), String> {
        if self.pair_id.is_empty() || self.image_id.is_empty() {
            return Err("pair_id and image_id must be non-empty".into());
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected must differ".into());
        }
        match self.source {
            PairSource::Caption => {
                let margin = self.chosen_score.value() - self.rejected_score.value();
                if self.margin != margin {
                    return Err(format!(
                        "margin {} does not equal chosen_score - rejected_score = {}",
                        self.margin, margin
                    ));
                }
                if self.margin <= margin_min {
                    return Err(format!(
                        "caption-pair margin {} is not greater than the threshold {}",
                        self.margin, margin_min
                    ));
                }
            }
            PairSource::Qa => {
                if self.margin != 0.0 || self.rejected_score.value() != 0.0 {
                    return Err("qa pairs carry margin = 0 and rejected_score = 0".into());
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a JSONL file, attaching 1-based line numbers to every record.
/// Blank lines are rejected as schema errors ("one object per line").
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = ix + 1;
        if line.trim().is_empty() {
            return Err(IngestError::Schema {
                path: path.to_path_buf(),
                line: line_no,
                message: "blank line".into(),
            });
        }
        let record: T = serde_json::from_str(&line).map_err(|e| IngestError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

/// Write records as compact JSONL, one per line, in the order given.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| IngestError::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, IngestError> {
    let path = path.as_ref();
    let rows: Vec<(usize, ManifestEntry)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (line, entry) in &rows {
        if entry.dataset_name.is_empty() {
            return Err(IngestError::Schema {
                path: path.to_path_buf(),
                line: *line,
                message: "dataset_name must be non-empty".into(),
            });
        }
        if !seen.insert(entry.dataset_name.clone()) {
            return Err(IngestError::DuplicateRecordId {
                path: path.to_path_buf(),
                line: *line,
                id: entry.dataset_name.clone(),
            });
        }
    }
    Ok(DatasetManifest {
        entries: rows.into_iter().map(|(_, e)| e).collect(),
    })
}

pub fn load_image_records(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, IngestError> {
    let path = path.as_ref();
    let rows: Vec<(usize, ImageRecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (line, record) in &rows {
        record.check().map_err(|message| IngestError::Schema {
            path: path.to_path_buf(),
            line: *line,
            message,
        })?;
        if !seen.insert(record.image_id.clone()) {
            return Err(IngestError::DuplicateRecordId {
                path: path.to_path_buf(),
                line: *line,
                id: record.image_id.clone(),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Load caption records; when `known_images` is given, every record's
/// image_id must resolve (orphans are a load error, never a silent skip).
pub fn load_caption_records(
    path: impl AsRef<Path>,
    known_images: Option<&HashSet<String>>,
) -> Result<Vec<CaptionRecord>, IngestError> {
    let path = path.as_ref();
    let rows: Vec<(usize, CaptionRecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (line, record) in &rows {
        record.check().map_err(|message| IngestError::Schema {
            path: path.to_path_buf(),
            line: *line,
            message,
        })?;
        if !seen.insert(record.caption_id.clone()) {
            return Err(IngestError::DuplicateRecordId {
                path: path.to_path_buf(),
                line: *line,
                id: record.caption_id.clone(),
            });
        }
        if let Some(known) = known_images {
            if !known.contains(&record.image_id) {
                return Err(IngestError::UnknownImageId {
                    path: path.to_path_buf(),
                    line: *line,
                    record_id: record.caption_id.clone(),
                    image_id: record.image_id.clone(),
                });
            }
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Load QA records; enforces unique qa_ids, the at-most-2-per-image bound,
/// and (optionally) image cross-validation.
pub fn load_qa_records(
    path: impl AsRef<Path>,
    known_images: Option<&HashSet<String>>,
) -> Result<Vec<QARecord>, IngestError> {
    let path = path.as_ref();
    let rows: Vec<(usize, QARecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut per_image: HashMap<String, usize> = HashMap::new();
    for (line, record) in &rows {
        record.check().map_err(|message| IngestError::Schema {
            path: path.to_path_buf(),
            line: *line,
            message,
        })?;
        if !seen.insert(record.qa_id.clone()) {
            return Err(IngestError::DuplicateRecordId {
                path: path.to_path_buf(),
                line: *line,
                id: record.qa_id.clone(),
            });
        }
        if let Some(known) = known_images {
            if !known.contains(&record.image_id) {
                return Err(IngestError::UnknownImageId {
                    path: path.to_path_buf(),
                    line: *line,
                    record_id: record.qa_id.clone(),
                    image_id: record.image_id.clone(),
                });
            }
        }
        *per_image.entry(record.image_id.clone()).or_insert(0) += 1;
    }
    for (image_id, count) in per_image {
        if count > 2 {
            return Err(IngestError::TooManyQaRecords { image_id, count });
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Validate and write preference pairs, sorted by (image_id, pair_id).
/// Returns the number of records written. Re-loading round-trips exactly.
pub fn emit_pairs(
    pairs: &[PreferencePair],
    margin_min: f32,
    path: impl AsRef<Path>,
) -> Result<usize, IngestError> {
    let path = path.as_ref();
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    for pair in &sorted {
        pair.check(margin_min)
            .map_err(|message| IngestError::InvariantViolation {
                pair_id: pair.pair_id.clone(),
                message,
            })?;
    }
    sorted.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| a.pair_id.cmp(&b.pair_id))
    });
    let mut seen = HashSet::new();
    for pair in &sorted {
        if !seen.insert(pair.pair_id.as_str()) {
            return Err(IngestError::InvariantViolation {
                pair_id: pair.pair_id.clone(),
                message: "duplicate pair_id".into(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for pair in &sorted {
        let line = serde_json::to_string(pair).map_err(|e| IngestError::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(sorted.len())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>, IngestError> {
    let path = path.as_ref();
    Ok(read_jsonl(path)?.into_iter().map(|(_, p)| p).collect())
}

/// Group captions by image id, preserving file order within each group.
pub fn captions_by_image(captions: &[CaptionRecord]) -> BTreeMap<&str, Vec<&CaptionRecord>> {
    let mut map: BTreeMap<&str, Vec<&CaptionRecord>> = BTreeMap::new();
    for c in captions {
        map.entry(c.image_id.as_str()).or_default().push(c);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn caption(id: &str, image: &str, text: &str) -> CaptionRecord {
        CaptionRecord {
            caption_id: id.into(),
            image_id: image.into(),
            generator_id: "gen-a".into(),
            prompt_id: "1".into(),
            text: text.into(),
            word_count: text.split_whitespace().count(),
            score: None,
            status: CaptionStatus::Raw,
        }
    }

    #[test]
    fn empty_file_loads_empty_list() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_caption_records(&path, None).unwrap().is_empty());
    }

    #[test]
    fn missing_field_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&caption("c1", "i1", "a dog")).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"caption_id\":\"c2\"}}\n")).unwrap();
        match load_caption_records(&path, None).unwrap_err() {
            IngestError::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn records_load_in_file_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = vec![
            caption("c3", "i1", "one"),
            caption("c1", "i1", "two"),
            caption("c2", "i1", "three"),
        ];
        write_jsonl(&path, &records).unwrap();
        let loaded = load_caption_records(&path, None).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn word_count_mismatch_is_schema_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut bad = caption("c1", "i1", "three word text");
        bad.word_count = 2;
        write_jsonl(&path, &[bad]).unwrap();
        assert!(matches!(
            load_caption_records(&path, None).unwrap_err(),
            IngestError::Schema { line: 1, .. }
        ));
    }

    #[test]
    fn unknown_image_id_detected_when_cross_validating() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &[caption("c1", "ghost", "a dog")]).unwrap();
        let known: HashSet<String> = ["i1".to_string()].into();
        assert!(matches!(
            load_caption_records(&path, Some(&known)).unwrap_err(),
            IngestError::UnknownImageId { .. }
        ));
    }

    fn qa(id: &str, image: &str) -> QARecord {
        QARecord {
            qa_id: id.into(),
            image_id: image.into(),
            question: "What color is the car in the image?".into(),
            positive: "red".into(),
            negative: "blue".into(),
            question_score: None,
            synthetic_caption: None,
            synthetic_score: None,
            status: QaStatus::Raw,
        }
    }

    #[test]
    fn more_than_two_qa_per_image_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        write_jsonl(&path, &[qa("q1", "i1"), qa("q2", "i1"), qa("q3", "i1")]).unwrap();
        assert!(matches!(
            load_qa_records(&path, None).unwrap_err(),
            IngestError::TooManyQaRecords { count: 3, .. }
        ));
    }

    #[test]
    fn equal_positive_negative_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let mut bad = qa("q1", "i1");
        bad.negative = bad.positive.clone();
        write_jsonl(&path, &[bad]).unwrap();
        assert!(matches!(
            load_qa_records(&path, None).unwrap_err(),
            IngestError::Schema { line: 1, .. }
        ));
    }

    fn pair(id: &str, image: &str, chosen_score: f32, rejected_score: f32) -> PreferencePair {
        PreferencePair {
            pair_id: id.into(),
            image_id: image.into(),
            prompt: "Describe this image in detail.".into(),
            chosen: "a red car parked outside".into(),
            rejected: "a blue car".into(),
            chosen_score: ClipScore(chosen_score),
            rejected_score: ClipScore(rejected_score),
            margin: chosen_score - rejected_score,
            source: PairSource::Caption,
        }
    }

    #[test]
    fn emit_empty_list_writes_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        assert_eq!(emit_pairs(&[], 2.0, &path).unwrap(), 0);
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn emit_then_load_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let pairs = vec![
            pair("cap-i2", "i2", 33.25, 28.5),
            pair("cap-i1", "i1", 31.0, 28.5),
        ];
        assert_eq!(emit_pairs(&pairs, 2.0, &path).unwrap(), 2);
        let loaded = load_pairs(&path).unwrap();
        // sorted by (image_id, pair_id)
        assert_eq!(loaded[0], pairs[1]);
        assert_eq!(loaded[1], pairs[0]);
        // byte-exact on re-emit
        let bytes_a = std::fs::read(&path).unwrap();
        let path_b = dir.path().join("p2.jsonl");
        emit_pairs(&loaded, 2.0, &path_b).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path_b).unwrap());
    }

    #[test]
    fn emit_rejects_sub_threshold_margin() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let bad = pair("cap-i1", "i1", 30.0, 29.0); // margin 1.0 <= 2.0
        match emit_pairs(&[bad], 2.0, &path).unwrap_err() {
            IngestError::InvariantViolation { pair_id, .. } => assert_eq!(pair_id, "cap-i1"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn emit_rejects_inconsistent_margin() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut bad = pair("cap-i1", "i1", 33.0, 28.0);
        bad.margin = 4.0;
        assert!(matches!(
            emit_pairs(&[bad], 2.0, &path).unwrap_err(),
            IngestError::InvariantViolation { .. }
        ));
    }

    #[test]
    fn qa_pair_margin_must_be_zero() {
        let mut p = pair("qa-q1", "i1", 31.0, 0.0);
        p.source = PairSource::Qa;
        p.margin = 0.0;
        assert!(p.check(2.0).is_ok());
        p.margin = 1.0;
        assert!(p.check(2.0).is_err());
    }

    #[test]
    fn manifest_requires_unique_names() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry {
                dataset_name: "coco".into(),
                image_count: 10,
                uri_prefix: "a/".into(),
            },
            ManifestEntry {
                dataset_name: "coco".into(),
                image_count: 5,
                uri_prefix: "b/".into(),
            },
        ];
        write_jsonl(&path, &entries).unwrap();
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            IngestError::DuplicateRecordId { .. }
        ));
    }

    #[test]
    fn manifest_totals() {
        let manifest = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    dataset_name: "a".into(),
                    image_count: 3,
                    uri_prefix: "".into(),
                },
                ManifestEntry {
                    dataset_name: "b".into(),
                    image_count: 4,
                    uri_prefix: "".into(),
                },
            ],
        };
        assert_eq!(manifest.total_images(), 7);
        assert!(manifest.contains("a"));
        assert!(!manifest.contains("c"));
    }
}
