//! Line-delimited record formats: annotations, scenes, token-id dumps, and
//! the dataset manifest. All files are order-preserving and
//! concatenation-safe.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::builder::Task;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// A grounded entity in record form: a half-open word span and a box in
/// normalized real coordinates `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub start: usize,
    pub end: usize,
    pub bbox: [f64; 4],
}

/// One annotation line: scene reference, task, words (caption, query, or
/// question), grounded entities, and the answer words for VQA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub scene_id: u64,
    pub task: Task,
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntityRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: String,
    pub color: String,
    pub bbox: [f64; 4],
}

/// Scene geometry, kept separate from annotations so feature grids can be
/// recomputed at any resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub objects: Vec<ObjectRecord>,
}

/// Generation summary written next to the record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub grid: usize,
    pub max_objects: usize,
    pub counts: BTreeMap<String, usize>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| DataError::BadRecord { line: 0, reason: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    read_jsonl_lenient(path).and_then(|(records, skipped)| {
        if let Some((line, reason)) = skipped.into_iter().next() {
            Err(DataError::BadRecord { line, reason })
        } else {
            Ok(records)
        }
    })
}

/// Reads a JSONL file, collecting malformed lines as `(line number, reason)`
/// instead of failing; blank lines are ignored.
pub fn read_jsonl_lenient<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, Vec<(usize, String)>), DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => skipped.push((i + 1, e.to_string())),
        }
    }
    Ok((records, skipped))
}

/// Formats one token-id list as a line of space-separated integers.
pub fn format_id_line(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn parse_id_line(line: &str) -> Result<Vec<u32>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|e| format!("bad token id {t:?}: {e}")))
        .collect()
}

/// Writes one token-id list per line.
pub fn write_id_lines(path: &Path, rows: &[Vec<u32>]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        writeln!(w, "{}", format_id_line(row)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads token-id lines, collecting malformed lines instead of failing.
pub fn read_id_lines(path: &Path) -> Result<(Vec<Vec<u32>>, Vec<(usize, String)>), DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_id_line(&line) {
            Ok(ids) => rows.push(ids),
            Err(reason) => skipped.push((i + 1, reason)),
        }
    }
    Ok((rows, skipped))
}

/// Standard file names inside a dataset directory.
pub mod files {
    pub const VOCAB: &str = "vocab.json";
    pub const SCENES: &str = "scenes.jsonl";
    pub const MANIFEST: &str = "manifest.json";

    pub fn annotations(task: crate::builder::Task) -> String {
        format!("{}.jsonl", task.name())
    }
}
