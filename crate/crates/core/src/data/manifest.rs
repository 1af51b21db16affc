use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const HEADER: [&str; 5] = ["utterance_id", "audio_path", "label", "split", "duration_s"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be train, val or test, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utterance_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub audio_path: String,
    pub label: String,
    pub split: Split,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative audio paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn audio_path(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Sorted label names mapped to class indices.
    pub fn label_index(&self) -> BTreeMap<String, usize> {
        let mut labels: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.into_iter().enumerate().map(|(i, l)| (l.to_string(), i)).collect()
    }
}

/// Reads and validates a manifest. Rows shorter than `min_duration` seconds
/// are dropped when a minimum is given.
pub fn load_manifest(path: &Path, min_duration: Option<f64>) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    let rows = parse_manifest(&bytes, &path.display().to_string(), min_duration)?;
    Ok(Manifest {
        rows,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn parse_manifest(bytes: &[u8], origin: &str, min_duration: Option<f64>) -> Result<Vec<ManifestRow>> {
    let err = |line: u64, message: String| Error::Parse {
        path: origin.to_string(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(err(1, format!("header must be {}", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != HEADER.len() {
            return Err(err(line, format!("expected {} fields, got {}", HEADER.len(), record.len())));
        }
        let field = |i: usize| record[i].trim().to_string();
        let split = field(3).parse::<Split>().map_err(|m| err(line, m))?;
        let duration_s = field(4)
            .parse::<f64>()
            .ok()
            .filter(|d| *d > 0.0 && d.is_finite())
            .ok_or_else(|| err(line, format!("duration_s must be a positive number, got '{}'", field(4))))?;
        let row = ManifestRow {
            utterance_id: field(0),
            audio_path: field(1),
            label: field(2),
            split,
            duration_s,
        };
        if row.utterance_id.is_empty() || row.label.is_empty() {
            return Err(err(line, "utterance_id and label must be non-empty".into()));
        }
        if !seen.insert(row.utterance_id.clone()) {
            return Err(Error::Data(format!(
                "{origin}:{line}: duplicate utterance id '{}'",
                row.utterance_id
            )));
        }
        if min_duration.is_none_or(|m| row.duration_s >= m) {
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn manifest_to_bytes(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.utterance_id.as_str(),
            r.audio_path.as_str(),
            r.label.as_str(),
            r.split.as_str(),
            &r.duration_s.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_atomic(path, &manifest_to_bytes(rows)?)
}
