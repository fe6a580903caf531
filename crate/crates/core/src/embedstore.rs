//! Labeled embedding vectors and the line-oriented embedding file format.
//!
//! ```text
//! {"dim": 4, "count": 2}
//! {"id": "a-0", "label": "a", "vec": [0.1, 0.2, 0.3, 0.4]}
//! {"id": "b-0", "label": "b", "vec": [1e-3, -2.5, 0.0, 7.0]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Immutable, validated collection of embedding records.
///
/// Record order is the order of the source file and is the canonical order
/// used by every seeded sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    class_index: BTreeMap<String, Vec<usize>>,
}

impl EmbeddingStore {
    /// Validates and indexes `records`. Error line numbers refer to the file
    /// layout, i.e. record `i` sits on line `i + 2`.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::MissingHeader);
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, record) in records.iter().enumerate() {
            let line = pos + 2;
            if record.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    line,
                    expected: dim,
                    found: record.vector.len(),
                });
            }
            if record.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteComponent(line));
            }
            if !seen.insert(record.id.as_str()) {
                return Err(Error::DuplicateId(record.id.clone()));
            }
            class_index.entry(record.label.clone()).or_default().push(pos);
        }
        Ok(Self {
            dim,
            records,
            class_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, pos: usize) -> &EmbeddingRecord {
        &self.records[pos]
    }

    /// Labels in sorted order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.class_index.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Record positions of `label`, in file order.
    pub fn members(&self, label: &str) -> Option<&[usize]> {
        self.class_index.get(label).map(Vec::as_slice)
    }

    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    pub fn class_summary(&self) -> BTreeMap<String, usize> {
        self.class_index
            .iter()
            .map(|(label, members)| (label.clone(), members.len()))
            .collect()
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(line))) => parse_header(&line)?,
            Some((_, Err(_))) | None => return Err(Error::MissingHeader),
        };

        let mut records = Vec::with_capacity(header.count.min(1 << 20));
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|_| Error::MalformedLine(line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(&line, line_no, header.dim)?);
        }
        if records.len() != header.count {
            return Err(Error::CountMismatch {
                declared: header.count,
                found: records.len(),
            });
        }
        Self::new(header.dim, records)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::json!({ "dim": self.dim, "count": self.records.len() });
        writeln!(out, "{header}")?;
        for record in &self.records {
            let line = serde_json::to_string(&RecordOut {
                id: &record.id,
                label: &record.label,
                vec: &record.vector,
            })?;
            writeln!(out, "{line}")?;
        }
        out.flush()
    }
}

/// Per-class record counts.
pub fn class_summary(store: &EmbeddingStore) -> BTreeMap<String, usize> {
    store.class_summary()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_reader(BufReader::new(file))
}

pub fn save_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    store.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    label: &'a str,
    vec: &'a [f64],
}

struct Header {
    dim: usize,
    count: usize,
}

fn parse_header(line: &str) -> Result<Header> {
    let value: Value = serde_json::from_str(line).map_err(|_| Error::MissingHeader)?;
    let field = |name: &str| {
        value
            .get(name)
            .and_then(Value::as_u64)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or(Error::MissingHeader)
    };
    let dim = field("dim")?;
    let count = field("count")?;
    if dim == 0 {
        return Err(Error::MissingHeader);
    }
    Ok(Header { dim, count })
}

fn parse_record(line: &str, line_no: usize, dim: usize) -> Result<EmbeddingRecord> {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        // Some writers emit bare NaN / Infinity, which is not JSON.
        Err(_) if has_bare_non_finite(line) => return Err(Error::NonFiniteComponent(line_no)),
        Err(_) => return Err(Error::MalformedLine(line_no)),
    };
    let malformed = || Error::MalformedLine(line_no);
    let id = value.get("id").and_then(Value::as_str).ok_or_else(malformed)?;
    let label = value.get("label").and_then(Value::as_str).ok_or_else(malformed)?;
    let components = value.get("vec").and_then(Value::as_array).ok_or_else(malformed)?;
    if components.len() != dim {
        return Err(Error::DimensionMismatch {
            line: line_no,
            expected: dim,
            found: components.len(),
        });
    }
    let mut vector = Vec::with_capacity(dim);
    for component in components {
        let x = match component {
            // arbitrary_precision keeps the literal, so overflow surfaces as inf
            Value::Number(n) => n.to_string().parse::<f64>().map_err(|_| malformed())?,
            Value::String(s) if is_non_finite_literal(s) => f64::NAN,
            _ => return Err(malformed()),
        };
        if !x.is_finite() {
            return Err(Error::NonFiniteComponent(line_no));
        }
        vector.push(x);
    }
    Ok(EmbeddingRecord {
        id: id.to_owned(),
        label: label.to_owned(),
        vector,
    })
}

fn is_non_finite_literal(s: &str) -> bool {
    matches!(
        s.trim_start_matches(['+', '-']).to_ascii_lowercase().as_str(),
        "nan" | "inf" | "infinity"
    )
}

/// Looks for `NaN` / `Infinity` tokens outside string literals.
fn has_bare_non_finite(line: &str) -> bool {
    let mut in_string = false;
    let mut escaped = false;
    let mut word = String::new();
    for ch in line.chars().chain(std::iter::once(' ')) {
        if in_string {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if ch.is_ascii_alphabetic() {
            word.push(ch);
            continue;
        }
        if word == "NaN" || word == "Infinity" {
            return true;
        }
        word.clear();
        if ch == '"' {
            in_string = true;
        }
    }
    false
}
