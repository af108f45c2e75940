//! Line-delimited dataset persistence.
//!
//! Each file starts with a JSON header line carrying the schema name, format
//! version, and dataset kind, followed by one JSON record per example with
//! tokens spelled out as strings.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::builder::AlphaMap;
use super::example::{DocKind, Document, LabelKind, ProbeExample};
use super::facts::FactId;
use super::vocab::Vocab;

const SCHEMA: &str = "raglab-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    tokens: Vec<String>,
    kind: DocKind,
    source_fact: Option<FactId>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: u64,
    label_kind: LabelKind,
    y: u8,
    question: Vec<String>,
    documents: Vec<DocRecord>,
    answer: Vec<String>,
    parametric: Vec<String>,
    fact: FactId,
}

pub fn write_examples(
    path: &Path,
    kind: &str,
    examples: &[ProbeExample],
    vocab: &Vocab,
) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let header = Header { schema: SCHEMA.into(), version: VERSION, kind: kind.into() };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    for ex in examples {
        let record = ExampleRecord {
            id: ex.id,
            label_kind: ex.label_kind,
            y: ex.relevance,
            question: vocab.decode(&ex.question),
            documents: ex
                .documents
                .iter()
                .map(|d| DocRecord {
                    tokens: vocab.decode(&d.tokens),
                    kind: d.kind,
                    source_fact: d.source_fact,
                })
                .collect(),
            answer: vocab.decode(&ex.answer),
            parametric: vocab.decode(&ex.parametric),
            fact: ex.fact,
        };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

pub fn read_examples(path: &Path, vocab: &Vocab) -> Result<Vec<ProbeExample>> {
    let body =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = body.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| Error::Format(format!("bad dataset header in {}: {e}", path.display())))?;
    if header.schema != SCHEMA || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format {}/{} in {}",
            header.schema,
            header.version,
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("bad record on line {} of {}: {e}", n + 2, path.display()))
        })?;
        out.push(ProbeExample {
            id: record.id,
            label_kind: record.label_kind,
            relevance: record.y,
            question: vocab.encode(&record.question)?,
            documents: record
                .documents
                .into_iter()
                .map(|d| {
                    Ok(Document {
                        tokens: vocab.encode(&d.tokens)?,
                        kind: d.kind,
                        source_fact: d.source_fact,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            answer: vocab.encode(&record.answer)?,
            parametric: vocab.encode(&record.parametric)?,
            fact: record.fact,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct AlphaRecord {
    fact: FactId,
    answer: Vec<String>,
}

pub fn write_alpha(path: &Path, alpha: &AlphaMap, vocab: &Vocab) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let header = Header { schema: SCHEMA.into(), version: VERSION, kind: "parametric".into() };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    for (fact, answer) in alpha {
        let record = AlphaRecord { fact: *fact, answer: vocab.decode(answer) };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

pub fn read_alpha(path: &Path, vocab: &Vocab) -> Result<AlphaMap> {
    let body =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = body.lines();
    lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let mut map = AlphaMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AlphaRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("bad record on line {} of {}: {e}", n + 2, path.display()))
        })?;
        map.insert(record.fact, vocab.encode(&record.answer)?);
    }
    Ok(map)
}
