//! Corpus input for `ingest`.
//!
//! A corpus path is either a `.jsonl` file of documents
//! (`{"source_uri", "title", "text", "metadata"}`) or a directory. In a
//! directory every `*.txt` file is one document whose source URI is the file
//! name; an optional `<stem>.meta.json` next to it may set `title`,
//! `source_uri` and `metadata`. `*.jsonl` files in the directory are read as
//! document lists. Files are taken in name order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use atomrag::evaluation::QaRecord;
use atomrag::ingest::CorpusDocument;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Sidecar {
    title: Option<String>,
    source_uri: Option<String>,
    metadata: BTreeMap<String, String>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    String::from_utf8(bytes).map_err(|_| CliError::usage(format!("{} is not valid UTF-8", path.display())))
}

fn read_jsonl(path: &Path) -> Result<Vec<CorpusDocument>, CliError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::usage(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDocument>, CliError> {
    let docs = if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .map_err(|e| CliError::usage(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut docs = Vec::new();
        for p in names {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.ends_with(".jsonl") {
                docs.extend(read_jsonl(&p)?);
            } else if let Some(stem) = name.strip_suffix(".txt") {
                let sidecar_path = p.with_file_name(format!("{stem}.meta.json"));
                let sidecar: Sidecar = if sidecar_path.is_file() {
                    serde_json::from_str(&read_text(&sidecar_path)?).map_err(|e| {
                        CliError::usage(format!("{}: {e}", sidecar_path.display()))
                    })?
                } else {
                    Sidecar::default()
                };
                docs.push(CorpusDocument {
                    source_uri: sidecar.source_uri.unwrap_or_else(|| name.clone()),
                    title: sidecar.title.unwrap_or_else(|| stem.to_string()),
                    text: read_text(&p)?,
                    metadata: sidecar.metadata,
                });
            } else if !name.ends_with(".meta.json") {
                tracing::debug!(file = %p.display(), "skipping non-corpus file");
            }
        }
        docs
    } else if path.is_file() {
        read_jsonl(path)?
    } else {
        return Err(CliError::usage(format!("corpus path {} does not exist", path.display())));
    };
    if docs.is_empty() {
        return Err(CliError::usage(format!("corpus {} contains no documents", path.display())));
    }
    Ok(docs)
}

/// One document per distinct paragraph title across the records' contexts;
/// the first text seen for a title wins.
pub fn documents_from_benchmark(records: &[QaRecord], format: &str) -> Vec<CorpusDocument> {
    let mut seen = BTreeSet::new();
    let mut docs = Vec::new();
    for p in records.iter().flat_map(|r| &r.context_paragraphs) {
        let key = if p.title.is_empty() { p.text.clone() } else { p.title.clone() };
        if p.text.trim().is_empty() || !seen.insert(key.clone()) {
            continue;
        }
        docs.push(CorpusDocument {
            source_uri: format!("{format}:{key}"),
            title: p.title.clone(),
            text: p.text.clone(),
            metadata: BTreeMap::new(),
        });
    }
    docs
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(CliError::env)?);
        out.push('\n');
    }
    crate::write_file(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "second").unwrap();
        fs::write(dir.path().join("a.txt"), "first").unwrap();
        fs::write(
            dir.path().join("a.meta.json"),
            r#"{"title": "Alpha", "metadata": {"lang": "en"}}"#,
        )
        .unwrap();
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let docs = load_corpus(dir.path()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].source_uri, "a.txt");
        assert_eq!(docs[0].title, "Alpha");
        assert_eq!(docs[0].metadata["lang"], "en");
        assert_eq!(docs[1].title, "b");
        assert_eq!(docs[1].text, "second");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert_eq!(err.code, 1);
    }

    #[test]
    fn jsonl_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "{\"source_uri\":\"u1\",\"text\":\"hello\"}\n\n").unwrap();
        let docs = load_corpus(&p).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].title, "");
    }
}
