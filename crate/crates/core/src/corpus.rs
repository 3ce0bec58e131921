//! Prompt corpora: JSON-lines, one object per prompt, token ids only.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::TokenId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate prompt id {0:?}")]
    DuplicateId(String),
    #[error("prompt {0:?} is empty")]
    EmptyPrompt(String),
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub prompt: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<TokenId>>,
    /// Gap indices `g` with a structural boundary between truth positions
    /// `g` and `g + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delims: Option<Vec<usize>>,
}

pub fn validate(items: &[CorpusItem]) -> Result<(), CorpusError> {
    if items.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(CorpusError::DuplicateId(item.id.clone()));
        }
        if item.prompt.is_empty() {
            return Err(CorpusError::EmptyPrompt(item.id.clone()));
        }
    }
    Ok(())
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<CorpusItem>, CorpusError> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|source| CorpusError::Parse { line: i + 1, source })?);
    }
    validate(&items)?;
    Ok(items)
}

pub fn load(path: &Path) -> Result<Vec<CorpusItem>, CorpusError> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_jsonl(items: &[CorpusItem], mut w: impl Write) -> Result<(), CorpusError> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save(items: &[CorpusItem], path: &Path) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(items, &mut f)?;
    f.flush()?;
    Ok(())
}
