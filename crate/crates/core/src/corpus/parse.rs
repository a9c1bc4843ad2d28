use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Sentence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub sentences: Vec<Sentence>,
    pub errors: Vec<LineError>,
}

fn validate(s: &Sentence) -> std::result::Result<(), String> {
    if s.tokens.is_empty() {
        return Err("sentence has no tokens".into());
    }
    for (i, e) in s.entities.iter().enumerate() {
        if e.end <= e.start {
            return Err(format!(
                "entity {i} has empty span [{}, {})",
                e.start, e.end
            ));
        }
        if e.end > s.tokens.len() {
            return Err(format!(
                "entity {i} span [{}, {}) exceeds {} tokens",
                e.start,
                e.end,
                s.tokens.len()
            ));
        }
    }
    for t in &s.triples {
        let m = s.entities.len();
        if t.subject >= m || t.object >= m {
            return Err(format!(
                "triple ({}, {}, {}) refers to missing entity (sentence has {m})",
                t.subject, t.object, t.relation
            ));
        }
    }
    Ok(())
}

/// Parses line-delimited JSON sentences. Blank lines are ignored; malformed
/// lines are collected with their line numbers.
pub fn parse_corpus_str(text: &str) -> ParsedCorpus {
    let mut out = ParsedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Sentence>(line)
            .map_err(|e| e.to_string())
            .and_then(|s| validate(&s).map(|()| s));
        match parsed {
            Ok(s) => out.sentences.push(s),
            Err(message) => out.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    out
}

pub fn parse_corpus_file(path: &Path) -> Result<ParsedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(parse_corpus_str(&text))
}

pub fn sentence_to_json(s: &Sentence) -> String {
    serde_json::to_string(s).expect("sentences always serialize")
}

pub fn write_corpus_file(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        writeln!(w, "{}", sentence_to_json(s)).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}
