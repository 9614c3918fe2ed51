//! CoNLL-U ingestion.
//!
//! Only the ID, FORM and HEAD columns are used. Multiword token ranges
//! (`3-4`) and empty nodes (`5.1`) are skipped. Documents may be split with
//! `# newdoc id = ...` comments.

use crate::data::{EssayRecord, ROOT_HEAD};
use crate::error::{Error, Result};

const COLUMNS: usize = 10;

#[derive(Debug)]
struct Word {
    index: usize,
    form: String,
    head: usize,
    line: usize,
}

/// One CoNLL-U document: its id (from `# newdoc id`, if any) and the line
/// range it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConlluDocument {
    pub id: Option<String>,
    /// 1-based line number of the first line of the document.
    pub first_line: usize,
    pub text: String,
}

/// Splits a CoNLL-U file into documents at `# newdoc` comments. Text before
/// the first marker (if non-blank) becomes an anonymous document.
pub fn split_documents(text: &str) -> Vec<ConlluDocument> {
    let mut docs: Vec<ConlluDocument> = Vec::new();
    let mut current = ConlluDocument {
        id: None,
        first_line: 1,
        text: String::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# newdoc") {
            if !current.text.trim().is_empty() || current.id.is_some() {
                docs.push(current);
            }
            let id = rest
                .trim()
                .strip_prefix("id")
                .and_then(|r| r.trim().strip_prefix('='))
                .map(|r| r.trim().to_string());
            current = ConlluDocument {
                id,
                first_line: i + 2,
                text: String::new(),
            };
            continue;
        }
        current.text.push_str(line);
        current.text.push('\n');
    }
    if !current.text.trim().is_empty() || current.id.is_some() {
        docs.push(current);
    }
    docs
}

/// Converts a CoNLL-U document into an essay record with the given id.
///
/// Line numbers in errors are 1-based within `text`.
pub fn conllu_to_record(text: &str, id: &str) -> Result<EssayRecord> {
    conllu_to_record_at(text, id, 1)
}

/// Like [`conllu_to_record`], numbering lines from `first_line`.
pub fn conllu_to_record_at(text: &str, id: &str, first_line: usize) -> Result<EssayRecord> {
    let mut sentences: Vec<Vec<Word>> = Vec::new();
    let mut current: Vec<Word> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = first_line + i;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != COLUMNS {
            return Err(Error::parse(
                line_no,
                format!("expected {COLUMNS} columns, found {}", cols.len()),
            ));
        }
        let id_col = cols[0];
        if id_col.contains('-') || id_col.contains('.') {
            continue;
        }
        let index: usize = id_col
            .parse()
            .map_err(|_| Error::parse(line_no, format!("unparsable token id {id_col:?}")))?;
        let head: usize = cols[6]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("unparsable head {:?}", cols[6])))?;
        if index != current.len() + 1 {
            return Err(Error::parse(
                line_no,
                format!("token id {index} out of sequence, expected {}", current.len() + 1),
            ));
        }
        current.push(Word {
            index,
            form: cols[1].to_string(),
            head,
            line: line_no,
        });
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(Error::Format(format!("document {id:?}: no sentences")));
    }

    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(sentences.len());
    let mut deps = Vec::new();
    for sentence in sentences {
        let offset = tokens.len();
        let len = sentence.len();
        for w in sentence {
            if w.head > len {
                return Err(Error::parse(
                    w.line,
                    format!("head {} beyond sentence of {len} words", w.head),
                ));
            }
            let dependent = (offset + w.index - 1) as i64;
            let head = if w.head == 0 {
                ROOT_HEAD
            } else {
                (offset + w.head - 1) as i64
            };
            deps.push((head, dependent));
            tokens.push(w.form);
        }
        spans.push((offset, offset + len));
    }

    Ok(EssayRecord {
        id: id.to_string(),
        tokens,
        sentence_spans: spans,
        deps,
        gold: None,
    })
}
