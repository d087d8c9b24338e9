//! FASTA and A3M readers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub id: String,
    pub sequence: String,
}

impl FastaRecord {
    pub fn new(id: impl Into<String>, sequence: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            sequence: sequence.into(),
        }
    }
}

struct RawRecord {
    id: String,
    body: String,
    header_line: usize,
}

/// Splits `>`-delimited records without validating body characters.
fn split_records(bytes: &[u8]) -> Result<Vec<RawRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut records: Vec<RawRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if let Some(header) = line.strip_prefix('>') {
            let id = header.trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "empty header".into(),
                });
            }
            records.push(RawRecord {
                id: id.to_string(),
                body: String::new(),
                header_line: lineno,
            });
        } else {
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some(rec) = records.last_mut() else {
                return Err(Error::Parse {
                    line: lineno,
                    message: "sequence data before first header".into(),
                });
            };
            rec.body.extend(trimmed.chars().filter(|c| !c.is_whitespace()));
        }
    }
    if records.is_empty() {
        return Err(Error::Empty("FASTA file"));
    }
    Ok(records)
}

fn is_sequence_char(c: char) -> bool {
    c == 'X' || (c.is_ascii() && crate::seqio::RESIDUES.contains(&(c as u8)))
}

/// Parses FASTA text into records in file order.
///
/// Bodies may be line-wrapped; only the 20 canonical residues and `X` are
/// accepted.
pub fn parse_fasta(bytes: &[u8]) -> Result<Vec<FastaRecord>> {
    split_records(bytes)?
        .into_iter()
        .map(|rec| {
            if rec.body.is_empty() {
                return Err(Error::Parse {
                    line: rec.header_line,
                    message: format!("record {:?} has an empty sequence", rec.id),
                });
            }
            if let Some((pos, ch)) = rec.body.char_indices().find(|&(_, c)| !is_sequence_char(c)) {
                return Err(Error::InvalidCharacter { ch, position: pos });
            }
            Ok(FastaRecord {
                id: rec.id,
                sequence: rec.body,
            })
        })
        .collect()
}

/// Writes records with bodies wrapped at 60 columns.
pub fn write_fasta(records: &[FastaRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push('>');
        out.push_str(&rec.id);
        out.push('\n');
        let bytes = rec.sequence.as_bytes();
        for chunk in bytes.chunks(60) {
            out.push_str(std::str::from_utf8(chunk).expect("ascii sequence"));
            out.push('\n');
        }
    }
    out
}

/// An alignment whose first row is the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msa {
    rows: Vec<String>,
    ids: Vec<String>,
}

impl Msa {
    pub fn new(rows: Vec<String>) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| format!("row{i}")).collect();
        Self::with_ids(rows, ids)
    }

    fn with_ids(rows: Vec<String>, ids: Vec<String>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Empty("alignment"));
        };
        let width = first.len();
        if width == 0 {
            return Err(Error::Empty("alignment target"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::AlignmentLength {
                    row: i,
                    expected: width,
                    found: row.len(),
                });
            }
            if let Some((pos, ch)) = row
                .char_indices()
                .find(|&(_, c)| !(is_sequence_char(c) || c == '-'))
            {
                return Err(Error::InvalidCharacter { ch, position: pos });
            }
        }
        if first.contains('-') {
            return Err(Error::Parse {
                line: 0,
                message: "target row contains gaps".into(),
            });
        }
        Ok(Self { rows, ids })
    }

    pub const TARGET_INDEX: usize = 0;

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn target(&self) -> &str {
        &self.rows[0]
    }

    /// Row with gap characters removed; `None` when the row is all gaps.
    pub fn degapped(&self, row: usize) -> Option<String> {
        let s: String = self.rows[row].chars().filter(|&c| c != '-').collect();
        (!s.is_empty()).then_some(s)
    }
}

/// Parses an A3M alignment.
///
/// Lowercase letters and `.` are insertions relative to the target and are
/// dropped; columns where the target itself has a gap are removed from every
/// row.
pub fn parse_a3m(bytes: &[u8]) -> Result<Msa> {
    let raw = split_records(bytes).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("alignment"),
        other => other,
    })?;
    let mut rows: Vec<String> = raw
        .iter()
        .map(|r| {
            r.body
                .chars()
                .filter(|c| !(c.is_ascii_lowercase() || *c == '.'))
                .collect()
        })
        .collect();
    let target_len = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != target_len {
            return Err(Error::AlignmentLength {
                row: i,
                expected: target_len,
                found: row.len(),
            });
        }
    }
    let keep: Vec<bool> = rows[0].chars().map(|c| c != '-').collect();
    if keep.iter().any(|k| !k) {
        for row in rows.iter_mut() {
            *row = row
                .chars()
                .zip(&keep)
                .filter_map(|(c, &k)| k.then_some(c))
                .collect();
        }
    }
    Msa::with_ids(rows, raw.into_iter().map(|r| r.id).collect())
}
