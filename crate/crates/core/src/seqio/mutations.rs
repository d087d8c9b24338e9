//! Mutant notation (`A24G`, `A24G:L30P`) and assay CSV parsing.

use std::collections::BTreeSet;
use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::seqio::{Alphabet, TokenId, TokenSequence};

/// One residue substitution; `position` is 0-based over residues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Substitution {
    pub position: usize,
    pub wild_type: TokenId,
    pub mutant: TokenId,
}

impl fmt::Display for Substitution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            Alphabet::letter(self.wild_type).unwrap_or('?'),
            self.position + 1,
            Alphabet::letter(self.mutant).unwrap_or('?')
        )
    }
}

/// A set of substitutions at distinct positions, sorted by position.
/// The empty set is the wild type.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct MutationSet {
    subs: Vec<Substitution>,
}

impl MutationSet {
    pub fn wild_type() -> Self {
        Self::default()
    }

    /// Validates against `reference` and sorts by position.
    pub fn new(mut subs: Vec<Substitution>, reference: &TokenSequence) -> Result<Self> {
        subs.sort();
        let label = || {
            subs.iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(":")
        };
        let mut seen = BTreeSet::new();
        for s in &subs {
            if s.position >= reference.raw_length() {
                return Err(Error::Mutation {
                    mutant: label(),
                    message: format!(
                        "position {} out of range for length {}",
                        s.position + 1,
                        reference.raw_length()
                    ),
                });
            }
            if !seen.insert(s.position) {
                return Err(Error::Mutation {
                    mutant: label(),
                    message: format!("duplicate position {}", s.position + 1),
                });
            }
            let actual = reference.residues()[s.position];
            if actual != s.wild_type {
                return Err(Error::Mutation {
                    mutant: label(),
                    message: format!(
                        "wild type {} does not match reference {} at position {}",
                        Alphabet::letter(s.wild_type).unwrap_or('?'),
                        Alphabet::letter(actual).unwrap_or('?'),
                        s.position + 1
                    ),
                });
            }
            if !Alphabet::is_residue(s.mutant) {
                return Err(Error::Mutation {
                    mutant: label(),
                    message: "mutant is not a canonical residue".into(),
                });
            }
        }
        Ok(Self { subs })
    }

    /// Parses ProteinGym notation with 1-based positions. Empty, `WT` and
    /// `_wt` denote the wild type.
    pub fn parse(notation: &str, reference: &TokenSequence) -> Result<Self> {
        let notation = notation.trim();
        if notation.is_empty() || notation.eq_ignore_ascii_case("wt") || notation == "_wt" {
            return Ok(Self::wild_type());
        }
        let subs = notation
            .split(':')
            .map(|part| parse_substitution(part.trim()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(subs, reference)
    }

    pub fn substitutions(&self) -> &[Substitution] {
        &self.subs
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.subs.iter().map(|s| s.position)
    }

    /// Residue ids of `reference` with every substitution applied.
    pub fn apply(&self, reference: &TokenSequence) -> Vec<TokenId> {
        let mut residues = reference.residues().to_vec();
        for s in &self.subs {
            residues[s.position] = s.mutant;
        }
        residues
    }

    /// Notation as written in assay files (`WT` for the empty set).
    pub fn notation(&self) -> String {
        if self.subs.is_empty() {
            return "WT".into();
        }
        self.subs
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(":")
    }
}

fn parse_substitution(part: &str) -> Result<Substitution> {
    let err = |message: &str| Error::Mutation {
        mutant: part.to_string(),
        message: message.to_string(),
    };
    let bytes = part.as_bytes();
    if bytes.len() < 3 {
        return Err(err("expected <wt><position><mutant>"));
    }
    let wt = Alphabet::residue_id(bytes[0])
        .filter(|&id| Alphabet::is_residue(id))
        .ok_or_else(|| err("invalid wild-type residue"))?;
    let mt = Alphabet::residue_id(bytes[bytes.len() - 1])
        .filter(|&id| Alphabet::is_residue(id))
        .ok_or_else(|| err("invalid mutant residue"))?;
    let pos: usize = part[1..part.len() - 1]
        .parse()
        .map_err(|_| err("invalid position"))?;
    if pos == 0 {
        return Err(err("positions are 1-based"));
    }
    Ok(Substitution {
        position: pos - 1,
        wild_type: wt,
        mutant: mt,
    })
}

/// One assay row.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationRecord {
    pub id: String,
    pub mutations: MutationSet,
    pub measured_fitness: f64,
}

#[derive(Deserialize)]
struct CsvRow {
    mutant: String,
    fitness: f64,
    #[serde(default)]
    id: Option<String>,
}

/// Parses an assay CSV with at least `mutant` and `fitness` columns.
/// Record ids default to the mutant notation.
pub fn parse_mutations(bytes: &[u8], reference: &TokenSequence) -> Result<Vec<MutationRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader.headers()?.clone();
    for col in ["mutant", "fitness"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column {col:?}"),
            });
        }
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let mutations = MutationSet::parse(&row.mutant, reference)?;
        records.push(MutationRecord {
            id: row.id.unwrap_or_else(|| mutations.notation()),
            mutations,
            measured_fitness: row.fitness,
        });
    }
    Ok(records)
}

/// Writes `mutant,fitness` rows.
pub fn write_mutations(records: &[MutationRecord]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["mutant", "fitness"])?;
    for r in records {
        writer.write_record([r.mutations.notation(), format!("{}", r.measured_fitness)])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
