//! Sequence input: token alphabet, FASTA/A3M readers and assay CSVs.

mod alphabet;
mod fasta;
mod mutations;

pub use alphabet::{detokenize, tokenize, Alphabet, TokenId, TokenSequence, RESIDUES};
pub use fasta::{parse_a3m, parse_fasta, write_fasta, FastaRecord, Msa};
pub use mutations::{
    parse_mutations, write_mutations, MutationRecord, MutationSet, Substitution,
};
