use crate::error::{Error, Result};

/// Index into the model vocabulary.
pub type TokenId = usize;

/// The 20 canonical amino acids in token order.
pub const RESIDUES: [u8; 20] = *b"ACDEFGHIKLMNPQRSTVWY";

/// Fixed protein vocabulary: four leading specials, 20 residues, trailing mask.
///
/// ```text
/// 0 <bos>  1 <pad>  2 <eos>  3 <unk>  4..=23 residues  24 <mask>
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Alphabet;

impl Alphabet {
    pub const BOS: TokenId = 0;
    pub const PAD: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const FIRST_RESIDUE: TokenId = 4;
    pub const MASK: TokenId = 24;
    pub const SIZE: usize = 25;
    pub const NUM_RESIDUES: usize = 20;

    pub fn residue_ids() -> std::ops::Range<TokenId> {
        Self::FIRST_RESIDUE..Self::FIRST_RESIDUE + Self::NUM_RESIDUES
    }

    pub fn is_residue(id: TokenId) -> bool {
        Self::residue_ids().contains(&id)
    }

    pub fn is_special(id: TokenId) -> bool {
        id < Self::SIZE && !Self::is_residue(id)
    }

    /// Residue or unknown: the ids allowed in a sequence interior.
    pub fn is_interior(id: TokenId) -> bool {
        Self::is_residue(id) || id == Self::UNK
    }

    /// Id for an uppercase residue letter; `X` maps to unknown.
    pub fn residue_id(symbol: u8) -> Option<TokenId> {
        if symbol == b'X' {
            return Some(Self::UNK);
        }
        RESIDUES
            .iter()
            .position(|&r| r == symbol)
            .map(|i| i + Self::FIRST_RESIDUE)
    }

    pub fn symbol(id: TokenId) -> Option<&'static str> {
        const SPECIAL: [&str; 4] = ["<bos>", "<pad>", "<eos>", "<unk>"];
        const RES: [&str; 20] = [
            "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N", "P", "Q", "R", "S", "T",
            "V", "W", "Y",
        ];
        match id {
            0..=3 => Some(SPECIAL[id]),
            Self::MASK => Some("<mask>"),
            id if Self::is_residue(id) => Some(RES[id - Self::FIRST_RESIDUE]),
            _ => None,
        }
    }

    /// Id for a symbol as produced by [`Alphabet::symbol`].
    pub fn id_of(symbol: &str) -> Option<TokenId> {
        (0..Self::SIZE).find(|&id| Self::symbol(id) == Some(symbol))
    }

    /// Single-letter code used in sequence text (`X` for unknown).
    pub fn letter(id: TokenId) -> Option<char> {
        if id == Self::UNK {
            Some('X')
        } else if Self::is_residue(id) {
            Some(RESIDUES[id - Self::FIRST_RESIDUE] as char)
        } else {
            None
        }
    }
}

/// A framed tokenized sequence: `<bos> residues... <eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    source_id: String,
}

impl TokenSequence {
    /// Frames interior ids with bos/eos after validating them.
    pub fn from_residue_ids(interior: &[TokenId], source_id: impl Into<String>) -> Result<Self> {
        if interior.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        if let Some(pos) = interior.iter().position(|&id| !Alphabet::is_interior(id)) {
            return Err(Error::PlanMismatch(format!(
                "token id {} at residue {pos} is not a residue",
                interior[pos]
            )));
        }
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(Alphabet::BOS);
        ids.extend_from_slice(interior);
        ids.push(Alphabet::EOS);
        Ok(Self {
            ids,
            source_id: source_id.into(),
        })
    }

    /// Builds a sequence from raw ids, allowing masked or corrupted interiors.
    /// Used for model inputs derived from a valid sequence.
    pub(crate) fn from_ids_unchecked(ids: Vec<TokenId>, source_id: String) -> Self {
        debug_assert!(ids.len() >= 2);
        Self { ids, source_id }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn residues(&self) -> &[TokenId] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// |x|: number of residue tokens.
    pub fn raw_length(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_length() == 0
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Residue string; `None` if the interior holds non-residue tokens.
    pub fn to_letters(&self) -> Option<String> {
        self.residues().iter().map(|&id| Alphabet::letter(id)).collect()
    }
}

/// Tokenizes an uppercase residue string.
pub fn tokenize(sequence: &str, source_id: impl Into<String>) -> Result<TokenSequence> {
    if sequence.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let interior = sequence
        .bytes()
        .enumerate()
        .map(|(i, b)| {
            Alphabet::residue_id(b).ok_or(Error::InvalidCharacter {
                ch: b as char,
                position: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::from_residue_ids(&interior, source_id)
}

pub fn detokenize(seq: &TokenSequence) -> String {
    seq.residues()
        .iter()
        .map(|&id| Alphabet::letter(id).unwrap_or('?'))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_disjoint() {
        let specials: Vec<_> = (0..Alphabet::SIZE).filter(|&i| Alphabet::is_special(i)).collect();
        assert_eq!(specials, vec![0, 1, 2, 3, 24]);
        assert_eq!(Alphabet::residue_ids().len(), 20);
        for id in 0..Alphabet::SIZE {
            let sym = Alphabet::symbol(id).unwrap();
            assert_eq!(Alphabet::id_of(sym), Some(id));
        }
        assert_eq!(Alphabet::symbol(Alphabet::SIZE), None);
    }

    #[test]
    fn tokenize_frames_sequence() {
        let s = tokenize("ACDE", "a").unwrap();
        let a = Alphabet::residue_id(b'A').unwrap();
        assert_eq!(s.ids(), &[Alphabet::BOS, a, a + 1, a + 2, a + 3, Alphabet::EOS]);
        assert_eq!(s.raw_length(), 4);
    }

    #[test]
    fn tokenize_rejects_empty() {
        assert!(matches!(tokenize("", "a"), Err(Error::Empty(_))));
    }

    #[test]
    fn unknown_residue_maps_to_unk() {
        let s = tokenize("AXC", "a").unwrap();
        assert_eq!(s.residues()[1], Alphabet::UNK);
        assert_eq!(detokenize(&s), "AXC");
    }

    #[test]
    fn rejects_gaps_and_noncanonical() {
        for bad in ["AC-D", "ACB", "acd", "AZ"] {
            assert!(matches!(tokenize(bad, "a"), Err(Error::InvalidCharacter { .. })), "{bad}");
        }
    }
}
