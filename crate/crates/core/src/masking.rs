//! Mask plans: random cropping, masking ratios and BERT-style corruption.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqio::{Alphabet, TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioKind {
    FixedRatio { p: f64 },
    UniformRatioRange { lo: f64, hi: f64 },
    BetaRatio { a: f64, b: f64 },
}

impl RatioKind {
    /// Beta(3, 9): mean 0.25, a stand-in for "beta30"-style schedules.
    pub fn beta30_like() -> Self {
        Self::BetaRatio { a: 3.0, b: 9.0 }
    }

    fn label(&self) -> String {
        match self {
            Self::FixedRatio { p } => format!("fixed{p}"),
            Self::UniformRatioRange { lo, hi } => format!("uniform{lo}-{hi}"),
            Self::BetaRatio { a, b } => format!("beta{a}-{b}"),
        }
    }
}

/// Probabilities of the three corruption actions for a masked position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Corruption {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl From<[f64; 3]> for Corruption {
    fn from(v: [f64; 3]) -> Self {
        Self {
            mask: v[0],
            random: v[1],
            keep: v[2],
        }
    }
}

impl From<Corruption> for [f64; 3] {
    fn from(c: Corruption) -> Self {
        [c.mask, c.random, c.keep]
    }
}

impl Corruption {
    pub const BERT: Self = Self {
        mask: 0.8,
        random: 0.1,
        keep: 0.1,
    };
    pub const MASK_ONLY: Self = Self {
        mask: 1.0,
        random: 0.0,
        keep: 0.0,
    };
}

impl Default for Corruption {
    fn default() -> Self {
        Self::BERT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingStrategy {
    #[serde(flatten)]
    pub kind: RatioKind,
    #[serde(default)]
    pub corruption: Corruption,
    /// Random crop window in residues; `None` disables cropping.
    #[serde(default = "default_crop")]
    pub crop: Option<usize>,
}

fn default_crop() -> Option<usize> {
    Some(1024)
}

impl Default for MaskingStrategy {
    fn default() -> Self {
        Self {
            kind: RatioKind::FixedRatio { p: 0.15 },
            corruption: Corruption::BERT,
            crop: Some(1024),
        }
    }
}

impl MaskingStrategy {
    pub fn fixed(p: f64) -> Self {
        Self {
            kind: RatioKind::FixedRatio { p },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        let ok = match self.kind {
            RatioKind::FixedRatio { p } => in_unit(p),
            RatioKind::UniformRatioRange { lo, hi } => in_unit(lo) && in_unit(hi) && lo <= hi,
            RatioKind::BetaRatio { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid masking ratio {:?}", self.kind)));
        }
        let c = self.corruption;
        let parts = [c.mask, c.random, c.keep];
        if parts.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corruption probabilities {parts:?} must sum to 1")));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop window must be >= 1".into()));
        }
        Ok(())
    }

    /// Short identifier used in grid reports.
    pub fn label(&self) -> String {
        self.kind.label()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    MaskToken,
    RandomToken(TokenId),
    KeepOriginal,
}

/// Sampled positions and actions for one masked view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub crop_start: usize,
    pub crop_len: usize,
    /// Sorted residue indices relative to the crop.
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    /// The masking ratio drawn for this plan.
    pub ratio: f64,
}

/// Model input plus supervision for one masked view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    /// Corrupted, re-framed crop.
    pub input: TokenSequence,
    /// Un-corrupted crop, same framing.
    pub original: TokenSequence,
    /// (token position, original id) for every masked position.
    pub targets: Vec<(usize, TokenId)>,
}

/// `max(1, round_half_up(ratio * len))`, capped at `len`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    // the epsilon keeps exact halves such as 0.15 * 10 from rounding down
    let n = (ratio * len as f64 + 0.5 + 1e-9).floor() as usize;
    n.clamp(1, len.max(1))
}

/// Crop start; 0 without drawing when the sequence fits the window.
pub fn sample_crop<R: Rng + ?Sized>(seq: &TokenSequence, window: usize, rng: &mut R) -> usize {
    let len = seq.raw_length();
    if len <= window {
        0
    } else {
        rng.random_range(0..=len - window)
    }
}

fn draw_ratio<R: Rng + ?Sized>(kind: RatioKind, rng: &mut R) -> f64 {
    match kind {
        RatioKind::FixedRatio { p } => p,
        RatioKind::UniformRatioRange { lo, hi } => {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        RatioKind::BetaRatio { a, b } => Beta::new(a, b).expect("validated beta").sample(rng),
    }
}

pub fn sample_mask_plan<R: Rng + ?Sized>(
    seq: &TokenSequence,
    strategy: &MaskingStrategy,
    rng: &mut R,
) -> MaskPlan {
    let len = seq.raw_length();
    let (crop_start, crop_len) = match strategy.crop {
        Some(w) => (sample_crop(seq, w, rng), len.min(w)),
        None => (0, len),
    };
    let ratio = draw_ratio(strategy.kind, rng);
    let count = mask_count(ratio, crop_len);
    let mut positions = index::sample(rng, crop_len, count).into_vec();
    positions.sort_unstable();
    let c = strategy.corruption;
    let actions = positions
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < c.mask {
                MaskAction::MaskToken
            } else if u < c.mask + c.random {
                MaskAction::RandomToken(
                    Alphabet::FIRST_RESIDUE + rng.random_range(0..Alphabet::NUM_RESIDUES),
                )
            } else {
                MaskAction::KeepOriginal
            }
        })
        .collect();
    MaskPlan {
        crop_start,
        crop_len,
        positions,
        actions,
        ratio,
    }
}

/// Crops, re-frames with bos/eos and corrupts `seq` according to `plan`.
pub fn apply_mask_plan(seq: &TokenSequence, plan: &MaskPlan) -> Result<MaskedView> {
    let len = seq.raw_length();
    if plan.crop_len == 0 || plan.crop_start + plan.crop_len > len {
        return Err(Error::PlanMismatch(format!(
            "crop {}+{} exceeds length {len}",
            plan.crop_start, plan.crop_len
        )));
    }
    if plan.positions.len() != plan.actions.len() {
        return Err(Error::PlanMismatch("positions and actions differ in length".into()));
    }
    if plan.positions.iter().any(|&p| p >= plan.crop_len) {
        return Err(Error::PlanMismatch("mask position outside crop".into()));
    }
    let crop = &seq.residues()[plan.crop_start..plan.crop_start + plan.crop_len];
    let mut original = Vec::with_capacity(crop.len() + 2);
    original.push(Alphabet::BOS);
    original.extend_from_slice(crop);
    original.push(Alphabet::EOS);
    let mut input = original.clone();
    let mut targets = Vec::with_capacity(plan.positions.len());
    for (&p, &action) in plan.positions.iter().zip(&plan.actions) {
        let tok = p + 1;
        targets.push((tok, original[tok]));
        match action {
            MaskAction::MaskToken => input[tok] = Alphabet::MASK,
            MaskAction::RandomToken(id) => input[tok] = id,
            MaskAction::KeepOriginal => {}
        }
    }
    let id = seq.source_id().to_string();
    Ok(MaskedView {
        input: TokenSequence::from_ids_unchecked(input, id.clone()),
        original: TokenSequence::from_ids_unchecked(original, id),
        targets,
    })
}

/// One view per residue with exactly that residue masked (no crop, no
/// corruption): the leave-one-out views behind pseudo-perplexity.
pub fn leave_one_out_views(seq: &TokenSequence) -> Vec<MaskedView> {
    (0..seq.raw_length())
        .map(|i| {
            let plan = MaskPlan {
                crop_start: 0,
                crop_len: seq.raw_length(),
                positions: vec![i],
                actions: vec![MaskAction::MaskToken],
                ratio: 0.0,
            };
            apply_mask_plan(seq, &plan).expect("plan built for this sequence")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqio::tokenize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize) -> TokenSequence {
        let letters: String = (0..len).map(|i| crate::seqio::RESIDUES[i % 20] as char).collect();
        tokenize(&letters, "s").unwrap()
    }

    #[test]
    fn fixed_ratio_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = MaskingStrategy::fixed(0.15);
        assert_eq!(sample_mask_plan(&seq(100), &s, &mut rng).positions.len(), 15);
        assert_eq!(sample_mask_plan(&seq(3), &s, &mut rng).positions.len(), 1);
        assert_eq!(sample_mask_plan(&seq(1), &s, &mut rng).positions, vec![0]);
        assert_eq!(mask_count(0.15, 10), 2);
        assert_eq!(mask_count(1.0, 7), 7);
    }

    #[test]
    fn crop_without_need_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_crop(&seq(500), 1024, &mut rng), 0);
        for _ in 0..100 {
            let start = sample_crop(&seq(10), 1, &mut rng);
            assert!(start <= 9);
        }
    }

    #[test]
    fn keep_all_plan_leaves_input_unchanged() {
        let s = seq(8);
        let plan = MaskPlan {
            crop_start: 0,
            crop_len: 8,
            positions: vec![1, 4],
            actions: vec![MaskAction::KeepOriginal; 2],
            ratio: 0.25,
        };
        let view = apply_mask_plan(&s, &plan).unwrap();
        assert_eq!(view.input, s);
        assert_eq!(view.targets, vec![(2, s.ids()[2]), (5, s.ids()[5])]);
    }

    #[test]
    fn single_mask_changes_one_position() {
        let s = seq(8);
        let plan = MaskPlan {
            crop_start: 0,
            crop_len: 8,
            positions: vec![3],
            actions: vec![MaskAction::MaskToken],
            ratio: 0.1,
        };
        let view = apply_mask_plan(&s, &plan).unwrap();
        let diffs: Vec<_> = (0..s.len()).filter(|&i| view.input.ids()[i] != s.ids()[i]).collect();
        assert_eq!(diffs, vec![4]);
        assert_eq!(view.input.ids()[4], Alphabet::MASK);
    }

    #[test]
    fn crop_relabels_positions() {
        let s = seq(10);
        let plan = MaskPlan {
            crop_start: 3,
            crop_len: 4,
            positions: vec![0],
            actions: vec![MaskAction::RandomToken(Alphabet::FIRST_RESIDUE)],
            ratio: 0.25,
        };
        let view = apply_mask_plan(&s, &plan).unwrap();
        assert_eq!(view.input.raw_length(), 4);
        assert_eq!(view.original.residues(), &s.residues()[3..7]);
        assert_eq!(view.targets, vec![(1, s.residues()[3])]);
        assert_eq!(view.input.ids()[0], Alphabet::BOS);
        assert_eq!(*view.input.ids().last().unwrap(), Alphabet::EOS);
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let plan = MaskPlan {
            crop_start: 5,
            crop_len: 6,
            positions: vec![0],
            actions: vec![MaskAction::MaskToken],
            ratio: 0.1,
        };
        assert!(matches!(apply_mask_plan(&seq(10), &plan), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn strategy_validation() {
        assert!(MaskingStrategy::fixed(0.0).validate().is_err());
        assert!(MaskingStrategy::fixed(1.0).validate().is_ok());
        let bad = MaskingStrategy {
            corruption: Corruption::from([0.5, 0.2, 0.2]),
            ..MaskingStrategy::default()
        };
        assert!(bad.validate().is_err());
        let beta = MaskingStrategy {
            kind: RatioKind::beta30_like(),
            ..MaskingStrategy::default()
        };
        assert!(beta.validate().is_ok());
    }

    #[test]
    fn strategy_toml_form() {
        let s: MaskingStrategy = toml::from_str(
            r#"kind = "fixed_ratio"
p = 0.15
corruption = [0.8, 0.1, 0.1]
crop = 1024"#,
        )
        .unwrap();
        assert_eq!(s, MaskingStrategy::default());
    }
}
