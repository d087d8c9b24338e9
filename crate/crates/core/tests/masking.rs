mod common;

use common::{chi_square_upper_1pct, random_sequence, Z_99};
use proptest::prelude::*;
use proteinttt::masking::{
    apply_mask_plan, mask_count, sample_crop, sample_mask_plan, Corruption, MaskAction, MaskingStrategy, RatioKind,
};
use proteinttt::seqio::{Alphabet, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn strategy() -> impl Strategy<Value = MaskingStrategy> {
    let kind = prop_oneof![
        (0.01f64..=1.0).prop_map(|p| RatioKind::FixedRatio { p }),
        (0.01f64..0.5, 0.5f64..=1.0).prop_map(|(lo, hi)| RatioKind::UniformRatioRange { lo, hi }),
        (0.5f64..5.0, 0.5f64..12.0).prop_map(|(a, b)| RatioKind::BetaRatio { a, b }),
    ];
    let corruption = (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        Corruption {
            mask: lo,
            random: hi - lo,
            keep: 1.0 - hi,
        }
    });
    let crop = prop_oneof![Just(None), (1usize..40).prop_map(Some)];
    (kind, corruption, crop).prop_map(|(kind, corruption, crop)| MaskingStrategy { kind, corruption, crop })
}

fn sequence() -> impl Strategy<Value = TokenSequence> {
    prop::collection::vec(Alphabet::residue_ids(), 1..80)
        .prop_map(|ids| TokenSequence::from_residue_ids(&ids, "p").unwrap())
}

proptest! {
    #[test]
    fn plans_are_deterministic_per_seed(x in sequence(), s in strategy(), seed in any::<u64>()) {
        let a = sample_mask_plan(&x, &s, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_mask_plan(&x, &s, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn views_never_mask_specials_and_keep_targets(x in sequence(), s in strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_mask_plan(&x, &s, &mut rng);
        let view = apply_mask_plan(&x, &plan).unwrap();
        let n = plan.crop_len;
        prop_assert_eq!(view.input.ids().len(), n + 2);
        prop_assert_eq!(view.input.ids()[0], Alphabet::BOS);
        prop_assert_eq!(view.input.ids()[n + 1], Alphabet::EOS);
        prop_assert_eq!(plan.positions.len(), mask_count(plan.ratio, n));
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        let crop = &x.residues()[plan.crop_start..plan.crop_start + n];
        for ((&(tok, original), &p), &action) in view.targets.iter().zip(&plan.positions).zip(&plan.actions) {
            prop_assert!(tok >= 1 && tok <= n);
            prop_assert_eq!(tok, p + 1);
            prop_assert_eq!(original, crop[p]);
            let got = view.input.ids()[tok];
            match action {
                MaskAction::MaskToken => prop_assert_eq!(got, Alphabet::MASK),
                MaskAction::RandomToken(id) => {
                    prop_assert!(Alphabet::is_residue(id));
                    prop_assert_eq!(got, id);
                }
                MaskAction::KeepOriginal => prop_assert_eq!(got, crop[p]),
            }
        }
        for (i, &id) in view.input.ids().iter().enumerate().skip(1).take(n) {
            if !plan.positions.contains(&(i - 1)) {
                prop_assert_eq!(id, crop[i - 1]);
            }
        }
    }

    #[test]
    fn crop_start_in_range(len in 1usize..200, window in 1usize..200, seed in any::<u64>()) {
        let x = random_sequence(&mut ChaCha8Rng::seed_from_u64(seed), len, "c");
        let start = sample_crop(&x, window, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        if len <= window {
            prop_assert_eq!(start, 0);
        } else {
            prop_assert!(start <= len - window);
        }
    }
}

#[test]
fn fixed_ratio_count_is_rounded_with_floor_of_one() {
    for n in 1..=500 {
        let expected = ((0.15 * n as f64).round() as usize).max(1);
        assert_eq!(mask_count(0.15, n), expected, "n = {n}");
    }
    assert_eq!(mask_count(0.15, 10), 2);
    assert_eq!(mask_count(1.0, 7), 7);
}

#[test]
fn corruption_frequencies_within_binomial_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_sequence(&mut rng, 200, "b");
    let s = MaskingStrategy {
        crop: None,
        ..MaskingStrategy::fixed(0.15)
    };
    let mut counts = [0usize; 3];
    let mut replacement = [0usize; Alphabet::NUM_RESIDUES];
    while counts.iter().sum::<usize>() < 10_000 {
        for a in sample_mask_plan(&x, &s, &mut rng).actions {
            match a {
                MaskAction::MaskToken => counts[0] += 1,
                MaskAction::RandomToken(id) => {
                    counts[1] += 1;
                    replacement[id - Alphabet::FIRST_RESIDUE] += 1;
                }
                MaskAction::KeepOriginal => counts[2] += 1,
            }
        }
    }
    let n = counts.iter().sum::<usize>() as f64;
    for (c, p) in counts.iter().zip([0.8, 0.1, 0.1]) {
        let band = Z_99 * (p * (1.0 - p) / n).sqrt();
        assert!((*c as f64 / n - p).abs() <= band, "{c} of {n} vs {p}");
    }
    assert!(replacement.iter().all(|&c| c > 0), "every residue is a possible replacement");
}

#[test]
fn crop_start_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random_sequence(&mut rng, 2000, "long");
    let window = 1024;
    let bins = 2000 - window + 1;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for _ in 0..draws {
        counts[sample_crop(&x, window, &mut rng)] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < chi_square_upper_1pct((bins - 1) as f64), "chi-square {chi2}");
}

#[test]
fn short_sequence_is_not_cropped() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_sequence(&mut rng, 500, "s");
    assert_eq!(sample_crop(&x, 1024, &mut rng), 0);
    let plan = sample_mask_plan(&x, &MaskingStrategy::default(), &mut rng);
    assert_eq!((plan.crop_start, plan.crop_len), (0, 500));
}

#[test]
fn beta_ratio_mean_matches_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_sequence(&mut rng, 50, "r");
    let s = MaskingStrategy {
        kind: RatioKind::beta30_like(),
        ..MaskingStrategy::default()
    };
    let ratios: Vec<f64> = (0..50_000).map(|_| sample_mask_plan(&x, &s, &mut rng).ratio).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    // Beta(3, 9): mean 0.25, variance 3*9 / (12^2 * 13)
    let sd = (27.0f64 / (144.0 * 13.0)).sqrt();
    assert!((mean - 0.25).abs() < Z_99 * sd / (ratios.len() as f64).sqrt(), "mean {mean}");
}
