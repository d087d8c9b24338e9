//! Fixtures and independent oracles shared by the integration tests and
//! the acceptance suite.

#![allow(dead_code)]

use proteinttt::backbone::{Batch, LoraSpec, Model, ModelConfig};
use proteinttt::masking::{apply_mask_plan, sample_mask_plan, MaskedView, MaskingStrategy};
use proteinttt::optim::{loss, loss_and_grad, GradientBuffer, LossKind};
use proteinttt::seqio::{Alphabet, TokenSequence};
use proteinttt::synth::{generate, SyntheticCorpus, SyntheticFamilySpec};
use proteinttt::ttt::{pretrain, PretrainConfig, TttConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        max_positions: 42,
        vocab_size: 25,
        seed,
    }
}

pub fn toy_spec(seed: u64) -> SyntheticFamilySpec {
    SyntheticFamilySpec {
        seed,
        ..SyntheticFamilySpec::default()
    }
}

pub fn toy_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: 20,
        learning_rate: 0.05,
        micro_batch_size: 8,
        seed,
        ..PretrainConfig::default()
    }
}

/// Corpus from `toy_spec(seed)` and a model pre-trained on its held-in families.
pub fn pretrained(seed: u64) -> (SyntheticCorpus, Model<f32>) {
    let corpus = generate(&toy_spec(seed)).expect("corpus");
    let mut model = Model::init(&toy_config(seed)).expect("model");
    pretrain(&mut model, &corpus.train_sequences(), &toy_pretrain(seed)).expect("pretrain");
    (corpus, model)
}

/// Customization defaults: lr 4e-4, micro-batch 4, accumulation 16, 30 steps, 15% fixed masking.
pub fn default_ttt(seed: u64) -> TttConfig {
    TttConfig {
        masking: MaskingStrategy::fixed(0.15),
        seed,
        ..TttConfig::default()
    }
}

pub fn random_sequence<R: Rng>(rng: &mut R, len: usize, id: &str) -> TokenSequence {
    let ids: Vec<usize> = (0..len)
        .map(|_| Alphabet::FIRST_RESIDUE + rng.random_range(0..Alphabet::NUM_RESIDUES))
        .collect();
    TokenSequence::from_residue_ids(&ids, id).unwrap()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Log-softmax computed independently of the library, in f64.
pub fn oracle_log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row.iter().map(|x| x - m - z.ln()).collect()
}

pub struct GradCheck {
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

fn perturb(model: &mut Model<f64>, tensor: usize, index: usize, delta: f64, dense: usize) {
    if tensor < dense {
        model.params.tensors_mut()[tensor].data_mut()[index] += delta;
    } else {
        model.adapter.as_mut().unwrap().tensors_mut()[tensor - dense].data_mut()[index] += delta;
    }
}

/// Central-difference check of every parameter coordinate of `instances`
/// random tiny models (every third carries a LoRA adapter with non-zero
/// factors), over random masked batches and all loss kinds.
pub fn gradient_check(instances: usize, seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        LossKind::NormalizedCrossEntropy,
        LossKind::TokenMeanCrossEntropy,
        LossKind::UnnormalizedCrossEntropy,
    ];
    let mut out = GradCheck {
        instances,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for inst in 0..instances {
        let heads = rng.random_range(2..=3);
        let cfg = ModelConfig {
            num_layers: rng.random_range(1..=2),
            model_dim: heads * rng.random_range(2..=3),
            num_heads: heads,
            ffn_dim: rng.random_range(3..=6),
            max_positions: 9,
            vocab_size: 25,
            seed: rng.random(),
        };
        let mut model = Model::<f64>::init(&cfg).unwrap();
        if inst % 3 == 2 {
            model.attach_adapter(LoraSpec { rank: 2, alpha: 3.0 }, rng.random()).unwrap();
            for t in model.adapter.as_mut().unwrap().tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        for t in model.params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let batch = rng.random_range(1..=3);
        let strategy = MaskingStrategy {
            crop: None,
            ..MaskingStrategy::fixed(0.4)
        };
        let views: Vec<MaskedView> = (0..batch)
            .map(|b| {
                let len = rng.random_range(2..=7);
                let seq = random_sequence(&mut rng, len, &format!("s{b}"));
                let plan = sample_mask_plan(&seq, &strategy, &mut rng);
                apply_mask_plan(&seq, &plan).unwrap()
            })
            .collect();
        let kind = kinds[inst % 3];
        let mut buf = GradientBuffer::for_model(&model);
        loss_and_grad(&model, &views, kind, &mut buf).unwrap();
        let mut analytic: Vec<Vec<f64>> = buf.params.tensors().iter().map(|(_, _, t)| t.data().to_vec()).collect();
        let dense = analytic.len();
        if let Some(a) = &buf.adapter {
            analytic.extend(a.tensors().iter().map(|(_, t)| t.data().to_vec()));
        }
        let mut names: Vec<String> = model.params.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        if let Some(a) = &model.adapter {
            names.extend(a.tensors().iter().map(|(n, _)| n.clone()));
        }
        for (ti, grads) in analytic.iter().enumerate() {
            for (j, &g) in grads.iter().enumerate() {
                perturb(&mut model, ti, j, h, dense);
                let up = loss(&model, &views, kind).unwrap();
                perturb(&mut model, ti, j, -2.0 * h, dense);
                let down = loss(&model, &views, kind).unwrap();
                perturb(&mut model, ti, j, h, dense);
                let fd = (up - down) / (2.0 * h);
                let e = relative_error(g, fd);
                out.coordinates += 1;
                if e > out.max_rel_error {
                    out.max_rel_error = e;
                    out.worst = format!("instance {inst} {}[{j}]: analytic {g:e} fd {fd:e}", names[ti]);
                }
            }
        }
    }
    out
}

/// Pseudo-perplexity by masking one residue at a time and forwarding each
/// masked copy alone.
pub fn naive_pseudo_perplexity(model: &Model<f64>, x: &TokenSequence) -> f64 {
    let vocab = model.config().vocab_size;
    let n = x.raw_length();
    let mut nll = 0.0;
    for i in 1..=n {
        let mut ids = x.ids().to_vec();
        ids[i] = Alphabet::MASK;
        let out = model.forward(&Batch::from_sequences(&[ids])).unwrap();
        let lp = oracle_log_softmax(&out.logits[i * vocab..(i + 1) * vocab]);
        nll -= lp[x.ids()[i]];
    }
    (nll / n as f64).exp()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Average ranks by enumeration: the rank of element i is its mean 1-based
/// position over every permutation that sorts `values`.
pub fn brute_force_average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut sums = vec![0.0; n];
    let mut count = 0.0;
    for p in permutations(n) {
        if p.windows(2).all(|w| values[w[0]] <= values[w[1]]) {
            count += 1.0;
            for (pos, &i) in p.iter().enumerate() {
                sums[i] += (pos + 1) as f64;
            }
        }
    }
    sums.into_iter().map(|s| s / count).collect()
}

/// Pearson correlation of average ranks, computed from scratch.
pub fn brute_force_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_force_average_ranks(a), brute_force_average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Two-sided normal quantiles used for confidence bands.
pub const Z_99: f64 = 2.5758293035489;
pub const Z_ONE_SIDED_99: f64 = 2.3263478740408;

/// Wilson-Hilferty approximation of the upper 1% point of chi-square(df).
pub fn chi_square_upper_1pct(df: f64) -> f64 {
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + Z_ONE_SIDED_99 * c.sqrt()).powi(3)
}
