mod common;

use common::{gradient_check, random_sequence, relative_error};
use proteinttt::backbone::{Model, ModelConfig, TrainableSelection};
use proteinttt::masking::{apply_mask_plan, sample_mask_plan, MaskedView, MaskingStrategy};
use proteinttt::optim::{loss_and_grad, sgd_step, GradientBuffer, LossKind, OptimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_central_differences() {
    let r = gradient_check(30, 7, 1e-5);
    assert!(r.coordinates > 30 * 100);
    assert!(r.max_rel_error < 1e-4, "max rel error {:e} at {}", r.max_rel_error, r.worst);
}

fn small() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        max_positions: 20,
        vocab_size: 25,
        seed: 4,
    }
}

fn views(seed: u64, n: usize) -> Vec<MaskedView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strategy = MaskingStrategy::fixed(0.3);
    (0..n)
        .map(|i| {
            let s = random_sequence(&mut rng, 6 + i % 5, "v");
            apply_mask_plan(&s, &sample_mask_plan(&s, &strategy, &mut rng)).unwrap()
        })
        .collect()
}

#[test]
fn accumulated_step_equals_mean_of_micro_batch_gradients() {
    let model = Model::<f64>::init(&small()).unwrap();
    let all = views(3, 6);
    let kind = LossKind::NormalizedCrossEntropy;
    let lr = 0.1;

    let mut accumulated = model.clone();
    let mut buf = GradientBuffer::for_model(&model);
    for chunk in all.chunks(2) {
        loss_and_grad(&model, chunk, kind, &mut buf).unwrap();
    }
    let cfg = OptimConfig {
        learning_rate: lr,
        grad_accum_steps: 3,
        micro_batch_size: 2,
    };
    sgd_step(&mut accumulated, &mut buf, &cfg, TrainableSelection::Full).unwrap();

    // Each chunk has equal weight under per-sequence normalization, so the
    // mean of chunk gradients is the gradient of the union.
    let mut union = model.clone();
    let mut ubuf = GradientBuffer::for_model(&model);
    loss_and_grad(&model, &all, kind, &mut ubuf).unwrap();
    let one = OptimConfig {
        learning_rate: lr,
        grad_accum_steps: 1,
        micro_batch_size: 6,
    };
    sgd_step(&mut union, &mut ubuf, &one, TrainableSelection::Full).unwrap();

    for ((name, _, a), (_, _, b)) in accumulated.params.tensors().iter().zip(union.params.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(relative_error(*x, *y) < 1e-10, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn gradients_add_across_micro_batches() {
    let model = Model::<f64>::init(&small()).unwrap();
    let (a, b) = (views(5, 2), views(6, 3));
    let kind = LossKind::TokenMeanCrossEntropy;
    let mut both = GradientBuffer::for_model(&model);
    loss_and_grad(&model, &a, kind, &mut both).unwrap();
    loss_and_grad(&model, &b, kind, &mut both).unwrap();
    let mut ga = GradientBuffer::for_model(&model);
    loss_and_grad(&model, &a, kind, &mut ga).unwrap();
    let mut gb = GradientBuffer::for_model(&model);
    loss_and_grad(&model, &b, kind, &mut gb).unwrap();
    assert_eq!(both.micro_steps_seen, 2);
    for (((_, _, s), (_, _, x)), (_, _, y)) in both.params.tensors().iter().zip(ga.params.tensors()).zip(gb.params.tensors()) {
        for ((s, x), y) in s.data().iter().zip(x.data()).zip(y.data()) {
            assert!((s - (x + y)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
}
