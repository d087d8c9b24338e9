use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, TrainableSelection};
use crate::error::{Error, Result};
use crate::masking::{apply_mask_plan, sample_mask_plan, MaskingStrategy};
use crate::optim::{loss_and_grad, sgd_step, GradientBuffer, LossKind, OptimConfig};
use crate::seqio::TokenSequence;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub micro_batch_size: usize,
    pub masking: MaskingStrategy,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            micro_batch_size: 8,
            masking: MaskingStrategy::default(),
            loss_kind: LossKind::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Masked-LM SGD over `corpus`: each epoch shuffles the corpus and takes one
/// step per micro-batch. All tensors are trained.
pub fn pretrain<F: Scalar>(model: &mut Model<F>, corpus: &[TokenSequence], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    cfg.masking.validate()?;
    let opt = OptimConfig {
        learning_rate: cfg.learning_rate,
        grad_accum_steps: 1,
        micro_batch_size: cfg.micro_batch_size,
    };
    opt.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = GradientBuffer::for_model(model);
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.micro_batch_size) {
            let views = chunk
                .iter()
                .map(|&i| {
                    let plan = sample_mask_plan(&corpus[i], &cfg.masking, &mut rng);
                    apply_mask_plan(&corpus[i], &plan)
                })
                .collect::<Result<Vec<_>>>()?;
            let l = loss_and_grad(model, &views, cfg.loss_kind, &mut buffer)?.as_f64();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: report.step_losses.len() + 1,
                });
            }
            sgd_step(model, &mut buffer, &opt, TrainableSelection::Full)?;
            report.step_losses.push(l);
            sum += l;
            n += 1;
        }
        report.epoch_losses.push(sum / n as f64);
    }
    Ok(report)
}
