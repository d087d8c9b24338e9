//! Masked-LM loss, gradient accumulation and plain SGD.
//!
//! The optimizer is stateless: no momentum, no weight decay. Accumulated
//! gradients are divided by the number of micro-batches at step time, so a
//! step over `k` accumulated micro-batches matches one step over their union.

use serde::{Deserialize, Serialize};

use crate::backbone::{backward, Batch, LoraAdapter, Model, Params, TrainableSelection};
use crate::error::{Error, Result};
use crate::masking::MaskedView;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean NLL over masked positions per sequence, then mean over sequences.
    #[default]
    NormalizedCrossEntropy,
    /// Mean NLL over all masked positions of the batch at once.
    TokenMeanCrossEntropy,
    /// Mean NLL over every non-pad token (specials and unmasked included),
    /// averaged over the whole batch at once.
    UnnormalizedCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub micro_batch_size: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.grad_accum_steps == 0 || self.micro_batch_size == 0 {
            return Err(Error::Config("batch size and accumulation steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gradient accumulators matching the model's dense tensors and adapter.
#[derive(Debug, Clone)]
pub struct GradientBuffer<F = f32> {
    pub params: Params<F>,
    pub adapter: Option<LoraAdapter<F>>,
    pub micro_steps_seen: usize,
}

impl<F: Scalar> GradientBuffer<F> {
    pub fn for_model(model: &Model<F>) -> Self {
        Self {
            params: Params::zeros(model.config()),
            adapter: model.adapter.as_ref().map(LoraAdapter::zeros_like),
            micro_steps_seen: 0,
        }
    }

    pub fn zero(&mut self) {
        self.params.fill_zero();
        if let Some(a) = &mut self.adapter {
            a.fill_zero();
        }
        self.micro_steps_seen = 0;
    }
}

/// Per-row loss weights for `views` under `kind`; rows follow the padded batch.
fn row_weights<F: Scalar>(views: &[MaskedView], batch: &Batch, kind: LossKind) -> Result<Vec<(usize, usize, F)>> {
    let mut rows = Vec::new();
    match kind {
        LossKind::NormalizedCrossEntropy => {
            let active = views.iter().filter(|v| !v.targets.is_empty()).count();
            if active == 0 {
                return Err(Error::EmptySupervision);
            }
            for (b, v) in views.iter().enumerate() {
                if v.targets.is_empty() {
                    continue;
                }
                let w = F::from_f64_lossy(1.0 / (v.targets.len() * active) as f64);
                rows.extend(v.targets.iter().map(|&(pos, id)| (b * batch.len + pos, id, w)));
            }
        }
        LossKind::TokenMeanCrossEntropy => {
            let total: usize = views.iter().map(|v| v.targets.len()).sum();
            if total == 0 {
                return Err(Error::EmptySupervision);
            }
            let w = F::from_f64_lossy(1.0 / total as f64);
            for (b, v) in views.iter().enumerate() {
                rows.extend(v.targets.iter().map(|&(pos, id)| (b * batch.len + pos, id, w)));
            }
        }
        LossKind::UnnormalizedCrossEntropy => {
            let total: usize = views.iter().map(|v| v.original.len()).sum();
            if total == 0 {
                return Err(Error::EmptySupervision);
            }
            let w = F::from_f64_lossy(1.0 / total as f64);
            for (b, v) in views.iter().enumerate() {
                rows.extend(
                    v.original
                        .ids()
                        .iter()
                        .enumerate()
                        .map(|(pos, &id)| (b * batch.len + pos, id, w)),
                );
            }
        }
    }
    Ok(rows)
}

/// Log-softmax of one logit row.
pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Loss of one micro-batch without gradients.
pub fn loss<F: Scalar>(model: &Model<F>, views: &[MaskedView], kind: LossKind) -> Result<F> {
    let ids: Vec<&[usize]> = views.iter().map(|v| v.input.ids()).collect();
    let batch = Batch::from_sequences(&ids);
    let weights = row_weights::<F>(views, &batch, kind)?;
    let out = model.forward(&batch)?;
    let vocab = model.config().vocab_size;
    let mut total = F::zero();
    for (row, target, w) in weights {
        let lp = log_softmax(&out.logits[row * vocab..(row + 1) * vocab]);
        total -= w * lp[target];
    }
    Ok(total)
}

/// Forward + backward over one micro-batch; adds its gradient into `buffer`
/// and returns the micro-batch loss.
pub fn loss_and_grad<F: Scalar>(
    model: &Model<F>,
    views: &[MaskedView],
    kind: LossKind,
    buffer: &mut GradientBuffer<F>,
) -> Result<F> {
    let ids: Vec<&[usize]> = views.iter().map(|v| v.input.ids()).collect();
    let batch = Batch::from_sequences(&ids);
    let weights = row_weights::<F>(views, &batch, kind)?;
    let (out, cache) = model.forward_with_cache(&batch)?;
    let vocab = model.config().vocab_size;
    let mut dlogits = vec![F::zero(); batch.rows() * vocab];
    let mut total = F::zero();
    for (row, target, w) in weights {
        let logits = &out.logits[row * vocab..(row + 1) * vocab];
        let lp = log_softmax(logits);
        total -= w * lp[target];
        let d = &mut dlogits[row * vocab..(row + 1) * vocab];
        for (dv, &l) in d.iter_mut().zip(&lp) {
            *dv += w * l.exp();
        }
        d[target] -= w;
    }
    backward(
        model.config(),
        &model.params,
        model.adapter.as_ref(),
        &batch,
        &out,
        &cache,
        &dlogits,
        &mut buffer.params,
        buffer.adapter.as_mut(),
    );
    buffer.micro_steps_seen += 1;
    Ok(total)
}

/// `theta <- theta - lr * accumulated / grad_accum_steps` over the trainable
/// selection, then zeroes the buffer.
pub fn sgd_step<F: Scalar>(
    model: &mut Model<F>,
    buffer: &mut GradientBuffer<F>,
    cfg: &OptimConfig,
    selection: TrainableSelection,
) -> Result<()> {
    if buffer.micro_steps_seen != cfg.grad_accum_steps {
        return Err(Error::IncompleteAccumulation {
            seen: buffer.micro_steps_seen,
            required: cfg.grad_accum_steps,
        });
    }
    let step = F::from_f64_lossy(-cfg.learning_rate / cfg.grad_accum_steps as f64);
    let groups = buffer.params.tensors();
    for ((_, group, grad), param) in groups.iter().zip(model.params.tensors_mut()) {
        if selection.trains_dense(*group) {
            param.add_scaled(grad, step);
        }
    }
    if selection == TrainableSelection::LoraOnly {
        let (Some(adapter), Some(grads)) = (model.adapter.as_mut(), buffer.adapter.as_ref()) else {
            return Err(Error::Config("lora_only selection without an adapter".into()));
        };
        for ((_, grad), param) in grads.tensors().iter().zip(adapter.tensors_mut()) {
            param.add_scaled(grad, step);
        }
    }
    buffer.zero();
    Ok(())
}
