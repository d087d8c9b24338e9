use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StepRecord, TttConfig, TttTrace};
use crate::backbone::{BackboneSnapshot, Model};
use crate::error::{Error, Result};
use crate::heads::ClassifierHead;
use crate::masking::{apply_mask_plan, sample_mask_plan, MaskedView};
use crate::optim::{loss_and_grad, sgd_step, GradientBuffer};
use crate::scoring::{pseudo_perplexity, EVAL_BATCH};
use crate::seqio::{tokenize, Msa, TokenSequence};
use crate::tensor::Scalar;

/// Draws the MSA row for one micro-batch element.
pub trait MsaSampler: Sync {
    fn sample(&self, depth: usize, rng: &mut ChaCha8Rng) -> usize;
}

/// Uniform over rows, target included.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRows;

impl MsaSampler for UniformRows {
    fn sample(&self, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..depth)
    }
}

/// Fixed per-row weights.
#[derive(Debug, Clone)]
pub struct WeightedRows {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl WeightedRows {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("msa weights: {e}")))?;
        Ok(Self { dist, len: weights.len() })
    }
}

impl MsaSampler for WeightedRows {
    fn sample(&self, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        assert_eq!(depth, self.len, "weight count must match msa depth");
        self.dist.sample(rng)
    }
}

#[derive(Debug, Clone)]
pub struct TttOutcome<F = f32> {
    pub snapshot: BackboneSnapshot<F>,
    pub trace: TttTrace,
}

pub(crate) fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Customization state for one model: the base snapshot θ0, the working
/// copy and an optional frozen head for confidence.
#[derive(Debug, Clone)]
pub struct TttSession<F = f32> {
    base: BackboneSnapshot<F>,
    model: Model<F>,
    head: Option<ClassifierHead>,
}

impl<F: Scalar> TttSession<F> {
    pub fn new(model: Model<F>) -> Self {
        Self {
            base: model.snapshot(),
            model,
            head: None,
        }
    }

    pub fn with_head(mut self, head: ClassifierHead) -> Self {
        self.head = Some(head);
        self
    }

    pub fn base(&self) -> &BackboneSnapshot<F> {
        &self.base
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn head(&self) -> Option<&ClassifierHead> {
        self.head.as_ref()
    }

    /// Restores θ0; any adapter attached for customization is dropped.
    pub fn reset(&mut self) {
        self.model.restore(&self.base).expect("base snapshot matches its own model");
    }

    pub fn run_single(&mut self, x: &TokenSequence, cfg: &TttConfig) -> Result<TttOutcome<F>> {
        self.run(x, std::slice::from_ref(x), &UniformRows, cfg, &mut |_, _| Ok(()))
    }

    pub fn run_msa(&mut self, msa: &Msa, cfg: &TttConfig, sampler: &dyn MsaSampler) -> Result<TttOutcome<F>> {
        let rows = msa_rows(msa)?;
        self.run(&rows[0].clone(), &rows, sampler, cfg, &mut |_, _| Ok(()))
    }

    /// The customization loop. Starts from θ0, draws micro-batch elements
    /// from `pool` (index 0 is the target), calls `hook` after step 0 and
    /// after every optimizer step, and leaves the working model at the
    /// selected step.
    pub fn run(
        &mut self,
        target: &TokenSequence,
        pool: &[TokenSequence],
        sampler: &dyn MsaSampler,
        cfg: &TttConfig,
        hook: &mut dyn FnMut(usize, &Model<F>) -> Result<()>,
    ) -> Result<TttOutcome<F>> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::Empty("training pool"));
        }
        self.reset();
        if let Some(spec) = cfg.lora {
            self.model.attach_adapter(spec, cfg.seed)?;
        }
        let start = Instant::now();
        let mut trace = TttTrace::default();
        let mut best: Option<(f64, usize, BackboneSnapshot<F>)> = None;

        let first = self.record(0, None, target, cfg, start)?;
        if let Some(c) = first.confidence {
            best = Some((c, 0, self.model.snapshot()));
        }
        trace.steps.push(first);
        hook(0, &self.model)?;

        let opt = cfg.optim();
        let mut buffer = GradientBuffer::for_model(&self.model);
        for step in 1..=cfg.steps {
            let mut mask_rng = step_rng(cfg.seed, 2 * step as u64);
            let mut row_rng = step_rng(cfg.seed, 2 * step as u64 + 1);
            let mut total = 0.0;
            for _ in 0..cfg.grad_accum_steps {
                let views = (0..cfg.micro_batch_size)
                    .map(|_| {
                        let seq = if pool.len() == 1 {
                            &pool[0]
                        } else {
                            &pool[sampler.sample(pool.len(), &mut row_rng)]
                        };
                        let plan = sample_mask_plan(seq, &cfg.masking, &mut mask_rng);
                        apply_mask_plan(seq, &plan)
                    })
                    .collect::<Result<Vec<MaskedView>>>()?;
                let l = loss_and_grad(&self.model, &views, cfg.loss_kind, &mut buffer)?.as_f64();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                total += l;
            }
            sgd_step(&mut self.model, &mut buffer, &opt, cfg.trainable)?;
            let rec = self.record(step, Some(total / cfg.grad_accum_steps as f64), target, cfg, start)?;
            if let Some(c) = rec.confidence {
                if best.as_ref().is_none_or(|(b, _, _)| c > *b) {
                    best = Some((c, step, self.model.snapshot()));
                }
            }
            trace.steps.push(rec);
            hook(step, &self.model)?;
        }

        trace.selected_step = match best {
            Some((_, step, snap)) => {
                if step != cfg.steps {
                    self.model.restore(&snap)?;
                }
                step
            }
            None => cfg.steps,
        };
        debug_assert_eq!(trace.selected_step, trace.argmax_confidence());
        Ok(TttOutcome {
            snapshot: self.model.snapshot(),
            trace,
        })
    }

    fn record(
        &self,
        step: usize,
        loss: Option<f64>,
        target: &TokenSequence,
        cfg: &TttConfig,
        start: Instant,
    ) -> Result<StepRecord> {
        let perplexity = if cfg.emit_perplexity {
            Some(pseudo_perplexity(&self.model, target, EVAL_BATCH)?)
        } else {
            None
        };
        let confidence = match cfg.confidence {
            Some(c) => Some(c.evaluate(&self.model, target, self.head.as_ref())?),
            None => None,
        };
        Ok(StepRecord {
            step,
            loss,
            perplexity,
            confidence,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Degapped MSA rows as token sequences, target first.
pub(crate) fn msa_rows(msa: &Msa) -> Result<Vec<TokenSequence>> {
    if msa.depth() == 0 {
        return Err(Error::Empty("msa"));
    }
    (0..msa.depth())
        .map(|i| {
            let row = msa.degapped(i).ok_or(Error::Empty("msa row"))?;
            if row.is_empty() {
                return Err(Error::Empty("degapped msa row"));
            }
            tokenize(&row, msa.ids()[i].clone())
        })
        .collect()
}

/// Customizes a copy of `model` on `x`.
pub fn ttt_single<F: Scalar>(
    model: &Model<F>,
    x: &TokenSequence,
    cfg: &TttConfig,
) -> Result<(BackboneSnapshot<F>, TttTrace)> {
    let out = TttSession::new(model.clone()).run_single(x, cfg)?;
    Ok((out.snapshot, out.trace))
}

/// Customizes a copy of `model` on rows of `msa` drawn by `sampler`.
pub fn ttt_msa<F: Scalar>(
    model: &Model<F>,
    msa: &Msa,
    cfg: &TttConfig,
    sampler: &dyn MsaSampler,
) -> Result<(BackboneSnapshot<F>, TttTrace)> {
    let out = TttSession::new(model.clone()).run_msa(msa, cfg, sampler)?;
    Ok((out.snapshot, out.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::heads::ConfidenceAdapter;
    use crate::masking::MaskingStrategy;

    fn model() -> Model<f32> {
        Model::init(&ModelConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_positions: 40,
            vocab_size: 25,
            seed: 11,
        })
        .unwrap()
    }

    fn cfg() -> TttConfig {
        TttConfig {
            learning_rate: 0.05,
            micro_batch_size: 2,
            grad_accum_steps: 2,
            steps: 4,
            masking: MaskingStrategy::fixed(0.2),
            seed: 5,
            ..TttConfig::default()
        }
    }

    #[test]
    fn zero_lr_single_step_keeps_behaviour() {
        let m = model();
        let x = tokenize("MKTAYIAKQR", "t").unwrap();
        let c = TttConfig {
            learning_rate: 0.0,
            steps: 1,
            ..cfg()
        };
        let (snap, trace) = ttt_single(&m, &x, &c).unwrap();
        assert_eq!(trace.losses().len(), 1);
        assert_eq!(trace.selected_step, 1);
        assert_eq!(snap, m.snapshot());
    }

    #[test]
    fn selection_follows_confidence() {
        let m = model();
        let x = tokenize("MKTAYIAKQR", "t").unwrap();
        let c = TttConfig {
            confidence: Some(ConfidenceAdapter::NegPseudoPerplexity),
            ..cfg()
        };
        let mut s = TttSession::new(m);
        let out = s.run_single(&x, &c).unwrap();
        assert_eq!(out.trace.selected_step, out.trace.argmax_confidence());
        assert_eq!(out.trace.steps.len(), 5);
        let selected = out.trace.selected().unwrap().confidence.unwrap();
        let now = ConfidenceAdapter::NegPseudoPerplexity.evaluate(s.model(), &x, None).unwrap();
        assert_eq!(selected, now);
    }

    #[test]
    fn lora_run_drops_adapter_on_reset() {
        let m = model();
        let x = tokenize("MKTAYIAKQR", "t").unwrap();
        let c = TttConfig {
            lora: Some(crate::backbone::LoraSpec { rank: 2, alpha: 4.0 }),
            trainable: crate::backbone::TrainableSelection::LoraOnly,
            ..cfg()
        };
        let mut s = TttSession::new(m.clone());
        let out = s.run_single(&x, &c).unwrap();
        assert_eq!(out.snapshot.params, m.params);
        assert!(out.snapshot.adapter.is_some());
        s.reset();
        assert_eq!(s.model(), &m);
    }

    #[test]
    fn weighted_sampler_validates() {
        assert!(WeightedRows::new(&[0.0, 0.0]).is_err());
        let w = WeightedRows::new(&[1.0, 0.0, 0.0]).unwrap();
        let mut rng = step_rng(1, 0);
        assert!((0..50).all(|_| w.sample(3, &mut rng) == 0));
    }
}
