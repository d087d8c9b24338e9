//! Test-time customization: T steps of masked-LM SGD on one target (or
//! its MSA), per-step traces, confidence-based step selection and reset.
//!
//! Randomness is planned per step. Step `t` draws masks from a ChaCha8
//! stream `2t` and MSA rows from stream `2t + 1` of the session seed, so
//! a one-row MSA consumes mask randomness exactly like the bare target.

mod grid;
mod pretrain;
mod session;
mod trace;

use serde::{Deserialize, Serialize};

pub use grid::{run_grid, CellResult, GridCell, GridReport, GridRow, GridSpec, GridTarget, TargetRun};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use session::{
    ttt_msa, ttt_single, MsaSampler, TttOutcome, TttSession, UniformRows, WeightedRows,
};
pub use trace::{StepRecord, TttTrace};

use crate::backbone::{LoraSpec, TrainableSelection};
use crate::error::{Error, Result};
use crate::heads::ConfidenceAdapter;
use crate::masking::MaskingStrategy;
use crate::optim::{LossKind, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    pub learning_rate: f64,
    pub micro_batch_size: usize,
    pub grad_accum_steps: usize,
    pub steps: usize,
    pub masking: MaskingStrategy,
    pub loss_kind: LossKind,
    pub trainable: TrainableSelection,
    pub lora: Option<LoraSpec>,
    pub seed: u64,
    pub confidence: Option<ConfidenceAdapter>,
    /// Record target pseudo-perplexity after every step.
    pub emit_perplexity: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            micro_batch_size: 4,
            grad_accum_steps: 16,
            steps: 30,
            masking: MaskingStrategy::default(),
            loss_kind: LossKind::NormalizedCrossEntropy,
            trainable: TrainableSelection::FullExceptEmbeddings,
            lora: None,
            seed: 0,
            confidence: None,
            emit_perplexity: false,
        }
    }
}

impl TttConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            grad_accum_steps: self.grad_accum_steps,
            micro_batch_size: self.micro_batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        self.optim().validate()?;
        self.masking.validate()?;
        match (self.lora, self.trainable) {
            (Some(spec), TrainableSelection::LoraOnly) => spec.validate(),
            (Some(_), _) => Err(Error::Config("a lora adapter requires trainable = lora_only".into())),
            (None, TrainableSelection::LoraOnly) => Err(Error::Config("lora_only requires a lora spec".into())),
            (None, _) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TttConfig::default().validate().unwrap();
        let mut c = TttConfig {
            lora: Some(LoraSpec { rank: 4, alpha: 8.0 }),
            ..TttConfig::default()
        };
        assert!(c.validate().is_err());
        c.trainable = TrainableSelection::LoraOnly;
        c.validate().unwrap();
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_form() {
        let c: TttConfig = toml::from_str(
            "learning_rate = 0.001\nsteps = 5\nconfidence = \"neg_pseudo_perplexity\"\n[masking]\nkind = \"fixed_ratio\"\np = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.masking, MaskingStrategy::fixed(0.2));
        assert_eq!(c.confidence, Some(ConfidenceAdapter::NegPseudoPerplexity));
        assert_eq!(c.micro_batch_size, 4);
    }
}
