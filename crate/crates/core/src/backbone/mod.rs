//! Transformer encoder backbone with its masked-LM head, LoRA adapters,
//! snapshots and the on-disk checkpoint container.

pub(crate) mod checkpoint;
mod forward;
mod lora;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC,
};
pub use forward::{Batch, ForwardOutput};
pub(crate) use forward::{backward, forward, Cache};
pub use lora::{LoraAdapter, LoraPair, LoraSpec, LORA_TARGETS};
pub use params::{LayerParams, ParamGroup, Params};

use crate::error::{Error, Result};
use crate::seqio::{Alphabet, TokenSequence};
use crate::tensor::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            max_positions: 1026,
            vocab_size: Alphabet::SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if self.max_positions < 3 {
            return Err(Error::Config("max_positions must be at least 3".into()));
        }
        if self.vocab_size < Alphabet::SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the alphabet ({})",
                self.vocab_size,
                Alphabet::SIZE
            )));
        }
        Ok(())
    }
}

/// Which tensors an optimizer step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSelection {
    /// Everything except token and position embeddings.
    #[default]
    FullExceptEmbeddings,
    /// Only the LoRA factor pairs; the dense model is frozen.
    LoraOnly,
    Full,
}

impl TrainableSelection {
    pub fn trains_dense(self, group: ParamGroup) -> bool {
        match self {
            Self::Full => true,
            Self::FullExceptEmbeddings => group == ParamGroup::Body,
            Self::LoraOnly => false,
        }
    }
}

/// Complete model state: dense parameters and an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSnapshot<F = f32> {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Params<F>,
    pub adapter: Option<LoraAdapter<F>>,
}

impl<F: Scalar> BackboneSnapshot<F> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: *config,
            params: Params::init(config),
            adapter: None,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
            && self
                .adapter
                .as_ref()
                .is_none_or(|a| a.tensors().iter().all(|(_, t)| t.all_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> BackboneSnapshot<G> {
        BackboneSnapshot {
            format_version: self.format_version,
            config: self.config,
            params: self.params.cast(),
            adapter: self.adapter.as_ref().map(|a| a.cast()),
        }
    }
}

/// Padded-batch logits with per-position validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<F>,
    /// false at pad positions
    pub valid: Vec<bool>,
}

impl<F: Scalar> Logits<F> {
    pub fn at(&self, b: usize, pos: usize) -> &[F] {
        let row = b * self.len + pos;
        &self.data[row * self.vocab..(row + 1) * self.vocab]
    }

    /// The unpadded logits of sequence `b`.
    pub fn sequence(&self, b: usize) -> &[F] {
        let n = self.valid[b * self.len..(b + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count();
        &self.data[b * self.len * self.vocab..(b * self.len + n) * self.vocab]
    }
}

/// Working model: dense parameters plus an optional LoRA adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    config: ModelConfig,
    pub params: Params<F>,
    pub adapter: Option<LoraAdapter<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        Ok(Self::from_snapshot(BackboneSnapshot::init(config)?))
    }

    pub fn from_snapshot(snapshot: BackboneSnapshot<F>) -> Self {
        Self {
            config: snapshot.config,
            params: snapshot.params,
            adapter: snapshot.adapter,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn snapshot(&self) -> BackboneSnapshot<F> {
        BackboneSnapshot {
            format_version: FORMAT_VERSION,
            config: self.config,
            params: self.params.clone(),
            adapter: self.adapter.clone(),
        }
    }

    /// Replaces the model state with `snapshot` after checking version and shapes.
    pub fn restore(&mut self, snapshot: &BackboneSnapshot<F>) -> Result<()> {
        if snapshot.format_version != FORMAT_VERSION {
            return Err(Error::Version(snapshot.format_version));
        }
        let mine = self.params.tensors();
        let theirs = snapshot.params.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape {
                name: "layers".into(),
                expected: vec![mine.len()],
                found: vec![theirs.len()],
            });
        }
        for ((name, _, a), (_, _, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: a.shape().to_vec(),
                    found: b.shape().to_vec(),
                });
            }
        }
        self.config = snapshot.config;
        self.params.clone_from(&snapshot.params);
        self.adapter.clone_from(&snapshot.adapter);
        Ok(())
    }

    pub fn attach_adapter(&mut self, spec: LoraSpec, seed: u64) -> Result<()> {
        self.adapter = Some(LoraAdapter::new(&self.config, spec, seed)?);
        Ok(())
    }

    pub fn detach_adapter(&mut self) -> Option<LoraAdapter<F>> {
        self.adapter.take()
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len > self.config.max_positions {
            return Err(Error::Overlength {
                len: batch.len,
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Config(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput<F>> {
        self.check_batch(batch)?;
        Ok(forward(&self.config, &self.params, self.adapter.as_ref(), batch, false).0)
    }

    pub(crate) fn forward_with_cache(&self, batch: &Batch) -> Result<(ForwardOutput<F>, Cache<F>)> {
        self.check_batch(batch)?;
        let (out, cache) = forward(&self.config, &self.params, self.adapter.as_ref(), batch, true);
        Ok((out, cache.expect("cache requested")))
    }

    /// Logits for a list of sequences, right-padded to a common length.
    pub fn forward_logits(&self, seqs: &[&TokenSequence]) -> Result<Logits<F>> {
        let ids: Vec<&[usize]> = seqs.iter().map(|s| s.ids()).collect();
        let batch = Batch::from_sequences(&ids);
        let out = self.forward(&batch)?;
        Ok(Logits {
            batch: batch.batch,
            len: batch.len,
            vocab: self.config.vocab_size,
            data: out.logits,
            valid: batch.valid,
        })
    }
}
