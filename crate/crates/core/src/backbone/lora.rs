//! Low-rank adapters on the attention projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{gemm_scaled, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Factor pair for one projection: `delta W = scale * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    /// rank × in_dim
    pub a: Tensor<F>,
    /// out_dim × rank
    pub b: Tensor<F>,
}

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    pub spec: LoraSpec,
    /// Per layer, pairs for the q, k, v, o projections.
    pub layers: Vec<[LoraPair<F>; 4]>,
}

impl<F: Scalar> LoraAdapter<F> {
    /// `A ~ N(0, 1/rank)` (variance), `B = 0`.
    pub fn new(cfg: &ModelConfig, spec: LoraSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (spec.rank as f64).recip().sqrt()).expect("positive std");
        let d = cfg.model_dim;
        let mut pair = || LoraPair {
            a: Tensor::from_vec(
                &[spec.rank, d],
                (0..spec.rank * d)
                    .map(|_| F::from_f64_lossy(normal.sample(&mut rng)))
                    .collect(),
            ),
            b: Tensor::zeros(&[d, spec.rank]),
        };
        let layers = (0..cfg.num_layers)
            .map(|_| [pair(), pair(), pair(), pair()])
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|pairs| {
                pairs.clone().map(|p| LoraPair {
                    a: Tensor::zeros(p.a.shape()),
                    b: Tensor::zeros(p.b.shape()),
                })
            })
            .collect();
        Self {
            spec: self.spec,
            layers,
        }
    }

    /// alpha / rank
    pub fn scale(&self) -> F {
        F::from_f64_lossy(self.spec.alpha / self.spec.rank as f64)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, pairs) in self.layers.iter().enumerate() {
            for (target, p) in LORA_TARGETS.iter().zip(pairs) {
                out.push((format!("lora.layers.{i}.{target}.a"), &p.a));
                out.push((format!("lora.layers.{i}.{target}.b"), &p.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for pairs in &mut self.layers {
            for p in pairs.iter_mut() {
                out.push(&mut p.a);
                out.push(&mut p.b);
            }
        }
        out
    }

    pub fn fill_zero(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::fill_zero);
    }

    pub fn cast<G: Scalar>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            spec: self.spec,
            layers: self
                .layers
                .iter()
                .map(|pairs| {
                    pairs.clone().map(|p| LoraPair {
                        a: p.a.cast(),
                        b: p.b.cast(),
                    })
                })
                .collect(),
        }
    }

    /// Folds `W + scale * B A` into a copy of `params`.
    pub fn materialize(&self, params: &Params<F>) -> Params<F> {
        let mut out = params.clone();
        let scale = self.scale();
        for (layer, pairs) in out.layers.iter_mut().zip(&self.layers) {
            for (w, p) in layer.attention_weights_mut().into_iter().zip(pairs) {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let rank = p.a.shape()[0];
                gemm_scaled(
                    rows,
                    rank,
                    cols,
                    scale,
                    p.b.data(),
                    false,
                    p.a.data(),
                    false,
                    F::one(),
                    w.data_mut(),
                );
            }
        }
        out
    }
}
