//! Frozen downstream heads over pooled backbone embeddings, and the
//! confidence functions used to pick a customization step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::checkpoint::{read_tensors, write_tensors, Reader};
use crate::backbone::{Batch, Model};
use crate::error::{Error, Result};
use crate::scoring::{pseudo_perplexity, EVAL_BATCH};
use crate::seqio::TokenSequence;
use crate::tensor::{Scalar, Tensor};

/// Mean of final hidden states over residue positions (bos, eos and pad excluded).
pub fn embed<F: Scalar>(model: &Model<F>, x: &TokenSequence) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let batch = Batch::from_sequences(&[x.ids()]);
    let out = model.forward(&batch)?;
    let d = model.config().model_dim;
    let n = x.raw_length();
    let mut e = vec![0.0; d];
    for pos in 1..=n {
        for (acc, v) in e.iter_mut().zip(&out.hidden[pos * d..(pos + 1) * d]) {
            *acc += v.as_f64();
        }
    }
    e.iter_mut().for_each(|v| *v /= n as f64);
    Ok(e)
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Linear softmax classifier `p = softmax(W e + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub labels: Vec<String>,
    /// classes × dim
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl ClassifierHead {
    pub fn zeros(labels: Vec<String>, dim: usize) -> Self {
        let c = labels.len();
        Self {
            labels,
            weight: Tensor::zeros(&[c, dim]),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn classify(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim() {
            return Err(Error::Shape {
                name: "embedding".into(),
                expected: vec![self.dim()],
                found: vec![embedding.len()],
            });
        }
        let mut z: Vec<f64> = (0..self.num_classes())
            .map(|c| {
                self.weight
                    .row(c)
                    .iter()
                    .zip(embedding)
                    .fold(self.bias.data()[c] as f64, |acc, (&w, &e)| acc + w as f64 * e)
            })
            .collect();
        softmax(&mut z);
        Ok(z)
    }

    /// Full-batch gradient descent on multinomial cross-entropy with an L2 penalty.
    pub fn train(
        labels: Vec<String>,
        embeddings: &[Vec<f64>],
        targets: &[usize],
        cfg: &HeadTrainConfig,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("head training set"));
        }
        if embeddings.len() != targets.len() {
            return Err(Error::LengthMismatch {
                left: embeddings.len(),
                right: targets.len(),
            });
        }
        let c = labels.len();
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Config(format!("class index {bad} out of range")));
        }
        let d = embeddings[0].len();
        let n = embeddings.len() as f64;
        let mut w = vec![0.0f64; c * d];
        let mut b = vec![0.0f64; c];
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for (e, &t) in embeddings.iter().zip(targets) {
                let mut z: Vec<f64> = (0..c)
                    .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(e).map(|(a, x)| a * x).sum::<f64>())
                    .collect();
                softmax(&mut z);
                z[t] -= 1.0;
                for k in 0..c {
                    gb[k] += z[k] / n;
                    for j in 0..d {
                        gw[k * d + j] += z[k] * e[j] / n;
                    }
                }
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * (gi + cfg.l2 * *wi);
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= cfg.learning_rate * gi;
            }
        }
        Ok(Self {
            labels,
            weight: Tensor::from_vec(&[c, d], w.into_iter().map(|v| v as f32).collect()),
            bias: Tensor::from_vec(&[c], b.into_iter().map(|v| v as f32).collect()),
        })
    }

    /// `HEAD` section payload: label list then the two tensors.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&(l.len() as u16).to_le_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        write_tensors(
            &mut out,
            &[("head.weight".to_string(), &self.weight), ("head.bias".to_string(), &self.bias)],
        );
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u16()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("head label is not UTF-8".into()))?;
            labels.push(s.to_string());
        }
        let mut tensors = read_tensors::<f32>(&mut r)?;
        if !r.is_done() || tensors.len() != 2 {
            return Err(Error::Checkpoint("malformed head section".into()));
        }
        let (_, bias) = tensors.pop().unwrap();
        let (_, weight) = tensors.pop().unwrap();
        if weight.shape().len() != 2 || weight.shape()[0] != n || bias.shape() != [n] {
            return Err(Error::Shape {
                name: "head.weight".into(),
                expected: vec![n],
                found: weight.shape().to_vec(),
            });
        }
        Ok(Self { labels, weight, bias })
    }

    /// Hex SHA-256 of the serialized parameters.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

/// Confidence score over the current model state; higher is more confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceAdapter {
    NegPseudoPerplexity,
    HeadMaxProb,
}

impl ConfidenceAdapter {
    pub fn evaluate<F: Scalar>(
        self,
        model: &Model<F>,
        x: &TokenSequence,
        head: Option<&ClassifierHead>,
    ) -> Result<f64> {
        match self {
            Self::NegPseudoPerplexity => Ok(-pseudo_perplexity(model, x, EVAL_BATCH)?),
            Self::HeadMaxProb => {
                let head = head.ok_or(Error::MissingHead)?;
                let p = head.classify(&embed(model, x)?)?;
                Ok(p.into_iter().fold(0.0, f64::max))
            }
        }
    }
}
