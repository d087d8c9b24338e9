use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::{Scalar, Tensor};

/// Whether a tensor is an input embedding table. Trainable selections are
/// expressed over groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Body,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.weight",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.o.weight",
    "attn.o.bias",
    "ln2.weight",
    "ln2.bias",
    "ffn.w1.weight",
    "ffn.w1.bias",
    "ffn.w2.weight",
    "ffn.w2.bias",
];

/// One pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn fields(&self) -> [&Tensor<F>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<F>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Attention projection weights in q, k, v, o order.
    pub fn attention_weights(&self) -> [&Tensor<F>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn attention_weights_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// All dense backbone and MLM-head tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_g: Tensor<F>,
    pub final_ln_b: Tensor<F>,
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let ffn = cfg.ffn_dim;
        let layer = || LayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[ffn, d]),
            b1: Tensor::zeros(&[ffn]),
            w2: Tensor::zeros(&[d, ffn]),
            b2: Tensor::zeros(&[d]),
        };
        Self {
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.max_positions, d]),
            layers: (0..cfg.num_layers).map(|_| layer()).collect(),
            final_ln_g: Tensor::zeros(&[d]),
            final_ln_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[cfg.vocab_size, d]),
            head_b: Tensor::zeros(&[cfg.vocab_size]),
        }
    }

    /// Deterministic initialization from `cfg.seed`.
    ///
    /// Linear weights are N(0, 1/fan_in); the two projections feeding each
    /// residual add are further scaled by 1/sqrt(2 * num_layers). Embeddings
    /// are N(0, 1), layer-norm gains 1 and all biases 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |t: &mut Tensor<F>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in t.data_mut() {
                *x = F::from_f64_lossy(normal.sample(&mut rng));
            }
        };
        let d = cfg.model_dim as f64;
        let ffn = cfg.ffn_dim as f64;
        let depth = (2.0 * cfg.num_layers.max(1) as f64).sqrt();
        fill(&mut p.tok_emb, 1.0);
        fill(&mut p.pos_emb, 1.0);
        for layer in &mut p.layers {
            fill(&mut layer.wq, d.recip().sqrt());
            fill(&mut layer.wk, d.recip().sqrt());
            fill(&mut layer.wv, d.recip().sqrt());
            fill(&mut layer.wo, d.recip().sqrt() / depth);
            fill(&mut layer.w1, d.recip().sqrt());
            fill(&mut layer.w2, ffn.recip().sqrt() / depth);
            layer.ln1_g = Tensor::filled(&[cfg.model_dim], F::one());
            layer.ln2_g = Tensor::filled(&[cfg.model_dim], F::one());
        }
        p.final_ln_g = Tensor::filled(&[cfg.model_dim], F::one());
        fill(&mut p.head_w, d.recip().sqrt());
        p
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Tensor<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), ParamGroup::Embedding, &self.tok_emb),
            ("pos_emb".to_string(), ParamGroup::Embedding, &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), ParamGroup::Body, t));
            }
        }
        out.push(("final_ln.weight".into(), ParamGroup::Body, &self.final_ln_g));
        out.push(("final_ln.bias".into(), ParamGroup::Body, &self.final_ln_b));
        out.push(("head.weight".into(), ParamGroup::Body, &self.head_w));
        out.push(("head.bias".into(), ParamGroup::Body, &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_ln_g);
        out.push(&mut self.final_ln_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn fill_zero(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::fill_zero);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.all_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let cast_layer = |l: &LayerParams<F>| LayerParams {
            ln1_g: l.ln1_g.cast(),
            ln1_b: l.ln1_b.cast(),
            wq: l.wq.cast(),
            bq: l.bq.cast(),
            wk: l.wk.cast(),
            bk: l.bk.cast(),
            wv: l.wv.cast(),
            bv: l.bv.cast(),
            wo: l.wo.cast(),
            bo: l.bo.cast(),
            ln2_g: l.ln2_g.cast(),
            ln2_b: l.ln2_b.cast(),
            w1: l.w1.cast(),
            b1: l.b1.cast(),
            w2: l.w2.cast(),
            b2: l.b2.cast(),
        };
        Params {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            final_ln_g: self.final_ln_g.cast(),
            final_ln_b: self.final_ln_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}
