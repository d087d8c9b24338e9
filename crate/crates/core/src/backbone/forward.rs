//! Encoder forward and reverse-mode passes.
//!
//! Activations are stacked as `(batch * len) × dim` row-major matrices so
//! every projection is one GEMM over the whole padded batch. Attention runs
//! per (sequence, head) with padded keys excluded from the softmax support.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x  = tok_emb[ids] + pos_emb[0..len]
//! x += O(attn(LN1(x)))
//! x += W2 gelu(W1 LN2(x))
//! logits = head(LN_final(x))
//! ```

use super::{LoraAdapter, LoraPair, ModelConfig, Params};
use crate::seqio::{Alphabet, TokenId};
use crate::tensor::{gemm, gemm_scaled, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// A right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    /// false at pad positions
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(Alphabet::PAD, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Self {
            ids,
            valid,
            batch: seqs.len(),
            len,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `x A^T` per q, k, v, o target; empty without an adapter.
    lora_u: [Vec<F>; 4],
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: LnCache<F>,
    c: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
}

pub(crate) struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    final_ln: LnCache<F>,
}

pub struct ForwardOutput<F> {
    /// rows × vocab
    pub logits: Vec<F>,
    /// Final-norm hidden states, rows × dim.
    pub hidden: Vec<F>,
}

fn layer_norm<F: Scalar>(
    x: &[F],
    rows: usize,
    d: usize,
    g: &Tensor<F>,
    b: &Tensor<F>,
) -> (Vec<F>, LnCache<F>) {
    let eps = F::from_f64_lossy(LN_EPS);
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let mut y = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = g.data()[j] * h + b.data()[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx`.
fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    d: usize,
    g: &Tensor<F>,
    gg: &mut Tensor<F>,
    gb: &mut Tensor<F>,
    dx: &mut [F],
) {
    let rows = cache.rstd.len();
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            gg.data_mut()[j] += dyr[j] * xh[j];
            gb.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g.data()[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// `y = x W^T + b (+ scale * (x A^T) B^T)`; returns `y` and `x A^T`.
fn linear<F: Scalar>(
    x: &[F],
    rows: usize,
    w: &Tensor<F>,
    b: &Tensor<F>,
    lora: Option<(&LoraPair<F>, F)>,
) -> (Vec<F>, Vec<F>) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![F::zero(); rows * out_dim];
    gemm(rows, in_dim, out_dim, x, false, w.data(), true, F::zero(), &mut y);
    for r in 0..rows {
        for (yv, &bv) in y[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()) {
            *yv += bv;
        }
    }
    let mut u = Vec::new();
    if let Some((pair, scale)) = lora {
        let rank = pair.a.shape()[0];
        u = vec![F::zero(); rows * rank];
        gemm(rows, in_dim, rank, x, false, pair.a.data(), true, F::zero(), &mut u);
        gemm_scaled(rows, rank, out_dim, scale, &u, false, pair.b.data(), true, F::one(), &mut y);
    }
    (y, u)
}

struct LoraBackward<'a, F> {
    pair: &'a LoraPair<F>,
    scale: F,
    u: &'a [F],
    grad: &'a mut LoraPair<F>,
}

/// Accumulates weight gradients and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Scalar>(
    x: &[F],
    rows: usize,
    w: &Tensor<F>,
    dy: &[F],
    gw: &mut Tensor<F>,
    gb: &mut Tensor<F>,
    lora: Option<LoraBackward<'_, F>>,
    dx: &mut [F],
) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    gemm(out_dim, rows, in_dim, dy, true, x, false, F::one(), gw.data_mut());
    for r in 0..rows {
        for (g, &d) in gb.data_mut().iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
            *g += d;
        }
    }
    gemm(rows, out_dim, in_dim, dy, false, w.data(), false, F::one(), dx);
    if let Some(l) = lora {
        let rank = l.pair.a.shape()[0];
        gemm_scaled(out_dim, rows, rank, l.scale, dy, true, l.u, false, F::one(), l.grad.b.data_mut());
        let mut du = vec![F::zero(); rows * rank];
        gemm_scaled(rows, out_dim, rank, l.scale, dy, false, l.pair.b.data(), false, F::zero(), &mut du);
        gemm(rank, rows, in_dim, &du, true, x, false, F::one(), l.grad.a.data_mut());
        gemm(rows, rank, in_dim, &du, false, l.pair.a.data(), false, F::one(), dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

struct AttnShape {
    batch: usize,
    len: usize,
    heads: usize,
    head_dim: usize,
}

impl AttnShape {
    fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn gather<F: Scalar>(&self, src: &[F], b: usize, h: usize, dst: &mut [F]) {
        let (d, dh) = (self.dim(), self.head_dim);
        for i in 0..self.len {
            let row = (b * self.len + i) * d + h * dh;
            dst[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
        }
    }

    fn scatter<F: Scalar>(&self, src: &[F], b: usize, h: usize, dst: &mut [F]) {
        let (d, dh) = (self.dim(), self.head_dim);
        for i in 0..self.len {
            let row = (b * self.len + i) * d + h * dh;
            dst[row..row + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
        }
    }
}

fn attention<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    valid: &[bool],
    s: &AttnShape,
) -> (Vec<F>, Vec<F>) {
    let (n, dh) = (s.len, s.head_dim);
    let scale = F::from_f64_lossy((dh as f64).sqrt().recip());
    let mut ctx = vec![F::zero(); s.batch * n * s.dim()];
    let mut probs = vec![F::zero(); s.batch * s.heads * n * n];
    let mut qh = vec![F::zero(); n * dh];
    let mut kh = vec![F::zero(); n * dh];
    let mut vh = vec![F::zero(); n * dh];
    let mut ch = vec![F::zero(); n * dh];
    for b in 0..s.batch {
        let keys = &valid[b * n..(b + 1) * n];
        for h in 0..s.heads {
            s.gather(q, b, h, &mut qh);
            s.gather(k, b, h, &mut kh);
            s.gather(v, b, h, &mut vh);
            let p = &mut probs[(b * s.heads + h) * n * n..(b * s.heads + h + 1) * n * n];
            gemm_scaled(n, dh, n, scale, &qh, false, &kh, true, F::zero(), p);
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let max = row
                    .iter()
                    .zip(keys)
                    .filter(|(_, &ok)| ok)
                    .map(|(&x, _)| x)
                    .fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for (x, &ok) in row.iter_mut().zip(keys) {
                    if ok {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = F::zero();
                    }
                }
                let inv = sum.recip();
                row.iter_mut().for_each(|x| *x *= inv);
            }
            gemm(n, n, dh, p, false, &vh, false, F::zero(), &mut ch);
            s.scatter(&ch, b, h, &mut ctx);
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    dctx: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    s: &AttnShape,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (n, dh) = (s.len, s.head_dim);
    let scale = F::from_f64_lossy((dh as f64).sqrt().recip());
    let total = s.batch * n * s.dim();
    let (mut dq, mut dk, mut dv) = (vec![F::zero(); total], vec![F::zero(); total], vec![F::zero(); total]);
    let mut qh = vec![F::zero(); n * dh];
    let mut kh = vec![F::zero(); n * dh];
    let mut vh = vec![F::zero(); n * dh];
    let mut dch = vec![F::zero(); n * dh];
    let mut tmp = vec![F::zero(); n * dh];
    let mut dp = vec![F::zero(); n * n];
    for b in 0..s.batch {
        for h in 0..s.heads {
            s.gather(q, b, h, &mut qh);
            s.gather(k, b, h, &mut kh);
            s.gather(v, b, h, &mut vh);
            s.gather(dctx, b, h, &mut dch);
            let p = &probs[(b * s.heads + h) * n * n..(b * s.heads + h + 1) * n * n];
            gemm(n, dh, n, &dch, false, &vh, true, F::zero(), &mut dp);
            gemm(n, n, dh, p, true, &dch, false, F::zero(), &mut tmp);
            s.scatter(&tmp, b, h, &mut dv);
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            gemm_scaled(n, n, dh, scale, &dp, false, &kh, false, F::zero(), &mut tmp);
            s.scatter(&tmp, b, h, &mut dq);
            gemm_scaled(n, n, dh, scale, &dp, true, &qh, false, F::zero(), &mut tmp);
            s.scatter(&tmp, b, h, &mut dk);
        }
    }
    (dq, dk, dv)
}

pub(crate) fn forward<F: Scalar>(
    cfg: &ModelConfig,
    params: &Params<F>,
    adapter: Option<&LoraAdapter<F>>,
    batch: &Batch,
    keep_cache: bool,
) -> (ForwardOutput<F>, Option<Cache<F>>) {
    let d = cfg.model_dim;
    let rows = batch.rows();
    let shape = AttnShape {
        batch: batch.batch,
        len: batch.len,
        heads: cfg.num_heads,
        head_dim: d / cfg.num_heads,
    };
    let mut x = vec![F::zero(); rows * d];
    for r in 0..rows {
        let tok = params.tok_emb.row(batch.ids[r]);
        let pos = params.pos_emb.row(r % batch.len);
        for ((xv, &t), &p) in x[r * d..(r + 1) * d].iter_mut().zip(tok).zip(pos) {
            *xv = t + p;
        }
    }
    let scale = adapter.map(|a| a.scale()).unwrap_or_else(F::zero);
    let mut layer_caches = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        let lora = |t: usize| adapter.map(|a| (&a.layers[li][t], scale));
        let (a, ln1) = layer_norm(&x, rows, d, &layer.ln1_g, &layer.ln1_b);
        let (q, uq) = linear(&a, rows, &layer.wq, &layer.bq, lora(0));
        let (k, uk) = linear(&a, rows, &layer.wk, &layer.bk, lora(1));
        let (v, uv) = linear(&a, rows, &layer.wv, &layer.bv, lora(2));
        let (ctx, probs) = attention(&q, &k, &v, &batch.valid, &shape);
        let (o, uo) = linear(&ctx, rows, &layer.wo, &layer.bo, lora(3));
        x.iter_mut().zip(&o).for_each(|(xv, &ov)| *xv += ov);
        let (c, ln2) = layer_norm(&x, rows, d, &layer.ln2_g, &layer.ln2_b);
        let (f1, _) = linear(&c, rows, &layer.w1, &layer.b1, None);
        let g: Vec<F> = f1.iter().map(|&z| gelu(z)).collect();
        let (f2, _) = linear(&g, rows, &layer.w2, &layer.b2, None);
        x.iter_mut().zip(&f2).for_each(|(xv, &fv)| *xv += fv);
        if keep_cache {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                lora_u: [uq, uk, uv, uo],
                probs,
                ctx,
                ln2,
                c,
                f1,
                g,
            });
        }
    }
    let (hidden, final_ln) = layer_norm(&x, rows, d, &params.final_ln_g, &params.final_ln_b);
    let (logits, _) = linear(&hidden, rows, &params.head_w, &params.head_b, None);
    let cache = keep_cache.then_some(Cache {
        layers: layer_caches,
        final_ln,
    });
    (ForwardOutput { logits, hidden }, cache)
}

fn lora_backward<'a, F: Scalar>(
    adapter: Option<&'a LoraAdapter<F>>,
    layer: usize,
    target: usize,
    scale: F,
    cache: &'a LayerCache<F>,
    grad: Option<&'a mut LoraPair<F>>,
) -> Option<LoraBackward<'a, F>> {
    match (adapter, grad) {
        (Some(a), Some(grad)) => Some(LoraBackward {
            pair: &a.layers[layer][target],
            scale,
            u: &cache.lora_u[target],
            grad,
        }),
        _ => None,
    }
}

/// Accumulates parameter (and adapter) gradients for upstream `dlogits`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Scalar>(
    cfg: &ModelConfig,
    params: &Params<F>,
    adapter: Option<&LoraAdapter<F>>,
    batch: &Batch,
    out: &ForwardOutput<F>,
    cache: &Cache<F>,
    dlogits: &[F],
    grads: &mut Params<F>,
    mut lora_grads: Option<&mut LoraAdapter<F>>,
) {
    let d = cfg.model_dim;
    let rows = batch.rows();
    let shape = AttnShape {
        batch: batch.batch,
        len: batch.len,
        heads: cfg.num_heads,
        head_dim: d / cfg.num_heads,
    };
    let mut dhidden = vec![F::zero(); rows * d];
    linear_backward(
        &out.hidden,
        rows,
        &params.head_w,
        dlogits,
        &mut grads.head_w,
        &mut grads.head_b,
        None,
        &mut dhidden,
    );
    let mut dx = vec![F::zero(); rows * d];
    layer_norm_backward(
        &dhidden,
        &cache.final_ln,
        d,
        &params.final_ln_g,
        &mut grads.final_ln_g,
        &mut grads.final_ln_b,
        &mut dx,
    );
    let scale = adapter.map(|a| a.scale()).unwrap_or_else(F::zero);
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];
        let ffn = cfg.ffn_dim;

        // feed-forward sublayer; dx doubles as the residual gradient
        let mut dg = vec![F::zero(); rows * ffn];
        linear_backward(&lc.g, rows, &layer.w2, &dx, &mut gl.w2, &mut gl.b2, None, &mut dg);
        for (dv, &z) in dg.iter_mut().zip(&lc.f1) {
            *dv *= gelu_grad(z);
        }
        let mut dc = vec![F::zero(); rows * d];
        linear_backward(&lc.c, rows, &layer.w1, &dg, &mut gl.w1, &mut gl.b1, None, &mut dc);
        layer_norm_backward(&dc, &lc.ln2, d, &layer.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b, &mut dx);

        // attention sublayer
        let mut lora_parts: [Option<&mut LoraPair<F>>; 4] = match lora_grads.as_deref_mut() {
            Some(lg) => {
                let [a, b, c, e] = &mut lg.layers[li];
                [Some(a), Some(b), Some(c), Some(e)]
            }
            None => [None, None, None, None],
        };
        let mut dctx = vec![F::zero(); rows * d];
        linear_backward(
            &lc.ctx,
            rows,
            &layer.wo,
            &dx,
            &mut gl.wo,
            &mut gl.bo,
            lora_backward(adapter, li, 3, scale, lc, lora_parts[3].take()),
            &mut dctx,
        );
        let (dq, dk, dv) = attention_backward(&dctx, &lc.q, &lc.k, &lc.v, &lc.probs, &shape);
        let mut da = vec![F::zero(); rows * d];
        linear_backward(&lc.a, rows, &layer.wq, &dq, &mut gl.wq, &mut gl.bq, lora_backward(adapter, li, 0, scale, lc, lora_parts[0].take()), &mut da);
        linear_backward(&lc.a, rows, &layer.wk, &dk, &mut gl.wk, &mut gl.bk, lora_backward(adapter, li, 1, scale, lc, lora_parts[1].take()), &mut da);
        linear_backward(&lc.a, rows, &layer.wv, &dv, &mut gl.wv, &mut gl.bv, lora_backward(adapter, li, 2, scale, lc, lora_parts[2].take()), &mut da);
        layer_norm_backward(&da, &lc.ln1, d, &layer.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b, &mut dx);
    }
    for r in 0..rows {
        if !batch.valid[r] {
            continue;
        }
        let dr = &dx[r * d..(r + 1) * d];
        let tok = grads.tok_emb.row_mut(batch.ids[r]);
        tok.iter_mut().zip(dr).for_each(|(g, &v)| *g += v);
        let pos = grads.pos_emb.row_mut(r % batch.len);
        pos.iter_mut().zip(dr).for_each(|(g, &v)| *g += v);
    }
}
