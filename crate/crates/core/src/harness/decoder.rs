//! One-block causal decoder with frozen base weights and low-rank adapters.
//!
//! The input sequence is `[visual prefix ; text tokens]`. Only the last
//! `n_out` positions produce logits. With a single block, keys and values
//! are needed for every position but queries, the MLP and the head only for
//! the output positions, so the rest is skipped without changing the result.

use crate::error::{shape_err, Error, Result};
use crate::ops::{
    dot, gelu, gelu_grad, normal_tensor, softmax_in_place, softmax_row_backward, xavier_uniform, LayerNorm,
    LayerNormCache, LoraCache, LoraLinear,
};
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

#[derive(Debug, Clone)]
pub struct Decoder {
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub ln_attn: LayerNorm,
    pub w_q: LoraLinear,
    pub w_k: LoraLinear,
    pub w_v: LoraLinear,
    pub w_o: LoraLinear,
    pub ln_mlp: LayerNorm,
    pub up: LoraLinear,
    pub down: LoraLinear,
    pub ln_out: LayerNorm,
    pub head: LoraLinear,
    pub heads: usize,
}

pub struct DecoderCache {
    n_vis: usize,
    n_out: usize,
    ln_attn: LayerNormCache,
    q: (Tensor, LoraCache),
    k: (Tensor, LoraCache),
    v: (Tensor, LoraCache),
    probs: Tensor,
    o: LoraCache,
    ln_mlp: LayerNormCache,
    up: (Tensor, LoraCache),
    down: LoraCache,
    ln_out: LayerNormCache,
    head: LoraCache,
}

impl Decoder {
    /// `vocab` output classes, width `d`, room for `max_len` positions.
    /// The output head's base weight is zero, so an untrained decoder
    /// predicts the uniform distribution.
    pub fn new(
        rng: &mut Rng,
        vocab: usize,
        d: usize,
        heads: usize,
        max_len: usize,
        rank: usize,
        scale: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {d}")));
        }
        let frozen_ln = || {
            let mut ln = LayerNorm::new(d);
            ln.freeze();
            ln
        };
        let (ln_attn, ln_mlp, ln_out) = (frozen_ln(), frozen_ln(), frozen_ln());
        let tok_emb = Param::frozen(normal_tensor(rng, vocab, d, 0.3));
        let pos_emb = Param::frozen(normal_tensor(rng, max_len, d, 0.1));
        let mut lora = |fan_in, fan_out| {
            let base = xavier_uniform(rng, fan_in, fan_out);
            LoraLinear::init(rng, base, rank, scale)
        };
        let w_q = lora(d, d)?;
        let w_k = lora(d, d)?;
        let w_v = lora(d, d)?;
        let w_o = lora(d, d)?;
        let up = lora(d, 4 * d)?;
        let down = lora(4 * d, d)?;
        let head = LoraLinear::init(rng, Tensor::zeros(&[d, vocab]), rank, scale)?;
        Ok(Self {
            tok_emb,
            pos_emb,
            ln_attn,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_mlp,
            up,
            down,
            ln_out,
            head,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.tok_emb.value.cols()
    }

    pub fn vocab(&self) -> usize {
        self.tok_emb.value.rows()
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.value.rows()
    }

    fn embed(&self, prefix: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        if prefix.cols() != d {
            return Err(shape_err("decoder", format!("prefix width {} vs {d}", prefix.cols())));
        }
        let t = prefix.rows() + tokens.len();
        if t > self.max_len() {
            return Err(shape_err(
                "decoder",
                format!("sequence of {t} exceeds {}", self.max_len()),
            ));
        }
        let mut x = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let row = x.row_mut(i);
            if i < prefix.rows() {
                row.copy_from_slice(prefix.row(i));
            } else {
                let id = tokens[i - prefix.rows()];
                if id >= self.vocab() {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: self.vocab(),
                    });
                }
                for (r, e) in row.iter_mut().zip(self.tok_emb.value.row(id)) {
                    *r += e;
                }
            }
            for (r, p) in row.iter_mut().zip(self.pos_emb.value.row(i)) {
                *r += p;
            }
        }
        Ok(x)
    }

    /// Logits for the last `n_out` positions of `[prefix ; tokens]`.
    pub fn forward(&self, prefix: &Tensor, tokens: &[usize], n_out: usize) -> Result<(Tensor, DecoderCache)> {
        let x = self.embed(prefix, tokens)?;
        let t = x.rows();
        if n_out == 0 || n_out > tokens.len() {
            return Err(shape_err(
                "decoder",
                format!("{n_out} outputs from {} text tokens", tokens.len()),
            ));
        }
        let first = t - n_out;
        let d = self.dim();
        let (h, ln_attn) = self.ln_attn.forward(&x)?;
        let h_out = rows(&h, first, t);
        let q = self.w_q.forward(&h_out)?;
        let k = self.w_k.forward(&h)?;
        let v = self.w_v.forward(&h)?;

        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = Tensor::zeros(&[self.heads * n_out, t]);
        let mut mix = Tensor::zeros(&[n_out, d]);
        for hd in 0..self.heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n_out {
                let visible = first + i + 1;
                let row = &mut probs.row_mut(hd * n_out + i)[..visible];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(&q.0.row(i)[cols.clone()], &k.0.row(j)[cols.clone()]) * inv;
                }
                softmax_in_place(row);
                let out = &mut mix.row_mut(i)[cols.clone()];
                for (j, &p) in row.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&v.0.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let (attn, o) = self.w_o.forward(&mix)?;
        let mut x_out = rows(&x, first, t);
        x_out.add_assign(&attn);

        let (h2, ln_mlp) = self.ln_mlp.forward(&x_out)?;
        let up = self.up.forward(&h2)?;
        let mut act = up.0.clone();
        for a in act.data_mut() {
            *a = gelu(*a);
        }
        let (m, down) = self.down.forward(&act)?;
        let mut y = x_out;
        y.add_assign(&m);
        let (f, ln_out) = self.ln_out.forward(&y)?;
        let (logits, head) = self.head.forward(&f)?;
        Ok((
            logits,
            DecoderCache {
                n_vis: prefix.rows(),
                n_out,
                ln_attn,
                q,
                k,
                v,
                probs,
                o,
                ln_mlp,
                up,
                down,
                ln_out,
                head,
            },
        ))
    }

    /// Accumulates adapter gradients; returns the gradient for the visual prefix.
    pub fn backward(&mut self, cache: &DecoderCache, d_logits: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        let n_out = cache.n_out;
        let t = cache.probs.cols();
        let first = t - n_out;

        let d_f = self.head.backward(&cache.head, d_logits)?;
        let d_y = self.ln_out.backward(&cache.ln_out, &d_f);
        let mut d_act = self.down.backward(&cache.down, &d_y)?;
        for (g, pre) in d_act.data_mut().iter_mut().zip(cache.up.0.data()) {
            *g *= gelu_grad(*pre);
        }
        let d_h2 = self.up.backward(&cache.up.1, &d_act)?;
        let mut d_x_out = self.ln_mlp.backward(&cache.ln_mlp, &d_h2);
        d_x_out.add_assign(&d_y);

        let d_mix = self.w_o.backward(&cache.o, &d_x_out)?;
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut d_q = Tensor::zeros(&[n_out, d]);
        let mut d_k = Tensor::zeros(&[t, d]);
        let mut d_v = Tensor::zeros(&[t, d]);
        let mut d_p = vec![0.0; t];
        let mut d_s = vec![0.0; t];
        for hd in 0..self.heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n_out {
                let visible = first + i + 1;
                let p = &cache.probs.row(hd * n_out + i)[..visible];
                let g = &d_mix.row(i)[cols.clone()];
                for j in 0..visible {
                    d_p[j] = dot(g, &cache.v.0.row(j)[cols.clone()]);
                    for (dv, gv) in d_v.row_mut(j)[cols.clone()].iter_mut().zip(g) {
                        *dv += p[j] * gv;
                    }
                }
                softmax_row_backward(p, &d_p[..visible], &mut d_s[..visible]);
                for j in 0..visible {
                    let s = d_s[j] * inv;
                    if s == 0.0 {
                        continue;
                    }
                    for (a, b) in d_q.row_mut(i)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.k.0.row(j)[cols.clone()])
                    {
                        *a += s * b;
                    }
                    for (a, b) in d_k.row_mut(j)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.q.0.row(i)[cols.clone()])
                    {
                        *a += s * b;
                    }
                }
            }
        }

        let mut d_h = self.w_k.backward(&cache.k.1, &d_k)?;
        d_h.add_assign(&self.w_v.backward(&cache.v.1, &d_v)?);
        let d_hq = self.w_q.backward(&cache.q.1, &d_q)?;
        for i in 0..n_out {
            for (a, b) in d_h.row_mut(first + i).iter_mut().zip(d_hq.row(i)) {
                *a += b;
            }
        }
        let mut d_x = self.ln_attn.backward(&cache.ln_attn, &d_h);
        for i in 0..n_out {
            for (a, b) in d_x.row_mut(first + i).iter_mut().zip(d_x_out.row(i)) {
                *a += b;
            }
        }
        Ok(rows(&d_x, 0, cache.n_vis))
    }
}

fn rows(x: &Tensor, from: usize, to: usize) -> Tensor {
    let c = x.cols();
    Tensor::from_vec(&[to - from, c], x.data()[from * c..to * c].to_vec()).expect("row slice shape")
}

impl Parameterized for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "tok_emb"), &self.tok_emb);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        self.ln_attn.visit_params(&join(prefix, "ln_attn"), f);
        self.w_q.visit_params(&join(prefix, "w_q"), f);
        self.w_k.visit_params(&join(prefix, "w_k"), f);
        self.w_v.visit_params(&join(prefix, "w_v"), f);
        self.w_o.visit_params(&join(prefix, "w_o"), f);
        self.ln_mlp.visit_params(&join(prefix, "ln_mlp"), f);
        self.up.visit_params(&join(prefix, "up"), f);
        self.down.visit_params(&join(prefix, "down"), f);
        self.ln_out.visit_params(&join(prefix, "ln_out"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "tok_emb"), &mut self.tok_emb);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        self.ln_attn.visit_params_mut(&join(prefix, "ln_attn"), f);
        self.w_q.visit_params_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_params_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_params_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_params_mut(&join(prefix, "w_o"), f);
        self.ln_mlp.visit_params_mut(&join(prefix, "ln_mlp"), f);
        self.up.visit_params_mut(&join(prefix, "up"), f);
        self.down.visit_params_mut(&join(prefix, "down"), f);
        self.ln_out.visit_params_mut(&join(prefix, "ln_out"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
