//! Single localized cross-attention block.
//!
//! Queries come from RGB tokens, keys and values from the IR tokens inside
//! each query's radius neighborhood. The block wraps the attention branch in
//! the pre-norm residual layout
//!
//! ```text
//! h   = z   + xattn(LN1(z), z_ir)
//! out = h   + FFN(LN2(h))
//! ```
//!
//! where `xattn` contributes only its branch `softmax(q K^T / sqrt(d_k)) V W_O`.

use crate::error::{shape_err, Result};
use crate::grid::NeighborhoodTable;
use crate::ops::{
    dot, matmul, softmax_in_place, softmax_row_backward, Ffn, FfnCache, LayerNorm, LayerNormCache, Linear,
};
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

use super::TokenGrid;

#[derive(Debug, Clone)]
pub struct LocalXAttnBlock {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
    pub radius: f64,
}

/// Activations of the attention branch kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x_q: Tensor,
    z_kv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    o: Tensor,
    alphas: Vec<Vec<f64>>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln_attn: LayerNormCache,
    attn: AttnCache,
    ln_ffn: LayerNormCache,
    ffn: FfnCache,
}

impl LocalXAttnBlock {
    /// Random Xavier weights everywhere, unit LN gains.
    pub fn random(rng: &mut Rng, d: usize, d_k: usize, d_v: usize, ffn_hidden: usize, radius: f64) -> Self {
        Self {
            w_q: Linear::xavier(rng, d, d_k, false),
            w_k: Linear::xavier(rng, d, d_k, false),
            w_v: Linear::xavier(rng, d, d_v, false),
            w_o: Linear::xavier(rng, d_v, d, false),
            ln_attn: LayerNorm::new(d),
            ln_ffn: LayerNorm::new(d),
            ffn: Ffn::new(rng, d, ffn_hidden),
            radius,
        }
    }

    /// Random projections but zero `W_O` and zero FFN output layer, so the
    /// block starts as the identity map.
    pub fn identity_init(rng: &mut Rng, d: usize, d_k: usize, d_v: usize, ffn_hidden: usize, radius: f64) -> Self {
        let mut b = Self::random(rng, d, d_k, d_v, ffn_hidden, radius);
        b.w_o = Linear::zeros(d_v, d, false);
        b.ffn.down = Linear::zeros(ffn_hidden, d, true);
        b
    }

    pub fn d_model(&self) -> usize {
        self.w_q.in_dim()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.out_dim()
    }

    fn check_table(&self, x_q: &Tensor, z_kv: &Tensor, table: &NeighborhoodTable) -> Result<()> {
        if table.radius() != self.radius {
            return Err(shape_err(
                "local_xattn",
                format!("table radius {} != block radius {}", table.radius(), self.radius),
            ));
        }
        if table.query_grid().len() != x_q.rows() || table.key_grid().len() != z_kv.rows() {
            return Err(shape_err(
                "local_xattn",
                format!(
                    "table covers {} queries / {} keys, got {} / {} tokens",
                    table.query_grid().len(),
                    table.key_grid().len(),
                    x_q.rows(),
                    z_kv.rows()
                ),
            ));
        }
        let d = self.d_model();
        if x_q.cols() != d || z_kv.cols() != d {
            return Err(shape_err(
                "local_xattn",
                format!("token widths {} / {} vs model width {d}", x_q.cols(), z_kv.cols()),
            ));
        }
        Ok(())
    }

    /// The attention branch `o W_O` without the residual.
    pub fn attention_branch(
        &self,
        x_q: &Tensor,
        z_kv: &Tensor,
        table: &NeighborhoodTable,
    ) -> Result<(Tensor, AttnCache)> {
        self.check_table(x_q, z_kv, table)?;
        let q = matmul(x_q, &self.w_q.weight.value)?;
        let k = matmul(z_kv, &self.w_k.weight.value)?;
        let v = matmul(z_kv, &self.w_v.weight.value)?;
        let inv_sqrt = 1.0 / (q.cols() as f64).sqrt();
        let d_v = v.cols();
        let n = x_q.rows();
        let mut o = Tensor::zeros(&[n, d_v]);
        let mut alphas = Vec::with_capacity(n);
        let mut neighbors = Vec::with_capacity(n);
        for u in 0..n {
            let nb = table.neighbors(u);
            let qu = q.row(u);
            let mut a: Vec<f64> = nb.iter().map(|&j| dot(qu, k.row(j)) * inv_sqrt).collect();
            softmax_in_place(&mut a);
            let ou = o.row_mut(u);
            for (&j, &aj) in nb.iter().zip(&a) {
                for (oc, vc) in ou.iter_mut().zip(v.row(j)) {
                    *oc += aj * vc;
                }
            }
            alphas.push(a);
            neighbors.push(nb.to_vec());
        }
        let out = matmul(&o, &self.w_o.weight.value)?;
        Ok((
            out,
            AttnCache {
                x_q: x_q.clone(),
                z_kv: z_kv.clone(),
                q,
                k,
                v,
                o,
                alphas,
                neighbors,
            },
        ))
    }

    /// Returns `(d x_q, d z_kv)` and accumulates projection gradients.
    pub fn attention_branch_backward(&mut self, cache: &AttnCache, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_o = self.w_o.backward(&cache.o, d_out)?;
        let inv_sqrt = 1.0 / (cache.q.cols() as f64).sqrt();
        let mut d_q = Tensor::zeros(cache.q.shape());
        let mut d_k = Tensor::zeros(cache.k.shape());
        let mut d_v = Tensor::zeros(cache.v.shape());
        let mut d_alpha = Vec::new();
        let mut d_score = Vec::new();
        for (u, (nb, a)) in cache.neighbors.iter().zip(&cache.alphas).enumerate() {
            if nb.is_empty() {
                continue;
            }
            let dou = d_o.row(u);
            d_alpha.clear();
            d_alpha.extend(nb.iter().map(|&j| dot(dou, cache.v.row(j))));
            for (&j, &aj) in nb.iter().zip(a) {
                for (dv, g) in d_v.row_mut(j).iter_mut().zip(dou) {
                    *dv += aj * g;
                }
            }
            d_score.clear();
            d_score.resize(nb.len(), 0.0);
            softmax_row_backward(a, &d_alpha, &mut d_score);
            let qu = cache.q.row(u).to_vec();
            let dqu = d_q.row_mut(u);
            for (&j, &ds) in nb.iter().zip(&d_score) {
                let s = ds * inv_sqrt;
                for (dq, kc) in dqu.iter_mut().zip(cache.k.row(j)) {
                    *dq += s * kc;
                }
            }
            for (&j, &ds) in nb.iter().zip(&d_score) {
                let s = ds * inv_sqrt;
                for (dk, qc) in d_k.row_mut(j).iter_mut().zip(&qu) {
                    *dk += s * qc;
                }
            }
        }
        let d_x = self.w_q.backward(&cache.x_q, &d_q)?;
        let mut d_z = self.w_k.backward(&cache.z_kv, &d_k)?;
        d_z.add_assign(&self.w_v.backward(&cache.z_kv, &d_v)?);
        Ok((d_x, d_z))
    }

    pub fn forward(&self, z: &Tensor, z_ir: &Tensor, table: &NeighborhoodTable) -> Result<(Tensor, BlockCache)> {
        let (x1, ln_attn) = self.ln_attn.forward(z)?;
        let (branch, attn) = self.attention_branch(&x1, z_ir, table)?;
        let h = z.add(&branch);
        let (x2, ln_ffn) = self.ln_ffn.forward(&h)?;
        let (f, ffn) = self.ffn.forward(&x2)?;
        let out = h.add(&f);
        Ok((
            out,
            BlockCache {
                ln_attn,
                attn,
                ln_ffn,
                ffn,
            },
        ))
    }

    /// Returns `(d z, d z_ir)`.
    pub fn backward(&mut self, cache: &BlockCache, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_x2 = self.ffn.backward(&cache.ffn, d_out)?;
        let mut d_h = self.ln_ffn.backward(&cache.ln_ffn, &d_x2);
        d_h.add_assign(d_out);
        let (d_x1, d_ir) = self.attention_branch_backward(&cache.attn, &d_h)?;
        let mut d_z = self.ln_attn.backward(&cache.ln_attn, &d_x1);
        d_z.add_assign(&d_h);
        Ok((d_z, d_ir))
    }
}

impl Parameterized for LocalXAttnBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w_q"), &self.w_q.weight);
        f(&join(prefix, "w_k"), &self.w_k.weight);
        f(&join(prefix, "w_v"), &self.w_v.weight);
        f(&join(prefix, "w_o"), &self.w_o.weight);
        self.ln_attn.visit_params(&join(prefix, "ln_attn"), f);
        self.ln_ffn.visit_params(&join(prefix, "ln_ffn"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w_q"), &mut self.w_q.weight);
        f(&join(prefix, "w_k"), &mut self.w_k.weight);
        f(&join(prefix, "w_v"), &mut self.w_v.weight);
        f(&join(prefix, "w_o"), &mut self.w_o.weight);
        self.ln_attn.visit_params_mut(&join(prefix, "ln_attn"), f);
        self.ln_ffn.visit_params_mut(&join(prefix, "ln_ffn"), f);
        self.ffn.visit_params_mut(&join(prefix, "ffn"), f);
    }
}

/// Local cross-attention with its residual: `z_q + o W_O`.
///
/// Queries whose neighborhood is empty (only possible for `r < 1` across
/// mismatched grids) pass through unchanged.
pub fn local_xattn(
    z_q: &TokenGrid,
    z_kv: &TokenGrid,
    table: &NeighborhoodTable,
    block: &LocalXAttnBlock,
) -> Result<Tensor> {
    if table.query_grid() != &z_q.grid || table.key_grid() != &z_kv.grid {
        return Err(shape_err(
            "local_xattn",
            format!(
                "table grids {:?}/{:?} do not match token grids {:?}/{:?}",
                table.query_grid(),
                table.key_grid(),
                z_q.grid,
                z_kv.grid
            ),
        ));
    }
    let (branch, _) = block.attention_branch(&z_q.tokens, &z_kv.tokens, table)?;
    Ok(z_q.tokens.add(&branch))
}
