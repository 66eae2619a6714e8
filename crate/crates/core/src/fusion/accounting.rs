//! Parameter and FLOP accounting for the fusion stack and the language model
//! it feeds.
//!
//! FLOPs count `2·m·n·k` per `m x k` by `k x n` product. Attention cost is
//! the score (`Q K^T`) and value-mix (`α V`) products only; softmax, norms
//! and activations are ignored, and causal masking is not discounted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NeighborhoodTable, PatchGrid};

use super::FusionConfig;

/// Dimensions of a decoder-only language model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlmShape {
    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    /// Number of `dim x ffn_dim` matrices per MLP (3 for gated MLPs).
    pub ffn_matrices: usize,
    pub vocab: usize,
}

impl LlmShape {
    /// 7B LLaMA-family decoder (32 layers, width 4096, gated MLP of 11008).
    pub fn llama_7b() -> Self {
        Self {
            layers: 32,
            dim: 4096,
            ffn_dim: 11008,
            ffn_matrices: 3,
            vocab: 32000,
        }
    }
}

/// Multi-layer projection from fused tokens into the language model, given
/// as its layer widths (`[1024, 4096, 4096]` is two layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionShape {
    pub dims: Vec<usize>,
    pub bias: bool,
}

impl ProjectionShape {
    pub fn params(&self) -> u64 {
        self.dims
            .windows(2)
            .map(|w| (w[0] * w[1] + if self.bias { w[1] } else { 0 }) as u64)
            .sum()
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.dims.windows(2).map(|w| 2 * (tokens * w[0] * w[1]) as u64).sum()
    }
}

/// Closed-form parameter count of the fusion stack plus an optional projection.
pub fn count_params(config: &FusionConfig, projection: Option<&ProjectionShape>) -> u64 {
    let (d, dk, dv, h) = (
        config.d as u64,
        config.d_k as u64,
        config.d_v as u64,
        config.ffn_hidden() as u64,
    );
    let per_block = d * dk // W_Q
        + d * dk // W_K
        + d * dv // W_V
        + dv * d // W_O
        + 2 * 2 * d // two LayerNorms, gain + bias
        + (d * h + h) // FFN up
        + (h * d + d); // FFN down
    per_block * config.layers() as u64 + projection.map_or(0, ProjectionShape::params)
}

/// Score + mix FLOPs of dense cross-attention between `n_q` queries and `n_kv` keys.
pub fn dense_xattn_flops(n_q: usize, n_kv: usize, d_k: usize, d_v: usize) -> u64 {
    2 * (n_q * n_kv * d_k) as u64 + 2 * (n_q * n_kv * d_v) as u64
}

fn self_attention_flops(tokens: usize, dim: usize) -> u64 {
    dense_xattn_flops(tokens, tokens, dim, dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub radius: f64,
    /// Attention pairs `Σ_u |N_r(u)|`.
    pub pairs: u64,
    pub attention: u64,
    pub projections: u64,
    pub ffn: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.projections + self.ffn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub visual_tokens: usize,
    pub text_len: usize,
    /// LM self-attention (score + mix) over `N + text_len` tokens, all layers.
    pub fused_path: u64,
    /// LM self-attention over `2N + text_len` tokens, all layers.
    pub concat_path: u64,
    /// Visual-only LM attention cost, concatenation over fusion: `(2N)^2 / N^2`.
    pub visual_ratio: f64,
    pub blocks: Vec<BlockFlops>,
    pub projection: u64,
    /// Fusion blocks plus projection.
    pub fusion_overhead: u64,
    /// Full LM forward over `N + text_len` tokens: attention, MLP and head.
    pub base_path: u64,
    pub overhead_fraction: f64,
}

/// Cost model for one forward pass at a given token grid and prompt length.
pub fn attention_flops(
    config: &FusionConfig,
    grid: PatchGrid,
    text_len: usize,
    llm: &LlmShape,
    projection: Option<&ProjectionShape>,
) -> Result<FlopReport> {
    config.validate()?;
    if llm.layers == 0 || llm.dim == 0 {
        return Err(Error::InvalidArgument("language model extents must be positive".into()));
    }
    let n = grid.len();
    let layers = llm.layers as u64;
    let fused_path = layers * self_attention_flops(n + text_len, llm.dim);
    let concat_path = layers * self_attention_flops(2 * n + text_len, llm.dim);
    let visual_fused = layers * self_attention_flops(n, llm.dim);
    let visual_concat = layers * self_attention_flops(2 * n, llm.dim);
    let visual_ratio = visual_concat as f64 / visual_fused as f64;

    let (d, dk, dv, h) = (config.d, config.d_k, config.d_v, config.ffn_hidden());
    let mut blocks = Vec::with_capacity(config.layers());
    for &r in &config.radii {
        let pairs = NeighborhoodTable::build(grid, grid, r)?.total_pairs() as u64;
        blocks.push(BlockFlops {
            radius: r,
            pairs,
            attention: 2 * pairs * dk as u64 + 2 * pairs * dv as u64,
            projections: 2 * (n * d * dk) as u64 * 2 + 2 * (n * d * dv) as u64 + 2 * (n * dv * d) as u64,
            ffn: 2 * (n * d * h) as u64 * 2,
        });
    }
    let projection_flops = projection.map_or(0, |p| p.flops(n));
    let fusion_overhead = blocks.iter().map(BlockFlops::total).sum::<u64>() + projection_flops;

    let t = (n + text_len) as u64;
    let dim = llm.dim as u64;
    let per_layer = 2 * t * dim * (4 * dim)
        + 2 * t * dim * llm.ffn_dim as u64 * llm.ffn_matrices as u64
        + self_attention_flops(n + text_len, llm.dim);
    let base_path = layers * per_layer + 2 * t * dim * llm.vocab as u64;

    Ok(FlopReport {
        visual_tokens: n,
        text_len,
        fused_path,
        concat_path,
        visual_ratio,
        blocks,
        projection: projection_flops,
        fusion_overhead,
        base_path,
        overhead_fraction: fusion_overhead as f64 / base_path as f64,
    })
}

/// Everything the cost model needs for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountingPreset {
    pub fusion: FusionConfig,
    pub grid: PatchGrid,
    pub projection: Option<ProjectionShape>,
    pub llm: LlmShape,
}

impl AccountingPreset {
    /// 24x24 tokens of width 1024, three blocks with 4x FFNs, a two-layer
    /// projection into a 7B LLaMA-family decoder.
    pub fn full_scale() -> Self {
        Self {
            fusion: FusionConfig::with_width(1024),
            grid: PatchGrid { rows: 24, cols: 24 },
            projection: Some(ProjectionShape {
                dims: vec![1024, 4096, 4096],
                bias: true,
            }),
            llm: LlmShape::llama_7b(),
        }
    }

    pub fn params(&self) -> u64 {
        count_params(&self.fusion, self.projection.as_ref())
    }

    pub fn report(&self, text_len: usize) -> Result<FlopReport> {
        attention_flops(&self.fusion, self.grid, text_len, &self.llm, self.projection.as_ref())
    }
}
