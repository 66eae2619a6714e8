//! Multi-scale localized cross-attention fusion, baseline fusion strategies,
//! and parameter / FLOP accounting.

mod accounting;
mod baseline;
mod block;

pub use accounting::{
    attention_flops, count_params, dense_xattn_flops, AccountingPreset, FlopReport, LlmShape, ProjectionShape,
};
pub use baseline::{fuse_baseline, fuse_baseline_backward, BaselineMode};
pub use block::{local_xattn, AttnCache, BlockCache, LocalXAttnBlock};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{NeighborhoodTable, PatchGrid};
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

/// A token matrix together with the patch grid it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid: PatchGrid,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(grid: PatchGrid, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != grid.len() {
            return Err(shape_err(
                "token_grid",
                format!("{:?} tokens for a {}x{} grid", tokens.shape(), grid.rows, grid.cols),
            ));
        }
        Ok(Self { grid, tokens })
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub radii: Vec<f64>,
    pub ffn_mult: usize,
    /// Zero `W_O` and FFN output layers so the untrained stack is the identity.
    pub identity_init: bool,
}

impl FusionConfig {
    /// Three blocks with radii 1, 2, 3 and square projections.
    pub fn with_width(d: usize) -> Self {
        Self {
            d,
            d_k: d,
            d_v: d,
            radii: vec![1.0, 2.0, 3.0],
            ffn_mult: 4,
            identity_init: true,
        }
    }

    pub fn layers(&self) -> usize {
        self.radii.len()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_k == 0 || self.d_v == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidArgument(format!(
                "fusion widths must be positive (d={}, d_k={}, d_v={}, ffn_mult={})",
                self.d, self.d_k, self.d_v, self.ffn_mult
            )));
        }
        if let Some(r) = self.radii.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid radius {r}")));
        }
        if self.radii.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(format!(
                "radii must be non-decreasing, got {:?}",
                self.radii
            )));
        }
        Ok(())
    }
}

/// `L` sequential blocks; every block reads keys and values from the raw IR
/// tokens, never from a transformed IR stream.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub blocks: Vec<LocalXAttnBlock>,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
}

impl FusionStack {
    pub fn new(config: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .radii
            .iter()
            .map(|&r| {
                let (d, dk, dv, h) = (config.d, config.d_k, config.d_v, config.ffn_hidden());
                if config.identity_init {
                    LocalXAttnBlock::identity_init(rng, d, dk, dv, h, r)
                } else {
                    LocalXAttnBlock::random(rng, d, dk, dv, h, r)
                }
            })
            .collect();
        Ok(Self { blocks })
    }

    pub fn radii(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.radius).collect()
    }

    /// One neighborhood table per block.
    pub fn tables(&self, query: PatchGrid, key: PatchGrid) -> Result<Vec<NeighborhoodTable>> {
        self.blocks
            .iter()
            .map(|b| NeighborhoodTable::build(query, key, b.radius))
            .collect()
    }

    pub fn forward(&self, z_rgb: &Tensor, z_ir: &Tensor, tables: &[NeighborhoodTable]) -> Result<(Tensor, StackCache)> {
        if tables.len() != self.blocks.len() {
            return Err(shape_err(
                "stack_forward",
                format!("{} tables for {} blocks", tables.len(), self.blocks.len()),
            ));
        }
        let mut z = z_rgb.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, table) in self.blocks.iter().zip(tables) {
            let (next, cache) = block.forward(&z, z_ir, table)?;
            caches.push(cache);
            z = next;
        }
        Ok((z, StackCache { blocks: caches }))
    }

    /// Returns `(d z_rgb, d z_ir)`; the IR gradient sums over all blocks.
    pub fn backward(&mut self, cache: &StackCache, d_fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut d_z = d_fused.clone();
        let mut d_ir: Option<Tensor> = None;
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let (dz, dir) = block.backward(c, &d_z)?;
            d_z = dz;
            match &mut d_ir {
                Some(acc) => acc.add_assign(&dir),
                None => d_ir = Some(dir),
            }
        }
        let d_ir = d_ir.unwrap_or_else(|| Tensor::zeros(&[0, d_fused.cols().max(1)]));
        Ok((d_z, d_ir))
    }
}

/// Sequential application of the stack; `L = 0` returns `Z_rgb` unchanged.
pub fn stack_forward(
    z_rgb: &TokenGrid,
    z_ir: &TokenGrid,
    stack: &FusionStack,
    tables: &[NeighborhoodTable],
) -> Result<Tensor> {
    Ok(stack.forward(&z_rgb.tokens, &z_ir.tokens, tables)?.0)
}

impl Parameterized for FusionStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}
