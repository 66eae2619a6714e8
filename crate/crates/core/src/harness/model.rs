//! The desk-scale model: frozen encoder, fusion, trainable projection and an
//! adapter-tuned decoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::degrade::ImageBuf;
use crate::error::{Error, Result};
use crate::fusion::{fuse_baseline, fuse_baseline_backward, BaselineMode, FusionConfig, FusionStack, StackCache};
use crate::grid::{NeighborhoodTable, PatchGrid};
use crate::ops::{cross_entropy, Linear};
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

use super::decoder::{Decoder, DecoderCache};
use super::encoder::PatchEncoder;
use super::vocab::{Vocab, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Multi-scale localized cross-attention.
    Dualvision,
    Add,
    Adaptive,
    Concat,
    RgbOnly,
    IrOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        Self::Dualvision,
        Self::Add,
        Self::Adaptive,
        Self::Concat,
        Self::RgbOnly,
        Self::IrOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Dualvision => "dualvision",
            Self::Add => "add",
            Self::Adaptive => "adaptive",
            Self::Concat => "concat",
            Self::RgbOnly => "rgb_only",
            Self::IrOnly => "ir_only",
        }
    }

    /// Number of visual tokens handed to the decoder for an `n`-token grid.
    pub fn visual_tokens(&self, n: usize) -> usize {
        match self {
            Self::Concat => 2 * n,
            _ => n,
        }
    }

    fn baseline(&self) -> Option<BaselineMode> {
        match self {
            Self::Add => Some(BaselineMode::Add),
            Self::Adaptive => Some(BaselineMode::Adaptive),
            Self::Concat => Some(BaselineMode::Concat),
            _ => None,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown fusion mode {s:?} (expected dualvision, add, adaptive, concat, rgb_only or ir_only)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub image_size: usize,
    pub patch: usize,
    /// Encoder / fusion width.
    pub d: usize,
    /// Decoder width.
    pub d_dec: usize,
    pub heads: usize,
    pub radii: Vec<f64>,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Text positions reserved after the visual prefix.
    pub max_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Dualvision,
            image_size: 48,
            patch: 8,
            d: 32,
            d_dec: 32,
            heads: 4,
            radii: vec![1.0, 2.0, 3.0],
            ffn_mult: 4,
            lora_rank: 8,
            lora_scale: 2.0,
            max_text: 16,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::from_image(self.image_size, self.image_size, self.patch)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            radii: self.radii.clone(),
            ffn_mult: self.ffn_mult,
            ..FusionConfig::with_width(self.d)
        }
    }
}

/// Cached encoder output for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub rgb: Tensor,
    pub ir: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub grid: PatchGrid,
    pub encoder: PatchEncoder,
    pub fusion: Option<FusionStack>,
    /// Pre-sigmoid per-token weights for the adaptive baseline.
    pub adaptive: Option<Param>,
    pub proj: Linear,
    pub decoder: Decoder,
    tables: Vec<NeighborhoodTable>,
}

enum FuseCache {
    Stack(StackCache),
    Baseline,
    Passthrough,
}

pub struct ForwardCache {
    z: Encoded,
    fused: Tensor,
    fuse: FuseCache,
    decoder: DecoderCache,
}

impl ToyModel {
    /// Every component draws from its own seed-derived stream, so models that
    /// differ only in fusion mode share encoder, projection and decoder
    /// weights bit for bit.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.grid()?;
        let encoder = PatchEncoder::new(&mut Rng::derive(seed, "encoder"), config.patch, config.d);
        let fusion = match config.mode {
            FusionMode::Dualvision => Some(FusionStack::new(&config.fusion(), &mut Rng::derive(seed, "fusion"))?),
            _ => None,
        };
        let tables = match &fusion {
            Some(stack) => stack.tables(grid, grid)?,
            None => Vec::new(),
        };
        let adaptive = (config.mode == FusionMode::Adaptive).then(|| Param::new(Tensor::zeros(&[grid.len()])));
        let proj = Linear::xavier(&mut Rng::derive(seed, "proj"), config.d, config.d_dec, true);
        let max_len = 2 * grid.len() + config.max_text;
        let decoder = Decoder::new(
            &mut Rng::derive(seed, "decoder"),
            Vocab.size(),
            config.d_dec,
            config.heads,
            max_len,
            config.lora_rank,
            config.lora_scale,
        )?;
        Ok(Self {
            config,
            grid,
            encoder,
            fusion,
            adaptive,
            proj,
            decoder,
            tables,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    pub fn encode_pair(&self, rgb: &ImageBuf, ir: &ImageBuf) -> Result<Encoded> {
        Ok(Encoded {
            rgb: self.encode_rgb(rgb)?,
            ir: self.encode_ir(ir)?,
        })
    }

    pub fn encode_rgb(&self, rgb: &ImageBuf) -> Result<Tensor> {
        if rgb.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "RGB input must have 3 channels, got {}",
                rgb.channels()
            )));
        }
        self.encode_checked(rgb)
    }

    pub fn encode_ir(&self, ir: &ImageBuf) -> Result<Tensor> {
        self.encode_checked(ir)
    }

    fn encode_checked(&self, img: &ImageBuf) -> Result<Tensor> {
        let t = self.encoder.encode(img)?;
        if t.grid != self.grid {
            return Err(crate::error::shape_err(
                "encode",
                format!(
                    "{}x{} image does not match the configured {}x{} input",
                    img.height(),
                    img.width(),
                    self.config.image_size,
                    self.config.image_size
                ),
            ));
        }
        Ok(t.tokens)
    }

    fn fuse(&self, z: &Encoded) -> Result<(Tensor, FuseCache)> {
        match self.config.mode {
            FusionMode::Dualvision => {
                let stack = self.fusion.as_ref().expect("dualvision model owns a stack");
                let (f, c) = stack.forward(&z.rgb, &z.ir, &self.tables)?;
                Ok((f, FuseCache::Stack(c)))
            }
            FusionMode::RgbOnly => Ok((z.rgb.clone(), FuseCache::Passthrough)),
            FusionMode::IrOnly => Ok((z.ir.clone(), FuseCache::Passthrough)),
            m => {
                let mode = m.baseline().expect("baseline mode");
                let w = self.adaptive.as_ref().map(|p| &p.value);
                Ok((fuse_baseline(&z.rgb, &z.ir, mode, w)?, FuseCache::Baseline))
            }
        }
    }

    /// Projected visual prefix fed to the decoder.
    pub fn visual_prefix(&self, z: &Encoded) -> Result<Tensor> {
        let (fused, _) = self.fuse(z)?;
        self.proj.forward(&fused)
    }

    /// Teacher-forced logits: one row per element of `targets`, where row `i`
    /// predicts `targets[i]` from the question and `targets[..i]`.
    pub fn forward_answer(&self, z: &Encoded, question: &[usize], targets: &[usize]) -> Result<(Tensor, ForwardCache)> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("empty answer".into()));
        }
        let (fused, fuse) = self.fuse(z)?;
        let prefix = self.proj.forward(&fused)?;
        let tokens = text_tokens(question, &targets[..targets.len() - 1]);
        let (logits, decoder) = self.decoder.forward(&prefix, &tokens, targets.len())?;
        Ok((
            logits,
            ForwardCache {
                z: z.clone(),
                fused,
                fuse,
                decoder,
            },
        ))
    }

    /// Masked next-token loss over `targets`; returns the loss and the cache
    /// plus logit gradient needed by [`backward`](Self::backward).
    pub fn loss(
        &self,
        z: &Encoded,
        question: &[usize],
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(f64, ForwardCache, Tensor)> {
        let (logits, cache) = self.forward_answer(z, question, targets)?;
        let (loss, grad) = cross_entropy(&logits, targets, mask)?;
        Ok((loss, cache, grad))
    }

    /// Accumulates gradients of every trainable parameter.
    pub fn backward(&mut self, cache: &ForwardCache, d_logits: &Tensor) -> Result<()> {
        let d_prefix = self.decoder.backward(&cache.decoder, d_logits)?;
        let d_fused = self.proj.backward(&cache.fused, &d_prefix)?;
        match &cache.fuse {
            FuseCache::Stack(c) => {
                let stack = self.fusion.as_mut().expect("dualvision model owns a stack");
                stack.backward(c, &d_fused)?;
            }
            FuseCache::Baseline => {
                let mode = self.config.mode.baseline().expect("baseline mode");
                let w = self.adaptive.as_ref().map(|p| p.value.clone());
                let (_, _, d_w) = fuse_baseline_backward(&cache.z.rgb, &cache.z.ir, mode, w.as_ref(), &d_fused)?;
                if let (Some(p), Some(g)) = (self.adaptive.as_mut(), d_w) {
                    if p.trainable {
                        p.grad.add_assign(&g);
                    }
                }
            }
            FuseCache::Passthrough => {}
        }
        Ok(())
    }

    /// Greedy decoding of up to `max_len` tokens, stopping after EOS.
    pub fn generate(&self, z: &Encoded, question: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let (fused, _) = self.fuse(z)?;
        let prefix = self.proj.forward(&fused)?;
        let mut answer = Vec::with_capacity(max_len);
        while answer.len() < max_len {
            let tokens = text_tokens(question, &answer);
            let (logits, _) = self.decoder.forward(&prefix, &tokens, 1)?;
            let next = argmax(logits.row(0));
            answer.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(answer)
    }
}

fn text_tokens(question: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(question.len() + answer.len() + 1);
    t.push(BOS);
    t.extend_from_slice(question);
    t.extend_from_slice(answer);
    t
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Parameterized for ToyModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        if let Some(s) = &self.fusion {
            s.visit_params(&join(prefix, "fusion"), f);
        }
        if let Some(p) = &self.adaptive {
            f(&join(prefix, "fusion.adaptive"), p);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        if let Some(s) = &mut self.fusion {
            s.visit_params_mut(&join(prefix, "fusion"), f);
        }
        if let Some(p) = &mut self.adaptive {
            f(&join(prefix, "fusion.adaptive"), p);
        }
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}
