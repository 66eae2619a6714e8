//! Frozen linear patch encoder shared by both modalities.

use crate::degrade::ImageBuf;
use crate::error::{shape_err, Result};
use crate::fusion::TokenGrid;
use crate::grid::PatchGrid;
use crate::ops::xavier_uniform;
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

/// Flattens each `patch x patch x 3` tile and maps it to `d` features with a
/// bias-free linear layer. Grayscale inputs are replicated to three channels.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub patch: usize,
    pub weight: Param,
}

impl PatchEncoder {
    /// Random weights, re-centered so each output feature sums to zero over
    /// the pixels of each channel: a flat patch encodes to the zero vector
    /// and tokens carry only intra-patch structure.
    pub fn new(rng: &mut Rng, patch: usize, d: usize) -> Self {
        let fan_in = patch * patch * 3;
        let mut w = xavier_uniform(rng, fan_in, d);
        for c in 0..3 {
            for j in 0..d {
                let mean = (0..patch * patch).map(|k| w.at(k * 3 + c, j)).sum::<f64>() / (patch * patch) as f64;
                for k in 0..patch * patch {
                    w.row_mut(k * 3 + c)[j] = 3.0 * (w.at(k * 3 + c, j) - mean);
                }
            }
        }
        Self {
            patch,
            weight: Param::frozen(w),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn encode(&self, img: &ImageBuf) -> Result<TokenGrid> {
        let grid = PatchGrid::from_image(img.height(), img.width(), self.patch)?;
        let rgb;
        let img = match img.channels() {
            3 => img,
            1 => {
                rgb = img.to_rgb();
                &rgb
            }
            c => return Err(shape_err("encode", format!("{c}-channel image"))),
        };
        let p = self.patch;
        let fan_in = p * p * 3;
        if self.weight.value.rows() != fan_in {
            return Err(shape_err(
                "encode",
                format!("patch vector of {fan_in} vs encoder input {}", self.weight.value.rows()),
            ));
        }
        let d = self.dim();
        let w = self.weight.value.data();
        let px = img.pixels();
        let width = img.width();
        let mut tokens = Tensor::zeros(&[grid.len(), d]);
        for u in 0..grid.len() {
            let (gr, gc) = grid.coord(u);
            let out = tokens.row_mut(u);
            let mut k = 0;
            for y in gr * p..(gr + 1) * p {
                let base = (y * width + gc * p) * 3;
                for &v in &px[base..base + p * 3] {
                    if v != 0.0 {
                        for (o, wv) in out.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                            *o += v * wv;
                        }
                    }
                    k += 1;
                }
            }
        }
        TokenGrid::new(grid, tokens)
    }
}

impl Parameterized for PatchEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
