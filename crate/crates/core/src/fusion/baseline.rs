//! Reference fusion strategies: token-wise addition, adaptive weighted
//! addition and interleaved concatenation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// `Z_rgb + Z_ir`
    Add,
    /// `s ⊙ Z_rgb + (1 - s) ⊙ Z_ir` with `s = sigmoid(w)`, one learnable `w` per token.
    Adaptive,
    /// `[rgb_0, ir_0, rgb_1, ir_1, ...]`, 2N tokens.
    Concat,
}

impl BaselineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Adaptive => "adaptive",
            Self::Concat => "concat",
        }
    }

    pub fn output_tokens(&self, n: usize) -> usize {
        match self {
            Self::Concat => 2 * n,
            _ => n,
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "adaptive" => Ok(Self::Adaptive),
            "concat" => Ok(Self::Concat),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode {other:?} (expected add, adaptive or concat)"
            ))),
        }
    }
}

fn check(z_rgb: &Tensor, z_ir: &Tensor) -> Result<()> {
    if z_rgb.shape() != z_ir.shape() {
        return Err(shape_err(
            "fuse_baseline",
            format!("rgb {:?} vs ir {:?}", z_rgb.shape(), z_ir.shape()),
        ));
    }
    Ok(())
}

/// `weights` holds the pre-sigmoid per-token scalars and is required for
/// [`BaselineMode::Adaptive`].
pub fn fuse_baseline(z_rgb: &Tensor, z_ir: &Tensor, mode: BaselineMode, weights: Option<&Tensor>) -> Result<Tensor> {
    check(z_rgb, z_ir)?;
    let (n, d) = (z_rgb.rows(), z_rgb.cols());
    match mode {
        BaselineMode::Add => Ok(z_rgb.add(z_ir)),
        BaselineMode::Adaptive => {
            let w = adaptive_weights(weights, n)?;
            Ok(Tensor::from_fn(n, d, |u, j| {
                let s = sigmoid(w[u]);
                s * z_rgb.at(u, j) + (1.0 - s) * z_ir.at(u, j)
            }))
        }
        BaselineMode::Concat => {
            let mut out = Tensor::zeros(&[2 * n, d]);
            for u in 0..n {
                out.row_mut(2 * u).copy_from_slice(z_rgb.row(u));
                out.row_mut(2 * u + 1).copy_from_slice(z_ir.row(u));
            }
            Ok(out)
        }
    }
}

fn adaptive_weights(weights: Option<&Tensor>, n: usize) -> Result<&[f64]> {
    let w = weights.ok_or_else(|| Error::InvalidArgument("adaptive fusion needs token weights".into()))?;
    if w.len() != n {
        return Err(shape_err(
            "fuse_baseline",
            format!("{} weights for {n} tokens", w.len()),
        ));
    }
    Ok(w.data())
}

/// Returns `(d z_rgb, d z_ir, d weights)`; the weight gradient is present
/// only for the adaptive mode.
pub fn fuse_baseline_backward(
    z_rgb: &Tensor,
    z_ir: &Tensor,
    mode: BaselineMode,
    weights: Option<&Tensor>,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    check(z_rgb, z_ir)?;
    let (n, d) = (z_rgb.rows(), z_rgb.cols());
    match mode {
        BaselineMode::Add => Ok((d_out.clone(), d_out.clone(), None)),
        BaselineMode::Adaptive => {
            let w = adaptive_weights(weights, n)?;
            let mut d_rgb = Tensor::zeros(&[n, d]);
            let mut d_ir = Tensor::zeros(&[n, d]);
            let mut d_w = Tensor::zeros(&[n]);
            for u in 0..n {
                let s = sigmoid(w[u]);
                let mut acc = 0.0;
                for j in 0..d {
                    let g = d_out.at(u, j);
                    d_rgb.row_mut(u)[j] = s * g;
                    d_ir.row_mut(u)[j] = (1.0 - s) * g;
                    acc += g * (z_rgb.at(u, j) - z_ir.at(u, j));
                }
                d_w.data_mut()[u] = acc * s * (1.0 - s);
            }
            Ok((d_rgb, d_ir, Some(d_w)))
        }
        BaselineMode::Concat => {
            let mut d_rgb = Tensor::zeros(&[n, d]);
            let mut d_ir = Tensor::zeros(&[n, d]);
            for u in 0..n {
                d_rgb.row_mut(u).copy_from_slice(d_out.row(2 * u));
                d_ir.row_mut(u).copy_from_slice(d_out.row(2 * u + 1));
            }
            Ok((d_rgb, d_ir, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};
    use crate::ops::dot;
    use crate::rng::Rng;

    fn rand_t(rng: &mut Rng, m: usize, n: usize) -> Tensor {
        Tensor::from_fn(m, n, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn add_with_zero_ir_is_rgb() {
        let mut rng = Rng::new(1);
        let rgb = rand_t(&mut rng, 4, 3);
        let out = fuse_baseline(&rgb, &Tensor::zeros(&[4, 3]), BaselineMode::Add, None).unwrap();
        assert_eq!(out, rgb);
    }

    #[test]
    fn adaptive_zero_weights_average() {
        let mut rng = Rng::new(2);
        let rgb = rand_t(&mut rng, 4, 3);
        let ir = rand_t(&mut rng, 4, 3);
        let out = fuse_baseline(&rgb, &ir, BaselineMode::Adaptive, Some(&Tensor::zeros(&[4]))).unwrap();
        for (o, (a, b)) in out.data().iter().zip(rgb.data().iter().zip(ir.data())) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_interleaves() {
        let rgb = Tensor::filled(&[3, 2], 1.0);
        let ir = Tensor::filled(&[3, 2], -1.0);
        let out = fuse_baseline(&rgb, &ir, BaselineMode::Concat, None).unwrap();
        assert_eq!(out.rows(), 6);
        assert_eq!(out.row(0), &[1.0, 1.0]);
        assert_eq!(out.row(1), &[-1.0, -1.0]);
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("sum".parse::<BaselineMode>().is_err());
        assert_eq!("concat".parse::<BaselineMode>().unwrap(), BaselineMode::Concat);
    }

    #[test]
    fn adaptive_gradient() {
        let mut rng = Rng::new(3);
        let rgb = rand_t(&mut rng, 4, 3);
        let ir = rand_t(&mut rng, 4, 3);
        let w = rand_t(&mut rng, 1, 4).reshape(&[4]).unwrap();
        let g = rand_t(&mut rng, 4, 3);
        let (_, _, dw) = fuse_baseline_backward(&rgb, &ir, BaselineMode::Adaptive, Some(&w), &g).unwrap();
        let num = central_difference(w.data(), 1e-5, |v| {
            let w = Tensor::from_vec(&[4], v.to_vec()).unwrap();
            dot(
                fuse_baseline(&rgb, &ir, BaselineMode::Adaptive, Some(&w))
                    .unwrap()
                    .data(),
                g.data(),
            )
        });
        assert!(rel_error(dw.unwrap().data(), &num) < 1e-7);
    }
}
