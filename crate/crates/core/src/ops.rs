//! Differentiable dense-math primitives with hand-written backward passes.
//!
//! Each layer exposes `forward`, which returns the output together with the
//! activations its backward pass needs, and `backward`, which accumulates
//! parameter gradients in place (trainable parameters only) and returns the
//! gradient with respect to the layer input.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{join, Param, Parameterized, Tensor};

/// LayerNorm epsilon used throughout the crate.
pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

/// `out[m x n] += a[m x k] * b[k x n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inner(op: &'static str, a: &Tensor, b: &Tensor, ka: usize, kb: usize) -> Result<()> {
    if ka != kb {
        return Err(shape_err(
            op,
            format!("{:?} x {:?}: inner extents {ka} != {kb}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `A * B` for `A: m x k`, `B: k x n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    check_inner("matmul", a, b, k, kb)?;
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `A^T * B` for `A: k x m`, `B: k x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    check_inner("matmul_tn", a, b, k, kb)?;
    let mut out = Tensor::zeros(&[m, n]);
    gemm_tn(a.data(), b.data(), out.data_mut(), k, m, n);
    Ok(out)
}

/// `A * B^T` for `A: m x k`, `B: n x k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    check_inner("matmul_nt", a, b, k, kb)?;
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Gradients of `C = A * B`: returns `(dC * B^T, A^T * dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// `acc += A^T * B` without allocating.
pub(crate) fn accumulate_tn(acc: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(acc.len(), m * n);
    gemm_tn(a.data(), b.data(), acc.data_mut(), k, m, n);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// In-place stable softmax of a single row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for i in 0..y.rows() {
        softmax_in_place(y.row_mut(i));
    }
    y
}

/// Given `y = softmax(x)` row-wise and `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        softmax_row_backward(y.row(i), dy.row(i), dx.row_mut(i));
    }
    dx
}

pub(crate) fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s = dot(y, dy);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - s);
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Uniform Xavier/Glorot: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-limit, limit))
}

pub fn normal_tensor(rng: &mut Rng, m: usize, n: usize, std: f64) -> Tensor {
    Tensor::from_fn(m, n, |_, _| std * rng.normal())
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y = x W (+ b)` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        let w = xavier_uniform(rng, fan_in, fan_out);
        Self::new(w, with_bias.then(|| Tensor::zeros(&[fan_out])))
    }

    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self::new(
            Tensor::zeros(&[fan_in, fan_out]),
            with_bias.then(|| Tensor::zeros(&[fan_out])),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn freeze(&mut self) {
        self.weight.trainable = false;
        if let Some(b) = &mut self.bias {
            b.trainable = false;
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight.value)?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (v, bv) in y.row_mut(i).iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        if self.weight.trainable {
            accumulate_tn(&mut self.weight.grad, x, dy);
        }
        if let Some(b) = &mut self.bias {
            if b.trainable {
                let g = b.grad.data_mut();
                for i in 0..dy.rows() {
                    for (gv, d) in g.iter_mut().zip(dy.row(i)) {
                        *gv += d;
                    }
                }
            }
        }
        matmul_nt(dy, &self.weight.value)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Param::new(Tensor::filled(&[d], 1.0)),
            bias: Param::new(Tensor::zeros(&[d])),
            eps: LN_EPS,
        }
    }

    pub fn freeze(&mut self) {
        self.gain.trainable = false;
        self.bias.trainable = false;
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = x.cols();
        if d != self.gain.numel() {
            return Err(shape_err(
                "layer_norm",
                format!("input width {d} vs gain {}", self.gain.numel()),
            ));
        }
        let mut xhat = x.clone();
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(x.rows());
        let (g, b) = (self.gain.value.data(), self.bias.value.data());
        for i in 0..x.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
            let xr = xhat.row(i);
            for (j, out) in y.row_mut(i).iter_mut().enumerate() {
                *out = xr[j] * g[j] + b[j];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let d = dy.cols();
        let mut dx = Tensor::zeros(dy.shape());
        let g = self.gain.value.data().to_vec();
        let mut dxhat = vec![0.0; d];
        for i in 0..dy.rows() {
            let xr = cache.xhat.row(i);
            let dr = dy.row(i);
            if self.gain.trainable {
                for (gg, (x, dv)) in self.gain.grad.data_mut().iter_mut().zip(xr.iter().zip(dr)) {
                    *gg += x * dv;
                }
            }
            if self.bias.trainable {
                for (bg, dv) in self.bias.grad.data_mut().iter_mut().zip(dr) {
                    *bg += dv;
                }
            }
            for j in 0..d {
                dxhat[j] = dr[j] * g[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xr) / d as f64;
            let is = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = is * (dxhat[j] - mean_d - xr[j] * mean_dx);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// feed-forward
// ---------------------------------------------------------------------------

/// Two-layer MLP `d -> h -> d` with GELU in between and biases on both layers.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Ffn {
    pub fn new(rng: &mut Rng, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::xavier(rng, d, hidden, true),
            down: Linear::xavier(rng, hidden, d, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let pre = self.up.forward(x)?;
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let y = self.down.forward(&act)?;
        Ok((y, FfnCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&mut self, cache: &FfnCache, dy: &Tensor) -> Result<Tensor> {
        let mut dact = self.down.backward(&cache.act, dy)?;
        for (d, p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(*p);
        }
        self.up.backward(&cache.x, &dact)
    }
}

impl Parameterized for Ffn {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit_params(&join(prefix, "up"), f);
        self.down.visit_params(&join(prefix, "down"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_params_mut(&join(prefix, "up"), f);
        self.down.visit_params_mut(&join(prefix, "down"), f);
    }
}

// ---------------------------------------------------------------------------
// low-rank adapted linear
// ---------------------------------------------------------------------------

/// `y = x W + scale * (x A) B` with a frozen `W` and trainable `A`, `B`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Param,
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    x: Tensor,
    xa: Tensor,
}

impl LoraLinear {
    pub fn new(base: Tensor, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (d_in, d_out) = (base.rows(), base.cols());
        let rank = a.cols();
        if rank > d_in.min(d_out) {
            return Err(Error::InvalidArgument(format!(
                "adapter rank {rank} exceeds min({d_in}, {d_out})"
            )));
        }
        if a.rows() != d_in || b.rows() != rank || b.cols() != d_out {
            return Err(shape_err(
                "lora_linear",
                format!(
                    "W {:?}, A {:?}, B {:?} are inconsistent",
                    base.shape(),
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        Ok(Self {
            base: Param::frozen(base),
            a: Param::new(a),
            b: Param::new(b),
            scale,
        })
    }

    /// Standard adapter init: `A` Xavier, `B` zero, so the adapter starts as a no-op.
    pub fn init(rng: &mut Rng, base: Tensor, rank: usize, scale: f64) -> Result<Self> {
        let d_in = base.rows();
        let a = xavier_uniform(rng, d_in, rank);
        let b = Tensor::zeros(&[rank, base.cols()]);
        Self::new(base, a, b, scale)
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LoraCache)> {
        let mut y = matmul(x, &self.base.value)?;
        let xa = matmul(x, &self.a.value)?;
        if self.scale != 0.0 {
            let mut delta = matmul(&xa, &self.b.value)?;
            delta.scale(self.scale);
            y.add_assign(&delta);
        }
        Ok((y, LoraCache { x: x.clone(), xa }))
    }

    pub fn backward(&mut self, cache: &LoraCache, dy: &Tensor) -> Result<Tensor> {
        let mut dx = matmul_nt(dy, &self.base.value)?;
        if self.base.trainable {
            accumulate_tn(&mut self.base.grad, &cache.x, dy);
        }
        if self.scale != 0.0 {
            let mut dy_s = dy.clone();
            dy_s.scale(self.scale);
            if self.b.trainable {
                accumulate_tn(&mut self.b.grad, &cache.xa, &dy_s);
            }
            let dxa = matmul_nt(&dy_s, &self.b.value)?;
            if self.a.trainable {
                accumulate_tn(&mut self.a.grad, &cache.x, &dxa);
            }
            dx.add_assign(&matmul_nt(&dxa, &self.a.value)?);
        }
        Ok(dx)
    }
}

impl Parameterized for LoraLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "base"), &self.base);
        f(&join(prefix, "lora_a"), &self.a);
        f(&join(prefix, "lora_b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "base"), &mut self.base);
        f(&join(prefix, "lora_a"), &mut self.a);
        f(&join(prefix, "lora_b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean next-token cross entropy over unmasked positions.
///
/// Returns the loss and `dL/dlogits`. Masked rows get zero gradient and do
/// not count toward the mean. With no unmasked rows the loss is 0.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(f64, Tensor)> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || mask.len() != t {
        return Err(shape_err(
            "cross_entropy",
            format!("{t} logit rows, {} targets, {} mask", targets.len(), mask.len()),
        ));
    }
    if let Some(&id) = targets
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t)
        .find(|&&id| id >= v)
    {
        return Err(Error::TokenOutOfRange { id, vocab: v });
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor::zeros(&[t, v]);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss -= row[targets[i]] - lse;
        let g = grad.row_mut(i);
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - lse).exp() * inv;
        }
        g[targets[i]] -= inv;
    }
    Ok((loss * inv, grad))
}
