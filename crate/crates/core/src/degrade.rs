//! RGB degradations (blur, darkness, fog) at four severities, and the
//! stochastic degradation-aware augmentation sampler.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gaussian blur radius per severity, clean through highest.
pub const BLUR_RADII: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
/// Brightness factor per severity.
pub const DARKNESS_FACTORS: [f64; 5] = [1.0, 0.45, 0.3, 0.2, 0.1];
/// Fog layer opacity per severity.
pub const FOG_ALPHAS: [f64; 5] = [0.0, 0.7, 0.85, 0.92, 0.97];

pub const DEFAULT_FOG_GRAY: f64 = 0.8;
/// Probability that a training RGB image is degraded.
pub const DEFAULT_AUGMENT_PROB: f64 = 0.25;

/// Row-major image with 1 or 3 interleaved channels, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        let mut img = Self {
            height,
            width,
            channels,
            pixels,
        };
        img.clamp();
        Ok(img)
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![v; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len().max(1) as f64
    }

    fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
    }

    /// Single-channel image replicated into three identical channels.
    pub fn to_rgb(&self) -> ImageBuf {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&p| [p, p, p]).collect();
        ImageBuf {
            channels: 3,
            pixels,
            ..*self
        }
    }

    /// 8-bit code values, `round(255 p)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Round-trip through 8-bit storage.
    pub fn quantize_u8(&self) -> ImageBuf {
        let pixels = self.pixels.iter().map(|&p| (p * 255.0).round() / 255.0).collect();
        ImageBuf { pixels, ..*self }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuf {
        let mut out = ImageBuf {
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
            ..*self
        };
        out.clamp();
        out
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian smoothing with `σ = radius`, half-width `⌈3σ⌉`, and
/// clamp-to-edge sampling. Radius 0 returns the input unchanged.
pub fn gaussian_blur(img: &ImageBuf, radius: f64) -> Result<ImageBuf> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur radius must be >= 0, got {radius}"
        )));
    }
    if radius == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(radius);
    let half = (k.len() / 2) as i64;
    let (h, w, ch) = (img.height as i64, img.width as i64, img.channels);
    let mut tmp = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = (x + t as i64 - half).clamp(0, w - 1);
                    acc += kv * img.pixels[((y * w + xx) as usize) * ch + c];
                }
                tmp[((y * w + x) as usize) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = (y + t as i64 - half).clamp(0, h - 1);
                    acc += kv * tmp[((yy * w + x) as usize) * ch + c];
                }
                out[((y * w + x) as usize) * ch + c] = acc;
            }
        }
    }
    let mut res = ImageBuf { pixels: out, ..*img };
    res.clamp();
    Ok(res)
}

/// Pixelwise brightness scaling, `factor ∈ [0, 1]`.
pub fn darken(img: &ImageBuf, factor: f64) -> Result<ImageBuf> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "darkness factor must lie in [0, 1], got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|p| p * factor))
}

/// Blend with a uniform gray layer: `(1 - α) p + α gray`.
pub fn fog(img: &ImageBuf, alpha: f64, gray: f64) -> Result<ImageBuf> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "fog intensity must lie in [0, 1], got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&gray) {
        return Err(Error::InvalidArgument(format!(
            "fog gray level must lie in [0, 1], got {gray}"
        )));
    }
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|p| (1.0 - alpha) * p + alpha * gray))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Blur,
    Darkness,
    Fog,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [Self::Blur, Self::Darkness, Self::Fog];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::Darkness => "darkness",
            Self::Fog => "fog",
        }
    }

    /// Transform parameter for a severity: blur radius, brightness factor or fog opacity.
    pub fn parameter(&self, severity: Severity) -> f64 {
        let table = match self {
            Self::Blur => &BLUR_RADII,
            Self::Darkness => &DARKNESS_FACTORS,
            Self::Fog => &FOG_ALPHAS,
        };
        table[severity.index()]
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(Self::Blur),
            "darkness" | "dark" => Ok(Self::Darkness),
            "fog" => Ok(Self::Fog),
            other => Err(Error::InvalidArgument(format!(
                "unknown degradation kind {other:?} (expected blur, darkness or fog)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Clean,
    Low,
    Moderate,
    High,
    Highest,
}

impl Severity {
    pub const ALL: [Severity; 5] = [Self::Clean, Self::Low, Self::Moderate, Self::High, Self::Highest];
    pub const DEGRADED: [Severity; 4] = [Self::Low, Self::Moderate, Self::High, Self::Highest];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Low => "low",
            Self::Moderate => "moderate",
            Self::High => "high",
            Self::Highest => "highest",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // names, or the index 0..=4
        Self::ALL
            .into_iter()
            .enumerate()
            .find(|(i, v)| v.as_str() == s || i.to_string() == s)
            .map(|(_, v)| v)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown severity {s:?} (expected clean, low, moderate, high, highest or 0-4)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: Severity,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: Severity) -> Self {
        Self { kind, severity }
    }

    pub fn parameter(&self) -> f64 {
        self.kind.parameter(self.severity)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind, self.severity)
    }
}

/// Applies a degradation with the default fog gray level.
pub fn apply(spec: DegradationSpec, img: &ImageBuf) -> Result<ImageBuf> {
    apply_with_gray(spec, img, DEFAULT_FOG_GRAY)
}

pub fn apply_with_gray(spec: DegradationSpec, img: &ImageBuf, fog_gray: f64) -> Result<ImageBuf> {
    let p = spec.parameter();
    match spec.kind {
        DegradationKind::Blur => gaussian_blur(img, p),
        DegradationKind::Darkness => darken(img, p),
        DegradationKind::Fog => fog(img, p, fog_gray),
    }
}

/// Draws whether (and how) to degrade one training image: with probability
/// `p_d`, a kind uniformly from the three and a severity uniformly from the
/// four non-clean levels.
pub fn sample_augmentation(rng: &mut Rng, p_d: f64) -> Option<DegradationSpec> {
    if !rng.bernoulli(p_d) {
        return None;
    }
    let kind = DegradationKind::ALL[rng.below(3)];
    let severity = Severity::DEGRADED[rng.below(4)];
    Some(DegradationSpec::new(kind, severity))
}

pub fn augment_sample(
    rng: &mut Rng,
    rgb: &ImageBuf,
    p_d: f64,
    fog_gray: f64,
) -> Result<(ImageBuf, Option<DegradationSpec>)> {
    match sample_augmentation(rng, p_d) {
        Some(spec) => Ok((apply_with_gray(spec, rgb, fog_gray)?, Some(spec))),
        None => Ok((rgb.clone(), None)),
    }
}
