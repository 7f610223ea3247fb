//! Fixed-length templates, 8-bit min-max compression, and similarity scoring.
//!
//! A [`Template`] is a unit-length 192-d embedding. [`CompressedTemplate`]
//! stores one byte per feature plus the min and max needed to invert the
//! quantization, 200 bytes in total. Scores can be computed on decompressed
//! floats ([`cosine_score`]) or directly on the integer codes
//! ([`integer_score`]), which only needs integer sums of codes and products
//! of codes plus a handful of scalar multiply-adds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::error::{Error, Result};

/// Template dimensionality.
pub const DIM: usize = 192;

/// Serialized size of a [`CompressedTemplate`].
pub const COMPRESSED_LEN: usize = DIM + 8;

const UNIT_TOLERANCE: f64 = 1e-6;

/// A unit-length fixed-length fingerprint representation.
#[derive(Clone, PartialEq)]
pub struct Template {
    features: Vec<f32>,
}

impl Template {
    /// Wraps an already normalized feature vector.
    pub fn new(features: Vec<f32>) -> Result<Self> {
        check_features(&features)?;
        let norm = l2_norm(&features);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!(
                "template norm {norm} is not 1 within {UNIT_TOLERANCE}"
            )));
        }
        Ok(Self { features })
    }

    /// Normalizes `features` to unit length.
    pub fn from_unnormalized(features: Vec<f32>) -> Result<Self> {
        check_features(&features)?;
        let norm = l2_norm(&features);
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize the zero vector"));
        }
        let features = features
            .iter()
            .map(|&x| (f64::from(x) / norm) as f32)
            .collect();
        Ok(Self { features })
    }

    /// Normalizes an f64 vector; used by generators and decompression.
    pub(crate) fn normalize_f64(raw: &[f64]) -> Option<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self {
            features: raw.iter().map(|&x| (x / norm) as f32).collect(),
        })
    }

    #[cfg(test)]
    pub(crate) fn from_raw_for_tests(features: Vec<f32>) -> Self {
        Self { features }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.features
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.features
    }

    pub fn compress(&self) -> CompressedTemplate {
        // Features are finite by construction.
        quantize(&self.features)
    }

    /// Parses whitespace-separated decimal features and normalizes them.
    pub fn parse_text(text: &str) -> Result<Self> {
        let features = text
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<f32>()
                    .map_err(|e| Error::invalid(format!("feature {i} ({tok:?}): {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_unnormalized(features)
    }

    pub fn to_text(&self) -> String {
        let mut out = self
            .features
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push('\n');
        out
    }
}

impl fmt::Debug for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Template({:?}, ..)", &self.features[..4])
    }
}

fn check_features(features: &[f32]) -> Result<()> {
    if features.len() != DIM {
        return Err(Error::invalid(format!(
            "expected {DIM} features, got {}",
            features.len()
        )));
    }
    if let Some(i) = features.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("feature {i} is not finite")));
    }
    Ok(())
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// What a [`MatchScore`] measures; decides which direction is "better".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Cosine,
    PqDistance,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub value: f64,
    pub kind: ScoreKind,
}

impl MatchScore {
    pub fn cosine(value: f64) -> Self {
        Self {
            value: value.clamp(-1.0, 1.0),
            kind: ScoreKind::Cosine,
        }
    }

    pub fn pq_distance(value: f64) -> Self {
        Self {
            value,
            kind: ScoreKind::PqDistance,
        }
    }

    pub fn fused(value: f64) -> Self {
        Self {
            value,
            kind: ScoreKind::Fused,
        }
    }

    /// Orientation-free similarity: larger is always better.
    pub fn similarity(&self) -> f64 {
        match self.kind {
            ScoreKind::PqDistance => -self.value,
            _ => self.value,
        }
    }
}

/// A template quantized to one byte per feature.
#[derive(Clone, PartialEq)]
pub struct CompressedTemplate {
    codes: [u8; DIM],
    lo: f32,
    hi: f32,
}

impl CompressedTemplate {
    pub fn new(codes: [u8; DIM], lo: f32, hi: f32) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("decompression scalars must be finite"));
        }
        if lo > hi {
            return Err(Error::invalid(format!("lo {lo} exceeds hi {hi}")));
        }
        Ok(Self { codes, lo, hi })
    }

    pub fn codes(&self) -> &[u8; DIM] {
        &self.codes
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    /// Width of one quantization step.
    pub fn step(&self) -> f64 {
        (f64::from(self.hi) - f64::from(self.lo)) / 255.0
    }

    /// Inverts the min-max mapping without renormalizing.
    pub fn dequantize(&self) -> Vec<f64> {
        let lo = f64::from(self.lo);
        let step = self.step();
        self.codes
            .iter()
            .map(|&c| lo + f64::from(c) * step)
            .collect()
    }

    /// Dequantizes and renormalizes to unit length.
    ///
    /// A record with `lo == hi == 0` has no direction; it decompresses to the
    /// zero vector, which scores 0 against every template.
    pub fn decompress(&self) -> Template {
        Template::normalize_f64(&self.dequantize()).unwrap_or_else(|| Template {
            features: vec![0.0; DIM],
        })
    }

    pub fn to_bytes(&self) -> [u8; COMPRESSED_LEN] {
        let mut out = [0u8; COMPRESSED_LEN];
        out[..DIM].copy_from_slice(&self.codes);
        out[DIM..DIM + 4].copy_from_slice(&self.lo.to_le_bytes());
        out[DIM + 4..].copy_from_slice(&self.hi.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = Self::read(&mut r)?;
        r.expect_end()?;
        Ok(t)
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let start = r.offset();
        let codes = r.array::<DIM>("template codes")?;
        let lo = r.f32("template lo")?;
        let hi = r.f32("template hi")?;
        Self::new(codes, lo, hi).map_err(|e| Error::parse(start, e.to_string()))
    }

    /// Integer sums that [`integer_score`] needs from one side.
    fn code_sums(&self) -> (u32, u32) {
        self.codes.iter().fold((0u32, 0u32), |(s, sq), &c| {
            let c = u32::from(c);
            (s + c, sq + c * c)
        })
    }
}

impl fmt::Debug for CompressedTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompressedTemplate")
            .field("codes", &&self.codes[..8])
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .finish()
    }
}

/// Min-max quantizes a raw feature vector (not necessarily unit length).
pub fn compress(features: &[f32]) -> Result<CompressedTemplate> {
    check_features(features)?;
    Ok(quantize(features))
}

fn quantize(features: &[f32]) -> CompressedTemplate {
    let lo = features.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = features.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut codes = [0u8; DIM];
    if hi > lo {
        let (lo64, range) = (f64::from(lo), f64::from(hi) - f64::from(lo));
        for (code, &x) in codes.iter_mut().zip(features) {
            let q = (255.0 * (f64::from(x) - lo64) / range).floor();
            *code = q.clamp(0.0, 255.0) as u8;
        }
    }
    CompressedTemplate { codes, lo, hi }
}

/// Cosine similarity of two unit templates: a plain dot product.
pub fn cosine_score(p: &Template, g: &Template) -> MatchScore {
    MatchScore::cosine(dot_f64(&p.features, &g.features))
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Scores two compressed templates without decompressing them.
///
/// With `x_i = lo + c_i * s` the decompressed dot product expands to
/// `d*lo_p*lo_g + lo_p*s_g*Σc_g + lo_g*s_p*Σc_p + s_p*s_g*Σc_p*c_g`, and each
/// squared norm expands the same way. The only per-feature work is integer
/// multiply-accumulate over the codes.
pub fn integer_score(p: &CompressedTemplate, g: &CompressedTemplate) -> MatchScore {
    let cross: u32 = p
        .codes
        .iter()
        .zip(&g.codes)
        .map(|(&a, &b)| u32::from(a) * u32::from(b))
        .sum();
    let (sum_p, sq_p) = p.code_sums();
    let (sum_g, sq_g) = g.code_sums();

    let d = DIM as f64;
    let (lo_p, step_p) = (f64::from(p.lo), p.step());
    let (lo_g, step_g) = (f64::from(g.lo), g.step());

    let dot = d * lo_p * lo_g
        + lo_p * step_g * f64::from(sum_g)
        + lo_g * step_p * f64::from(sum_p)
        + step_p * step_g * f64::from(cross);
    let norm_sq = |lo: f64, step: f64, sum: u32, sq: u32| {
        d * lo * lo + 2.0 * lo * step * f64::from(sum) + step * step * f64::from(sq)
    };
    let np = norm_sq(lo_p, step_p, sum_p, sq_p);
    let ng = norm_sq(lo_g, step_g, sum_g, sq_g);
    if np <= 0.0 || ng <= 0.0 {
        return MatchScore::cosine(0.0);
    }
    MatchScore::cosine(dot / (np * ng).sqrt())
}
