//! Minutiae sets and their 6-channel heatmap ("minutiae map") encoding.
//!
//! Each minutia contributes `C_s * C_o` to every map cell, where `C_s` is a
//! Gaussian of the squared pixel distance and `C_o` an exponential of the
//! orientation difference to the channel's center angle `2kπ/6`. Decoding
//! finds peaks of the channel-summed map, applies non-maximum suppression and
//! recovers orientation as the circular mean of the channel centers weighted
//! by the channel values at the peak.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use crate::codec::ByteReader;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 6;

/// Default map grid, and the input frame it is scaled from.
pub const MAP_SIZE: u32 = 128;
pub const IMAGE_SIZE: u32 = 448;

pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_RADIUS: f64 = 3.0;

// Contributions are snapped to multiples of 2^-32 so that map sums are exact
// in f64 regardless of accumulation order.
const FIXED_SCALE: f64 = 4_294_967_296.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Minutia {
    pub x: f32,
    pub y: f32,
    /// Radians in `[0, 2π)`.
    pub theta: f32,
}

impl Minutia {
    /// Builds a minutia, wrapping `theta` into `[0, 2π)`.
    pub fn new(x: f32, y: f32, theta: f32) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }
}

pub fn wrap_angle(theta: f32) -> f32 {
    let tau = TAU as f32;
    let w = theta.rem_euclid(tau);
    if w >= tau {
        0.0
    } else {
        w
    }
}

/// Orientation difference in `[0, π]`.
pub fn orientation_diff(a: f64, b: f64) -> f64 {
    let d = a - b;
    if (-PI..=PI).contains(&d) {
        d.abs()
    } else {
        // |d| may exceed 2π for unwrapped inputs; fold it first.
        let folded = d.abs().rem_euclid(TAU);
        if folded <= PI {
            folded
        } else {
            TAU - folded
        }
    }
}

/// An ordered list of minutiae in a `width` x `height` pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MinutiaeSet {
    width: u32,
    height: u32,
    minutiae: Vec<Minutia>,
}

impl MinutiaeSet {
    pub fn new(width: u32, height: u32, minutiae: Vec<Minutia>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("minutiae frame must have positive size"));
        }
        for (i, m) in minutiae.iter().enumerate() {
            let inside = m.x >= 0.0
                && m.y >= 0.0
                && (m.x as f64) < width as f64
                && (m.y as f64) < height as f64;
            if !inside || !m.theta.is_finite() {
                return Err(Error::invalid(format!(
                    "minutia {i} ({}, {}, {}) outside {width}x{height}",
                    m.x, m.y, m.theta
                )));
            }
            if !(0.0..TAU as f32).contains(&m.theta) {
                return Err(Error::invalid(format!(
                    "minutia {i} angle {} not in [0, 2π)",
                    m.theta
                )));
            }
        }
        Ok(Self {
            width,
            height,
            minutiae,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn minutiae(&self) -> &[Minutia] {
        &self.minutiae
    }

    pub fn len(&self) -> usize {
        self.minutiae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutiae.is_empty()
    }

    /// Rescales coordinates linearly into a `width` x `height` frame.
    pub fn scale_to(&self, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("target frame must have positive size"));
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let sx = f64::from(width) / f64::from(self.width);
        let sy = f64::from(height) / f64::from(self.height);
        let minutiae = self
            .minutiae
            .iter()
            .map(|m| Minutia {
                x: scale_coord(m.x, sx, width),
                y: scale_coord(m.y, sy, height),
                theta: m.theta,
            })
            .collect();
        Self::new(width, height, minutiae)
    }

    /// Text form: a `w h n` header line followed by `x y theta` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.width, self.height, self.len());
        for m in &self.minutiae {
            let _ = writeln!(out, "{} {} {}", m.x, m.y, m.theta);
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::invalid("empty minutiae file"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 {
            return Err(Error::invalid("minutiae header must be `w h n`"));
        }
        let parse_u32 = |s: &str, what: &str| {
            s.parse::<u32>()
                .map_err(|e| Error::invalid(format!("header {what}: {e}")))
        };
        let width = parse_u32(head[0], "w")?;
        let height = parse_u32(head[1], "h")?;
        let n = parse_u32(head[2], "n")? as usize;
        let mut minutiae = Vec::with_capacity(n);
        for (lineno, line) in lines {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::invalid(format!(
                    "line {}: expected `x y theta`",
                    lineno + 1
                )));
            }
            minutiae.push(Minutia::new(vals[0], vals[1], vals[2]));
        }
        if minutiae.len() != n {
            return Err(Error::invalid(format!(
                "header declares {n} minutiae, found {}",
                minutiae.len()
            )));
        }
        Self::new(width, height, minutiae)
    }

    pub(crate) fn write_binary(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.minutiae.len() as u32).to_le_bytes());
        for m in &self.minutiae {
            out.extend_from_slice(&m.x.to_le_bytes());
            out.extend_from_slice(&m.y.to_le_bytes());
            out.extend_from_slice(&m.theta.to_le_bytes());
        }
    }

    pub(crate) fn read_binary(r: &mut ByteReader<'_>) -> Result<Self> {
        let start = r.offset();
        let width = r.u32("minutiae width")?;
        let height = r.u32("minutiae height")?;
        let n = r.u32("minutiae count")? as usize;
        if n.saturating_mul(12) > r.remaining() {
            return Err(Error::parse(r.offset(), "minutiae block truncated"));
        }
        let mut minutiae = Vec::with_capacity(n);
        for _ in 0..n {
            let x = r.f32("minutia x")?;
            let y = r.f32("minutia y")?;
            let theta = r.f32("minutia theta")?;
            minutiae.push(Minutia { x, y, theta });
        }
        Self::new(width, height, minutiae).map_err(|e| Error::parse(start, e.to_string()))
    }
}

fn scale_coord(v: f32, factor: f64, limit: u32) -> f32 {
    let s = (f64::from(v) * factor) as f32;
    if f64::from(s) >= f64::from(limit) {
        (limit as f32).next_down()
    } else {
        s
    }
}

/// Dense `height x width x 6` heatmap, indexed `[y][x][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MinutiaeMap {
    width: u32,
    height: u32,
    sigma_s: f64,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    pub map_width: u32,
    pub map_height: u32,
    pub sigma_s: f64,
    /// Square the orientation difference in the orientation term. Off by
    /// default: the orientation term is `exp(-dφ / (2σ²))`.
    pub squared_orientation: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            map_width: MAP_SIZE,
            map_height: MAP_SIZE,
            sigma_s: DEFAULT_SIGMA,
            squared_orientation: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub peak_threshold: f64,
    pub nms_radius: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            peak_threshold: DEFAULT_PEAK_THRESHOLD,
            nms_radius: DEFAULT_NMS_RADIUS,
        }
    }
}

impl MinutiaeMap {
    pub fn zeros(width: u32, height: u32, sigma_s: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("map dimensions must be positive"));
        }
        if !(sigma_s > 0.0 && sigma_s.is_finite()) {
            return Err(Error::invalid("sigma_s must be positive"));
        }
        Ok(Self {
            width,
            height,
            sigma_s,
            values: vec![0.0; width as usize * height as usize * CHANNELS],
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn sigma_s(&self) -> f64 {
        self.sigma_s
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn index(&self, x: u32, y: u32, k: usize) -> usize {
        (y as usize * self.width as usize + x as usize) * CHANNELS + k
    }

    /// Value at column `x`, row `y`, channel `k`.
    pub fn get(&self, x: u32, y: u32, k: usize) -> f64 {
        self.values[self.index(x, y, k)]
    }

    /// Elementwise sum of two maps of equal shape.
    pub fn add(&self, other: &MinutiaeMap) -> Result<MinutiaeMap> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::invalid("map shapes differ"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(MinutiaeMap {
            values,
            ..self.clone()
        })
    }

    /// Binary form: `u32 height, u32 width, u32 channels, f32 sigma_s`, then
    /// row-major little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        out.extend_from_slice(&(self.sigma_s as f32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let height = r.u32("map height")?;
        let width = r.u32("map width")?;
        let channels = r.u32("map channels")?;
        if channels as usize != CHANNELS {
            return Err(Error::parse(8, format!("expected 6 channels, got {channels}")));
        }
        let sigma_s = f64::from(r.f32("map sigma")?);
        let mut map = Self::zeros(width, height, sigma_s).map_err(|e| Error::parse(0, e.to_string()))?;
        if r.remaining() != map.values.len() * 4 {
            return Err(Error::parse(
                r.offset(),
                format!(
                    "expected {} value bytes, found {}",
                    map.values.len() * 4,
                    r.remaining()
                ),
            ));
        }
        for v in map.values.iter_mut() {
            let x = r.f32("map value")?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::parse(r.offset() - 4, "map values must be finite and non-negative"));
            }
            *v = f64::from(x);
        }
        Ok(map)
    }
}

fn channel_center(k: usize) -> f64 {
    2.0 * k as f64 * PI / CHANNELS as f64
}

fn snap(v: f64) -> f64 {
    (v * FIXED_SCALE).round() / FIXED_SCALE
}

/// Renders `set` into a minutiae map after scaling it onto the map grid.
///
/// Spatial contributions beyond `4σ` are skipped; each dropped term is below
/// `exp(-8)`.
pub fn encode_map(set: &MinutiaeSet, opts: &EncodeOptions) -> Result<MinutiaeMap> {
    let mut map = MinutiaeMap::zeros(opts.map_width, opts.map_height, opts.sigma_s)?;
    let scaled = set.scale_to(opts.map_width, opts.map_height)?;
    let two_var = 2.0 * opts.sigma_s * opts.sigma_s;
    let radius = 4.0 * opts.sigma_s;

    for m in scaled.minutiae() {
        let (mx, my) = (f64::from(m.x), f64::from(m.y));
        let theta = f64::from(m.theta);
        let orient: [f64; CHANNELS] = std::array::from_fn(|k| {
            let d = orientation_diff(theta, channel_center(k));
            let d = if opts.squared_orientation { d * d } else { d };
            (-d / two_var).exp()
        });
        let x0 = ((mx - radius).ceil() as i64).max(0);
        let x1 = ((mx + radius).floor() as i64).min(i64::from(map.width) - 1);
        let y0 = ((my - radius).ceil() as i64).max(0);
        let y1 = ((my + radius).floor() as i64).min(i64::from(map.height) - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (x, y) = (x as u32, y as u32);
                let dx = f64::from(x) - mx;
                let dy = f64::from(y) - my;
                let dist_sq = dx * dx + dy * dy;
                if dist_sq > radius * radius {
                    continue;
                }
                let spatial = (-dist_sq / two_var).exp();
                let base = map.index(x, y, 0);
                for (k, o) in orient.iter().enumerate() {
                    map.values[base + k] += snap(spatial * o);
                }
            }
        }
    }
    Ok(map)
}

/// Recovers a minutiae set (in map coordinates) from a heatmap.
pub fn decode_map(map: &MinutiaeMap, opts: &DecodeOptions) -> Result<MinutiaeSet> {
    let (w, h) = (map.width as usize, map.height as usize);
    let summed: Vec<f64> = map
        .values
        .chunks_exact(CHANNELS)
        .map(|c| c.iter().sum())
        .collect();

    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let v = summed[idx];
            if v <= opts.peak_threshold {
                continue;
            }
            if is_local_max(&summed, w, h, x, y) {
                peaks.push((v, idx));
            }
        }
    }
    // Strongest first; raster order on ties.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut kept: Vec<(f64, f64)> = Vec::new();
    let mut minutiae = Vec::new();
    let r2 = opts.nms_radius * opts.nms_radius;
    for (_, idx) in peaks {
        let (x, y) = ((idx % w) as f64, (idx / w) as f64);
        if kept
            .iter()
            .any(|&(kx, ky)| (kx - x).powi(2) + (ky - y).powi(2) < r2)
        {
            continue;
        }
        kept.push((x, y));
        let cell = &map.values[idx * CHANNELS..(idx + 1) * CHANNELS];
        let (s, c) = cell.iter().enumerate().fold((0.0, 0.0), |(s, c), (k, v)| {
            let a = channel_center(k);
            (s + v * a.sin(), c + v * a.cos())
        });
        let theta = s.atan2(c).rem_euclid(TAU);
        minutiae.push(Minutia::new(x as f32, y as f32, theta as f32));
    }
    MinutiaeSet::new(map.width, map.height, minutiae)
}

// A plateau keeps only its first cell in raster order.
fn is_local_max(summed: &[f64], w: usize, h: usize, x: usize, y: usize) -> bool {
    let idx = y * w + x;
    let v = summed[idx];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let nidx = ny as usize * w + nx as usize;
            let n = summed[nidx];
            if n > v || (n == v && nidx < idx) {
                return false;
            }
        }
    }
    true
}
