//! Product quantization with asymmetric distance search.
//!
//! A template is split into `m` contiguous sub-vectors of `d/m` features.
//! Each sub-space has its own codebook of `z` centroids trained by k-means,
//! and a gallery template is stored as the `m` indices of its nearest
//! centroids. A probe builds an `m x z` table of squared sub-distances once;
//! the distance to any stored record is then `m` table lookups and additions.
//!
//! File layout (little-endian):
//!
//! ```text
//! "DPPQ" | u16 version | u32 d | u32 m | u32 z | m*z*(d/m) f32 centroids
//!        | u64 N | N code rows of ceil(m*log2(z)/8) bytes
//! ```
//!
//! Code rows are bit-packed, least significant bit first.

use std::path::Path;

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::kmeans::{kmeans, nearest, sq_dist, KMeansConfig, Transposed};
use crate::search::{shard_ranges, Candidate, CandidateList};
use crate::template::{MatchScore, Template, DIM};
use crate::topk::{Hit, TopK};

pub const MAGIC: &[u8; 4] = b"DPPQ";
pub const VERSION: u16 = 1;

pub const DEFAULT_M: usize = 64;
pub const DEFAULT_Z: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    pub z: usize,
    pub seed: u64,
    pub kmeans: KMeansConfig,
    /// Upper bound on the samples used for training; larger sample sets are
    /// subsampled deterministically from `seed`.
    pub max_training_points: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            z: DEFAULT_Z,
            seed: 0,
            kmeans: KMeansConfig::default(),
            max_training_points: Some(256 * DEFAULT_Z),
        }
    }
}

/// The `z` centroids of one sub-space.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    sub_dim: usize,
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.centroids.len() / self.sub_dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.sub_dim..(j + 1) * self.sub_dim]
    }

    pub fn nearest(&self, sub: &[f32]) -> usize {
        nearest(sub, &self.centroids, self.sub_dim).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductQuantizer {
    m: usize,
    z: usize,
    codebooks: Vec<Codebook>,
}

fn validate_shape(m: usize, z: usize) -> Result<()> {
    if m == 0 || DIM % m != 0 {
        return Err(Error::invalid(format!("m={m} must divide d={DIM}")));
    }
    if z == 0 || z > 256 || !z.is_power_of_two() {
        return Err(Error::invalid(format!(
            "z={z} must be a power of two in 1..=256"
        )));
    }
    Ok(())
}

impl ProductQuantizer {
    /// Trains one codebook per sub-space on `samples`.
    pub fn train(samples: &[Template], cfg: &TrainConfig) -> Result<Self> {
        validate_shape(cfg.m, cfg.z)?;
        if samples.len() < cfg.z {
            return Err(Error::invalid(format!(
                "training needs at least z={} samples, got {}",
                cfg.z,
                samples.len()
            )));
        }
        let chosen: Vec<&Template> = match cfg.max_training_points {
            Some(cap) if samples.len() > cap.max(cfg.z) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut idx = sample(&mut rng, samples.len(), cap.max(cfg.z)).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &samples[i]).collect()
            }
            _ => samples.iter().collect(),
        };
        let sub_dim = DIM / cfg.m;
        let codebooks = (0..cfg.m)
            .into_par_iter()
            .map(|i| {
                let points: Vec<f32> = chosen
                    .iter()
                    .flat_map(|t| t.as_slice()[i * sub_dim..(i + 1) * sub_dim].iter().copied())
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64 + 1);
                kmeans(&points, sub_dim, cfg.z, &cfg.kmeans, &mut rng).map(|r| Codebook {
                    sub_dim,
                    centroids: r.centroids,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m: cfg.m,
            z: cfg.z,
            codebooks,
        })
    }

    /// Assembles a quantizer from `m` row-major codebooks of `z` centroids.
    pub fn from_codebooks(m: usize, z: usize, centroids: Vec<f32>) -> Result<Self> {
        validate_shape(m, z)?;
        let sub_dim = DIM / m;
        if centroids.len() != m * z * sub_dim {
            return Err(Error::invalid("codebook buffer has the wrong length"));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        let codebooks = centroids
            .chunks_exact(z * sub_dim)
            .map(|c| Codebook {
                sub_dim,
                centroids: c.to_vec(),
            })
            .collect();
        Ok(Self { m, z, codebooks })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn sub_dim(&self) -> usize {
        DIM / self.m
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    /// Bytes per serialized code row: `m * log2(z) / 8`, rounded up.
    pub fn code_bytes(&self) -> usize {
        (self.m * self.z.trailing_zeros() as usize).div_ceil(8)
    }

    /// Index of the nearest centroid in each sub-space.
    pub fn quantize(&self, t: &Template) -> Vec<u8> {
        let sd = self.sub_dim();
        t.as_slice()
            .chunks_exact(sd)
            .zip(&self.codebooks)
            .map(|(sub, cb)| cb.nearest(sub) as u8)
            .collect()
    }

    /// Concatenated centroids named by `code` (not renormalized).
    pub fn reconstruct(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .zip(&self.codebooks)
            .flat_map(|(&j, cb)| cb.centroid(j as usize).iter().copied())
            .collect()
    }

    pub fn build_table(&self, probe: &Template) -> DistanceTable {
        let sd = self.sub_dim();
        let mut values = Vec::with_capacity(self.m * self.z);
        for (sub, cb) in probe.as_slice().chunks_exact(sd).zip(&self.codebooks) {
            values.extend((0..self.z).map(|j| sq_dist(sub, cb.centroid(j)) as f32));
        }
        DistanceTable {
            m: self.m,
            z: self.z,
            values,
        }
    }
}

/// Per-probe `m x z` table of squared sub-vector distances.
#[derive(Clone, Debug)]
pub struct DistanceTable {
    m: usize,
    z: usize,
    values: Vec<f32>,
}

impl DistanceTable {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.z + j]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Sum of `m` lookups.
    #[inline]
    pub fn distance(&self, code: &[u8]) -> f64 {
        debug_assert_eq!(code.len(), self.m);
        if self.z == 256 {
            return distance_256(&self.values, code);
        }
        let z = self.z;
        let mut acc = [0f64; 4];
        let mut chunks = code.chunks_exact(4);
        let mut base = 0;
        for c in &mut chunks {
            for (lane, &j) in c.iter().enumerate() {
                acc[lane] += f64::from(self.values[base + lane * z + j as usize]);
            }
            base += 4 * z;
        }
        for (lane, &j) in chunks.remainder().iter().enumerate() {
            acc[lane] += f64::from(self.values[base + lane * z + j as usize]);
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3])
    }
}

/// `z = 256` lets a `u8` index each table row without bounds checks.
/// Accumulation order matches the generic path.
#[inline]
fn distance_256(values: &[f32], code: &[u8]) -> f64 {
    let (rows, _) = values.as_chunks::<256>();
    let mut acc = [0f64; 4];
    let mut c4 = code.chunks_exact(4);
    let mut r4 = rows.chunks_exact(4);
    for (c, r) in (&mut c4).zip(&mut r4) {
        acc[0] += f64::from(r[0][c[0] as usize]);
        acc[1] += f64::from(r[1][c[1] as usize]);
        acc[2] += f64::from(r[2][c[2] as usize]);
        acc[3] += f64::from(r[3][c[3] as usize]);
    }
    for (lane, (&j, r)) in c4.remainder().iter().zip(r4.remainder()).enumerate() {
        acc[lane] += f64::from(r[j as usize]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// A trained quantizer plus one code row per gallery record.
#[derive(Clone, Debug, PartialEq)]
pub struct PqIndex {
    quantizer: ProductQuantizer,
    codes: Vec<u8>,
}

impl PqIndex {
    pub fn new(quantizer: ProductQuantizer) -> Self {
        Self {
            quantizer,
            codes: Vec::new(),
        }
    }

    pub fn add(&mut self, templates: &[Template]) {
        let q = &self.quantizer;
        let (m, sd) = (q.m, q.sub_dim());
        let rows: Vec<Vec<u8>> = templates
            .par_chunks(1024)
            .map(|chunk| {
                let mut out = vec![0u8; chunk.len() * m];
                for (i, cb) in q.codebooks.iter().enumerate() {
                    let mut tr = Transposed::new(&cb.centroids, sd);
                    for (r, t) in chunk.iter().enumerate() {
                        out[r * m + i] = tr.nearest(&t.as_slice()[i * sd..(i + 1) * sd]).0 as u8;
                    }
                }
                out
            })
            .collect();
        for r in rows {
            self.codes.extend_from_slice(&r);
        }
    }

    /// Trains on the gallery's own (decompressed) templates and encodes them.
    pub fn build_from_gallery(gallery: &Gallery, cfg: &TrainConfig) -> Result<Self> {
        let templates = gallery.decompressed();
        Self::build(&templates, cfg)
    }

    pub fn build(templates: &[Template], cfg: &TrainConfig) -> Result<Self> {
        let mut idx = Self::new(ProductQuantizer::train(templates, cfg)?);
        idx.add(templates);
        Ok(idx)
    }

    pub fn quantizer(&self) -> &ProductQuantizer {
        &self.quantizer
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.quantizer.m
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, ordinal: usize) -> &[u8] {
        let m = self.quantizer.m;
        &self.codes[ordinal * m..(ordinal + 1) * m]
    }

    /// Asymmetric distance from `probe` to every record.
    pub fn distances(&self, probe: &Template) -> Vec<f64> {
        let table = self.quantizer.build_table(probe);
        self.codes
            .chunks_exact(self.quantizer.m)
            .map(|c| table.distance(c))
            .collect()
    }

    fn scan(&self, table: &DistanceTable, range: std::ops::Range<usize>, k: usize) -> TopK {
        let m = self.quantizer.m;
        let mut top = TopK::new(k);
        let rows = self.codes[range.start * m..range.end * m].chunks_exact(m);
        for (i, code) in rows.enumerate() {
            top.push(Hit {
                ordinal: range.start + i,
                key: -(table.distance(code) as f32),
            });
        }
        top
    }

    /// Ranked by ascending distance; hit keys are negated distances.
    pub fn search_hits(&self, probe: &Template, k: usize, shards: usize) -> Vec<Hit> {
        let table = self.quantizer.build_table(probe);
        let ranges = shard_ranges(self.len(), shards);
        let top = if ranges.len() == 1 {
            self.scan(&table, ranges[0].clone(), k)
        } else {
            ranges
                .into_par_iter()
                .map(|r| self.scan(&table, r, k))
                .reduce(
                    || TopK::new(k),
                    |mut a, b| {
                        a.merge(b);
                        a
                    },
                )
        };
        top.into_sorted_vec()
    }

    /// Top-k against `gallery`, which must be the gallery the index encodes.
    pub fn search_topk(
        &self,
        probe: &Template,
        k: usize,
        shards: usize,
        gallery: &Gallery,
    ) -> Result<CandidateList> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if gallery.len() != self.len() {
            return Err(Error::Config(format!(
                "index holds {} records but gallery has {}",
                self.len(),
                gallery.len()
            )));
        }
        let items = self
            .search_hits(probe, k, shards)
            .into_iter()
            .map(|h| Candidate {
                ordinal: h.ordinal,
                key: gallery.records()[h.ordinal].key.clone(),
                score: MatchScore::pq_distance(-f64::from(h.key)),
            })
            .collect();
        Ok(CandidateList { k, items })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let q = &self.quantizer;
        let row_bytes = q.code_bytes();
        let mut out = Vec::with_capacity(30 + q.m * q.z * q.sub_dim() * 4 + self.len() * row_bytes);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(DIM as u32).to_le_bytes());
        out.extend_from_slice(&(q.m as u32).to_le_bytes());
        out.extend_from_slice(&(q.z as u32).to_le_bytes());
        for cb in &q.codebooks {
            for c in &cb.centroids {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let bits = q.z.trailing_zeros();
        for code in self.codes.chunks_exact(q.m) {
            pack_row(code, bits, row_bytes, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if &r.array::<4>("magic")? != MAGIC {
            return Err(Error::parse(0, "not a PQ index file (bad magic)"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let d = r.u32("d")? as usize;
        if d != DIM {
            return Err(Error::parse(6, format!("d={d}, expected {DIM}")));
        }
        let m = r.u32("m")? as usize;
        let z = r.u32("z")? as usize;
        validate_shape(m, z).map_err(|e| Error::parse(10, e.to_string()))?;
        let n_cent = m * z * (DIM / m);
        let at = r.offset();
        let raw = r.take(n_cent * 4, "codebooks")?;
        let centroids = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let quantizer = ProductQuantizer::from_codebooks(m, z, centroids)
            .map_err(|e| Error::parse(at, e.to_string()))?;
        let n = r.u64("record count")? as usize;
        let row_bytes = quantizer.code_bytes();
        if row_bytes > 0 && n > r.remaining() / row_bytes {
            return Err(Error::parse(
                r.offset(),
                format!("record count {n} exceeds what the file can hold"),
            ));
        }
        let bits = z.trailing_zeros();
        let mut codes = Vec::with_capacity(n * m);
        for _ in 0..n {
            let row = r.take(row_bytes, "code row")?;
            unpack_row(row, bits, m, &mut codes);
        }
        r.expect_end()?;
        Ok(Self { quantizer, codes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn pack_row(code: &[u8], bits: u32, row_bytes: usize, out: &mut Vec<u8>) {
    if bits == 8 {
        out.extend_from_slice(code);
        return;
    }
    let start = out.len();
    out.resize(start + row_bytes, 0);
    let row = &mut out[start..];
    let mut bit = 0usize;
    for &c in code {
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                row[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
}

fn unpack_row(row: &[u8], bits: u32, m: usize, out: &mut Vec<u8>) {
    if bits == 8 {
        out.extend_from_slice(row);
        return;
    }
    let mut bit = 0usize;
    for _ in 0..m {
        let mut c = 0u8;
        for b in 0..bits as usize {
            if row[bit / 8] >> (bit % 8) & 1 == 1 {
                c |= 1 << b;
            }
            bit += 1;
        }
        out.push(c);
    }
}
