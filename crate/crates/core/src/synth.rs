//! Synthetic identities and impressions with controllable score geometry.
//!
//! Each identity has a random unit anchor template and a master minutiae
//! set. An impression adds isotropic Gaussian noise to the anchor (then
//! renormalizes) and perturbs the master set: a small rigid motion, per
//! minutia jitter, random drops and spurious additions. Impression 0 of
//! every identity is enrolled; impressions 1.. of the first `probes`
//! identities become probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{Gallery, GalleryRecord, RecordKey};
use crate::matcher::rigid_transform;
use crate::minutiae::{Minutia, MinutiaeSet, IMAGE_SIZE};
use crate::template::{Template, DIM};

/// With the default quality spread, exact-search Rank-1 lands near 96% at
/// N = 100 000.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.045;
pub const DEFAULT_QUALITY_SPREAD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinutiaeNoise {
    pub position_sigma: f64,
    pub angle_sigma: f64,
    pub drop_probability: f64,
    pub max_rotation: f64,
    pub max_translation: f64,
    /// Master minutiae stay this far from the frame border.
    pub margin: f64,
}

impl Default for MinutiaeNoise {
    fn default() -> Self {
        Self {
            position_sigma: 3.0,
            angle_sigma: 0.1,
            drop_probability: 0.15,
            max_rotation: 0.15,
            max_translation: 16.0,
            margin: 24.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub impressions_per_identity: usize,
    pub noise_sigma: f64,
    /// Log-normal spread of a per-impression quality factor that scales
    /// `noise_sigma`; 0 gives every impression the same noise.
    pub quality_spread: f64,
    pub minutiae_count_range: (usize, usize),
    pub seed: u64,
    /// Number of identities that contribute probe impressions.
    pub probes: usize,
    pub minutiae: MinutiaeNoise,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 1000,
            impressions_per_identity: 2,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            quality_spread: DEFAULT_QUALITY_SPREAD,
            minutiae_count_range: (20, 60),
            seed: 0,
            probes: 100,
            minutiae: MinutiaeNoise::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.minutiae_count_range;
        if self.identities == 0 || self.impressions_per_identity == 0 {
            return Err(Error::Config("identity and impression counts must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad minutiae count range ({lo}, {hi})")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(self.quality_spread >= 0.0 && self.quality_spread.is_finite())
        {
            return Err(Error::Config(
                "noise_sigma and quality_spread must be finite and >= 0".into(),
            ));
        }
        if self.probes > self.identities {
            return Err(Error::Config("more probe identities than identities".into()));
        }
        if self.probes > 0 && self.impressions_per_identity < 2 {
            return Err(Error::Config("probes need at least 2 impressions per identity".into()));
        }
        let n = &self.minutiae;
        let size = f64::from(IMAGE_SIZE);
        if !(0.0..=1.0).contains(&n.drop_probability)
            || n.position_sigma < 0.0
            || n.angle_sigma < 0.0
            || !(0.0..size / 2.0).contains(&n.margin)
        {
            return Err(Error::Config("bad minutiae noise parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    /// Key of the enrolled mate.
    pub mate: RecordKey,
    pub template: Template,
    pub minutiae: MinutiaeSet,
}

pub struct SynthData {
    pub gallery: Gallery,
    /// The enrolled templates before compression, by ordinal.
    pub raw_templates: Vec<Template>,
    pub probes: Vec<Probe>,
}

/// Identity `i` is subject `i / 10`, finger `i % 10`.
pub fn identity_key(i: usize) -> RecordKey {
    RecordKey::new(format!("s{:07}", i / 10), (i % 10) as u8).expect("valid key")
}

fn identity_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Uniform random point on the unit sphere in `DIM` dimensions.
pub fn random_unit(rng: &mut impl Rng) -> Template {
    loop {
        let raw: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(t) = Template::normalize_f64(&raw) {
            return t;
        }
    }
}

/// `normalize(anchor + N(0, sigma²) per coordinate)`.
pub fn perturb_template(anchor: &Template, sigma: f64, rng: &mut impl Rng) -> Template {
    if sigma == 0.0 {
        return anchor.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    loop {
        let raw: Vec<f64> = anchor
            .as_slice()
            .iter()
            .map(|&x| f64::from(x) + noise.sample(rng))
            .collect();
        if let Some(t) = Template::normalize_f64(&raw) {
            return t;
        }
    }
}

fn random_minutia(rng: &mut impl Rng, margin: f64) -> Minutia {
    let size = f64::from(IMAGE_SIZE);
    let x = rng.random_range(margin..size - margin);
    let y = rng.random_range(margin..size - margin);
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    Minutia::new(x as f32, y as f32, t as f32)
}

pub fn master_minutiae(rng: &mut impl Rng, range: (usize, usize), margin: f64) -> MinutiaeSet {
    let n = rng.random_range(range.0..=range.1);
    let m = (0..n).map(|_| random_minutia(rng, margin)).collect();
    MinutiaeSet::new(IMAGE_SIZE, IMAGE_SIZE, m).expect("inside frame")
}

/// One impression of `master`: rigid motion, jitter, drops and spurious
/// additions whose expected count equals the expected drop count.
pub fn perturb_minutiae(master: &MinutiaeSet, noise: &MinutiaeNoise, rng: &mut impl Rng) -> MinutiaeSet {
    let size = IMAGE_SIZE as f32;
    let pos = Normal::new(0.0, noise.position_sigma).expect("sigma >= 0");
    let ang = Normal::new(0.0, noise.angle_sigma).expect("sigma >= 0");
    let mut kept = Vec::with_capacity(master.len());
    for m in master.minutiae() {
        if rng.random_bool(noise.drop_probability) {
            continue;
        }
        let x = m.x + pos.sample(rng) as f32;
        let y = m.y + pos.sample(rng) as f32;
        if (0.0..size).contains(&x) && (0.0..size).contains(&y) {
            kept.push(Minutia::new(x, y, m.theta + ang.sample(rng) as f32));
        }
    }
    let spurious = Binomial::new(master.len() as u64, noise.drop_probability)
        .expect("probability in [0, 1]")
        .sample(rng);
    for _ in 0..spurious {
        kept.push(random_minutia(rng, 0.0));
    }
    let set = MinutiaeSet::new(IMAGE_SIZE, IMAGE_SIZE, kept).expect("inside frame");
    let angle = rng.random_range(-noise.max_rotation..=noise.max_rotation);
    let tx = rng.random_range(-noise.max_translation..=noise.max_translation);
    let ty = rng.random_range(-noise.max_translation..=noise.max_translation);
    rigid_transform(&set, angle, tx, ty)
}

struct Identity {
    enrolled: (Template, MinutiaeSet),
    probes: Vec<(Template, MinutiaeSet)>,
}

fn identity(cfg: &SynthConfig, i: usize) -> Identity {
    let mut rng = identity_rng(cfg.seed, i);
    let anchor = random_unit(&mut rng);
    let master = master_minutiae(&mut rng, cfg.minutiae_count_range, cfg.minutiae.margin);
    let impression = |rng: &mut ChaCha8Rng| {
        let z: f64 = rng.sample(StandardNormal);
        let sigma = cfg.noise_sigma * (cfg.quality_spread * z).exp();
        (
            perturb_template(&anchor, sigma, rng),
            perturb_minutiae(&master, &cfg.minutiae, rng),
        )
    };
    let enrolled = impression(&mut rng);
    let probes = if i < cfg.probes {
        (1..cfg.impressions_per_identity)
            .map(|_| impression(&mut rng))
            .collect()
    } else {
        Vec::new()
    };
    Identity { enrolled, probes }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let identities: Vec<Identity> = (0..cfg.identities)
        .into_par_iter()
        .map(|i| identity(cfg, i))
        .collect();
    let mut gallery = Gallery::new();
    let mut raw_templates = Vec::with_capacity(cfg.identities);
    let mut probes = Vec::new();
    for (i, id) in identities.into_iter().enumerate() {
        let key = identity_key(i);
        let (t, m) = id.enrolled;
        gallery.enroll(GalleryRecord {
            key: key.clone(),
            template: t.compress(),
            minutiae: Some(m),
        })?;
        raw_templates.push(t);
        probes.extend(id.probes.into_iter().map(|(template, minutiae)| Probe {
            mate: key.clone(),
            template,
            minutiae,
        }));
    }
    Ok(SynthData {
        gallery,
        raw_templates,
        probes,
    })
}

/// `n` minutiae in a `size x size` frame, at least `border` from every edge
/// and more than `min_distance` apart.
pub fn well_separated_set(
    rng: &mut impl Rng,
    n: usize,
    size: u32,
    border: f32,
    min_distance: f32,
) -> MinutiaeSet {
    let hi = size as f32 - border;
    let mut pts: Vec<Minutia> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pts.len() < n {
        attempts += 1;
        assert!(attempts < 1_000_000, "cannot place {n} separated minutiae");
        let m = Minutia::new(
            rng.random_range(border..hi),
            rng.random_range(border..hi),
            rng.random_range(0.0..std::f32::consts::TAU),
        );
        if pts
            .iter()
            .all(|p| (p.x - m.x).hypot(p.y - m.y) > min_distance)
        {
            pts.push(m);
        }
    }
    MinutiaeSet::new(size, size, pts).expect("inside frame")
}

/// `n` independent random unit templates; used for throughput runs where
/// identity structure does not matter.
pub fn random_templates(n: usize, seed: u64) -> Vec<Template> {
    const CHUNK: usize = 4096;
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = identity_rng(seed, c);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(move |_| random_unit(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}
