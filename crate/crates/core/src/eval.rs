//! Closed-set identification and verification metrics over a probe set.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::pq::PqIndex;
use crate::rerank::{fused_verify, template_similarity, FusionConfig, Retriever};
use crate::search::{CandidateList, SearchIndex};
use crate::synth::Probe;
use crate::template::MatchScore;

pub const REPORT_VERSION: u32 = 1;

/// A search backend under evaluation.
pub trait Backend: Sync {
    fn name(&self) -> &'static str;
    fn gallery(&self) -> &Gallery;
    fn search(&self, probe: &Probe, k: usize) -> Result<CandidateList>;
    /// Verification similarity (higher is better) of `probe` against each
    /// gallery ordinal.
    fn verify(&self, probe: &Probe, ordinals: &[usize]) -> Vec<f64>;
}

pub struct ExactBackend<'a> {
    pub gallery: &'a Gallery,
    pub index: &'a SearchIndex,
    pub shards: usize,
}

impl Backend for ExactBackend<'_> {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn gallery(&self) -> &Gallery {
        self.gallery
    }

    fn search(&self, probe: &Probe, k: usize) -> Result<CandidateList> {
        self.index.search_topk(&probe.template, k, self.shards)
    }

    fn verify(&self, probe: &Probe, ordinals: &[usize]) -> Vec<f64> {
        ordinals
            .iter()
            .map(|&o| MatchScore::cosine(f64::from(self.index.score(&probe.template, o))).value)
            .collect()
    }
}

pub struct PqBackend<'a> {
    pub gallery: &'a Gallery,
    pub index: &'a PqIndex,
    pub shards: usize,
}

impl Backend for PqBackend<'_> {
    fn name(&self) -> &'static str {
        "pq"
    }

    fn gallery(&self) -> &Gallery {
        self.gallery
    }

    fn search(&self, probe: &Probe, k: usize) -> Result<CandidateList> {
        self.index.search_topk(&probe.template, k, self.shards, self.gallery)
    }

    fn verify(&self, probe: &Probe, ordinals: &[usize]) -> Vec<f64> {
        let table = self.index.quantizer().build_table(&probe.template);
        ordinals
            .iter()
            .map(|&o| template_similarity(&MatchScore::pq_distance(table.distance(self.index.code(o)))))
            .collect()
    }
}

pub struct RerankBackend<'a> {
    pub retriever: Retriever<'a>,
    pub config: FusionConfig,
}

impl Backend for RerankBackend<'_> {
    fn name(&self) -> &'static str {
        "rerank"
    }

    fn gallery(&self) -> &Gallery {
        self.retriever.gallery()
    }

    fn search(&self, probe: &Probe, _k: usize) -> Result<CandidateList> {
        self.retriever
            .two_stage_search(&probe.template, &probe.minutiae, &self.config)
    }

    fn verify(&self, probe: &Probe, ordinals: &[usize]) -> Vec<f64> {
        let recs = self.gallery().records();
        ordinals
            .iter()
            .map(|&o| {
                let g = &recs[o];
                fused_verify(
                    &probe.template,
                    &g.template.decompress(),
                    &probe.minutiae,
                    g.minutiae.as_ref().expect("checked by Retriever"),
                    &self.config.matcher,
                )
                .value
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Longest rank reported in the CMC curve.
    pub max_rank: usize,
    pub fars: Vec<f64>,
    pub imposters_per_probe: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_rank: 100,
            fars: vec![1e-4, 1e-3, 1e-2, 1e-1],
            imposters_per_probe: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub p99_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// 1-based rank of the mate; `None` when outside the returned list.
    pub mate_rank: Option<usize>,
    pub top1: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub version: u32,
    pub backend: String,
    pub gallery_size: usize,
    pub probes: usize,
    /// Probes whose mate key is not enrolled.
    pub excluded: usize,
    /// `cmc[k - 1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub tar_at_far: Vec<TarAtFar>,
    pub latency: Latency,
    pub genuine_scores: usize,
    pub imposter_scores: usize,
    #[serde(skip)]
    pub outcomes: Vec<ProbeOutcome>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.min(self.cmc.len()) - 1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// CMC from 1-based mate ranks; `None` counts as a miss at every rank.
pub fn cmc(ranks: &[Option<usize>], max_rank: usize) -> Vec<f64> {
    let mut hist = vec![0usize; max_rank + 1];
    for r in ranks.iter().flatten() {
        if *r <= max_rank {
            hist[*r] += 1;
        }
    }
    let n = ranks.len().max(1) as f64;
    let mut acc = 0;
    hist[1..]
        .iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect()
}

/// TAR at the threshold that admits at most `far * n_imposters` imposters.
/// Scores strictly above the threshold are accepted.
pub fn tar_at_far(genuine: &[f64], imposter: &[f64], far: f64) -> TarAtFar {
    let mut imp = imposter.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far * imp.len() as f64).floor() as usize;
    let threshold = imp.get(allowed).copied().unwrap_or(f64::NEG_INFINITY);
    let accepted = genuine.iter().filter(|&&g| g > threshold).count();
    TarAtFar {
        far,
        tar: accepted as f64 / genuine.len().max(1) as f64,
        threshold,
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Non-mate ordinals for probe `j`, drawn from a per-probe stream.
pub(crate) fn imposter_ordinals(n: usize, mate: usize, count: usize, seed: u64, j: usize) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    (0..count)
        .map(|_| loop {
            let o = rng.random_range(0..n);
            if o != mate {
                break o;
            }
        })
        .collect()
}

pub fn evaluate(backend: &dyn Backend, probes: &[Probe], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    let gallery = backend.gallery();
    let mut included = Vec::with_capacity(probes.len());
    for p in probes {
        if let Some(o) = gallery.ordinal_of(&p.mate) {
            included.push((p, o));
        }
    }
    let excluded = probes.len() - included.len();

    let mut outcomes = Vec::with_capacity(included.len());
    let mut times = Vec::with_capacity(included.len());
    for (p, _) in &included {
        let start = Instant::now();
        let list = backend.search(p, cfg.max_rank)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        outcomes.push(ProbeOutcome {
            mate_rank: list.rank_of(&p.mate),
            top1: list.items.first().map(|c| c.ordinal),
        });
    }

    let scores: Vec<(f64, Vec<f64>)> = included
        .par_iter()
        .enumerate()
        .map(|(j, (p, mate))| {
            let imp = imposter_ordinals(gallery.len(), *mate, cfg.imposters_per_probe, cfg.seed, j);
            (backend.verify(p, &[*mate])[0], backend.verify(p, &imp))
        })
        .collect();
    let genuine: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let imposter: Vec<f64> = scores.into_iter().flat_map(|s| s.1).collect();

    let mean_ms = times.iter().sum::<f64>() / times.len().max(1) as f64;
    times.sort_by(f64::total_cmp);
    let ranks: Vec<Option<usize>> = outcomes.iter().map(|o| o.mate_rank).collect();
    Ok(EvalReport {
        version: REPORT_VERSION,
        backend: backend.name().to_string(),
        gallery_size: gallery.len(),
        probes: included.len(),
        excluded,
        cmc: cmc(&ranks, cfg.max_rank),
        tar_at_far: cfg
            .fars
            .iter()
            .map(|&f| tar_at_far(&genuine, &imposter, f))
            .collect(),
        latency: Latency {
            mean_ms,
            p99_ms: percentile(&times, 0.99),
        },
        genuine_scores: genuine.len(),
        imposter_scores: imposter.len(),
        outcomes,
    })
}

/// Fraction of probes whose top-1 ordinal agrees between two runs.
pub fn top1_agreement(a: &EvalReport, b: &EvalReport) -> f64 {
    let same = a
        .outcomes
        .iter()
        .zip(&b.outcomes)
        .filter(|(x, y)| x.top1.is_some() && x.top1 == y.top1)
        .count();
    same as f64 / a.outcomes.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{GalleryRecord, RecordKey};
    use crate::minutiae::MinutiaeSet;
    use crate::template::{Template, DIM};

    #[test]
    fn tar_threshold_arithmetic() {
        let t = tar_at_far(&[0.9, 0.8], &[0.1, 0.2], 0.5);
        assert_eq!(t.tar, 1.0);
        assert_eq!(t.threshold, 0.1);
        let strict = tar_at_far(&[0.9, 0.2], &[0.1, 0.2], 0.0);
        assert_eq!(strict.tar, 0.5);
    }

    #[test]
    fn tar_monotone_in_far() {
        let g: Vec<f64> = (0..100).map(|i| f64::from(i) / 100.0).collect();
        let imp: Vec<f64> = (0..1000).map(|i| f64::from(i) / 1500.0).collect();
        let mut last = -1.0;
        for far in [0.0, 0.001, 0.01, 0.1, 0.5, 1.0] {
            let t = tar_at_far(&g, &imp, far).tar;
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn cmc_by_hand() {
        let c = cmc(&[Some(1), Some(3), None, Some(2)], 3);
        assert_eq!(c, vec![0.25, 0.5, 0.75]);
    }

    fn axis(i: usize, j: usize, c: f32) -> Template {
        let mut v = vec![0.0f32; DIM];
        v[i] = c;
        v[j] = (1.0 - c * c).sqrt();
        Template::new(v).unwrap()
    }

    #[test]
    fn three_record_gallery() {
        // Probe p0 = e0. Gallery: g0 = e1 (cos 0), g1 = 0.6 e0 + 0.8 e1
        // (cos 0.6), g2 = 0.8 e0 + 0.6 e2 (cos 0.8). Mate of p0 is g1, so
        // rank 2; probe p1 = e1 has mate g0 at rank 1 (cos 1 vs 0.8, 0).
        let ts = [axis(1, 2, 1.0), axis(0, 1, 0.6), axis(0, 2, 0.8)];
        let mut g = Gallery::new();
        for (i, t) in ts.iter().enumerate() {
            g.enroll(GalleryRecord {
                key: RecordKey::new(format!("g{i}"), 0).unwrap(),
                template: t.compress(),
                minutiae: None,
            })
            .unwrap();
        }
        let idx = SearchIndex::from_gallery(&g);
        let empty = MinutiaeSet::empty(448, 448).unwrap();
        let probe = |t: Template, mate: &str| Probe {
            mate: RecordKey::new(mate, 0).unwrap(),
            template: t,
            minutiae: empty.clone(),
        };
        let probes = vec![
            probe(axis(0, 1, 1.0), "g1"),
            probe(axis(1, 0, 1.0), "g0"),
            probe(axis(0, 1, 1.0), "missing"),
        ];
        let backend = ExactBackend {
            gallery: &g,
            index: &idx,
            shards: 1,
        };
        let cfg = EvalConfig {
            max_rank: 3,
            imposters_per_probe: 4,
            ..EvalConfig::default()
        };
        let r = evaluate(&backend, &probes, &cfg).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.probes, 2);
        assert_eq!(r.cmc, vec![0.5, 1.0, 1.0]);
        assert_eq!(r.outcomes[0].top1, Some(2));
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["version"], 1);
        assert_eq!(json["backend"], "exact");
    }

    #[test]
    fn identical_probe_is_rank_one() {
        let data = crate::synth::generate(&crate::synth::SynthConfig {
            identities: 40,
            probes: 10,
            noise_sigma: 0.0,
            ..Default::default()
        })
        .unwrap();
        let idx = SearchIndex::from_gallery(&data.gallery);
        let backend = ExactBackend {
            gallery: &data.gallery,
            index: &idx,
            shards: 2,
        };
        let r = evaluate(&backend, &data.probes, &EvalConfig::default()).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
    }

    #[test]
    fn imposters_exclude_mate() {
        let o = imposter_ordinals(3, 1, 200, 5, 0);
        assert!(o.iter().all(|&x| x != 1 && x < 3));
        assert_eq!(o, imposter_ordinals(3, 1, 200, 5, 0));
        assert!(imposter_ordinals(1, 0, 10, 0, 0).is_empty());
    }
}
