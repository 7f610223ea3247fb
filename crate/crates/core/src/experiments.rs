//! Reproducible experiments driven by JSON manifests.
//!
//! A manifest names an experiment kind, its configuration and seed, and the
//! expected metrics with their bounds. [`run_experiment`] measures the
//! metrics and compares them against the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, imposter_ordinals, tar_at_far, top1_agreement, EvalConfig, ExactBackend, PqBackend};
use crate::gallery::Gallery;
use crate::matcher::{minutiae_score, MatchConfig};
use crate::minutiae::{decode_map, encode_map, orientation_diff, DecodeOptions, EncodeOptions, MinutiaeSet, MAP_SIZE};
use crate::pq::{PqIndex, TrainConfig};
use crate::rerank::{fuse, FusionConfig, Normalization, Retriever};
use crate::search::SearchIndex;
use crate::synth::{generate, identity_key, random_templates, random_unit, well_separated_set, SynthConfig};
use crate::template::{cosine_score, integer_score};

pub const MANIFEST_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "==")]
    Eq,
}

impl Op {
    pub fn holds(self, observed: f64, expected: f64) -> bool {
        match self {
            Op::Le => observed <= expected,
            Op::Lt => observed < expected,
            Op::Ge => observed >= expected,
            Op::Gt => observed > expected,
            Op::Eq => observed == expected,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Le => "<=",
            Op::Lt => "<",
            Op::Ge => ">=",
            Op::Gt => ">",
            Op::Eq => "==",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub metric: String,
    pub op: Op,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub synth: SynthConfig,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
}

fn default_max_rank() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    Compression {
        pairs: usize,
        benchmark: Benchmark,
    },
    IntegerScore {
        pairs: usize,
    },
    SearchOracle {
        trials: usize,
        gallery: usize,
        ks: Vec<usize>,
        shards: Vec<usize>,
    },
    Throughput {
        gallery: usize,
        queries: usize,
        k: usize,
        threads: usize,
    },
    Pq {
        benchmark: Benchmark,
        m: usize,
        z: usize,
        latency_gallery: usize,
        latency_queries: usize,
        k: usize,
    },
    MinutiaeMap {
        sets: usize,
        count_range: (usize, usize),
    },
    Rerank {
        benchmark: Benchmark,
        k: usize,
        normalization: Normalization,
    },
    Fusion {
        synth: SynthConfig,
        imposters_per_probe: usize,
        far: f64,
    },
    Formats {
        records: usize,
        m: usize,
        z: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub version: u16,
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub expected: Vec<Expectation>,
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::parse(0, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn expectation(&self, metric: &str) -> Option<&Expectation> {
        self.expected.iter().find(|e| e.metric == metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub observed: f64,
    pub op: Op,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub passed: bool,
    pub rows: Vec<MetricRow>,
    /// Every measured metric, including ones without an expectation.
    pub metrics: BTreeMap<String, f64>,
}

fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.6}")
    }
}

impl ExperimentOutcome {
    pub fn table(&self) -> String {
        let mut out = format!("experiment {}: {}\n", self.name, if self.passed { "pass" } else { "FAIL" });
        let _ = writeln!(out, "{:<28} {:>14} {:>4} {:>14}  result", "metric", "observed", "op", "expected");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>14} {:>4} {:>14}  {}",
                r.metric,
                num(r.observed),
                r.op.symbol(),
                num(r.expected),
                if r.pass { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

pub fn run_experiment(manifest: &ExperimentManifest) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let seed = manifest.seed;
    let mut metrics = match &manifest.config {
        ExperimentConfig::Compression { pairs, benchmark } => compression(*pairs, benchmark, seed)?,
        ExperimentConfig::IntegerScore { pairs } => integer_domain(*pairs, seed),
        ExperimentConfig::SearchOracle { trials, gallery, ks, shards } => {
            search_oracle(*trials, *gallery, ks, shards, seed)?
        }
        ExperimentConfig::Throughput { gallery, queries, k, threads } => {
            throughput(*gallery, *queries, *k, *threads, seed)?
        }
        ExperimentConfig::Pq { benchmark, m, z, latency_gallery, latency_queries, k } => {
            pq_recall(benchmark, *m, *z, *latency_gallery, *latency_queries, *k, seed)?
        }
        ExperimentConfig::MinutiaeMap { sets, count_range } => minutiae_map(*sets, *count_range, seed)?,
        ExperimentConfig::Rerank { benchmark, k, normalization } => {
            rerank_gain(benchmark, *k, *normalization, seed)?
        }
        ExperimentConfig::Fusion { synth, imposters_per_probe, far } => {
            fusion(synth, *imposters_per_probe, *far, seed)?
        }
        ExperimentConfig::Formats { records, m, z } => formats(*records, *m, *z, seed)?,
    };
    metrics.insert("runtime_s".into(), start.elapsed().as_secs_f64());

    let mut rows = Vec::with_capacity(manifest.expected.len());
    for e in &manifest.expected {
        let observed = *metrics.get(&e.metric).ok_or_else(|| {
            Error::Config(format!("experiment {} does not report metric {}", manifest.name, e.metric))
        })?;
        rows.push(MetricRow {
            metric: e.metric.clone(),
            observed,
            op: e.op,
            expected: e.value,
            pass: e.op.holds(observed, e.value),
        });
    }
    Ok(ExperimentOutcome {
        name: manifest.name.clone(),
        passed: rows.iter().all(|r| r.pass),
        rows,
        metrics,
    })
}

type Metrics = BTreeMap<String, f64>;

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> Metrics {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn seeded(b: &Benchmark, seed: u64) -> SynthConfig {
    SynthConfig { seed, ..b.synth.clone() }
}

fn eval_config(b: &Benchmark, seed: u64) -> EvalConfig {
    EvalConfig {
        max_rank: b.max_rank,
        imposters_per_probe: 20,
        seed,
        ..EvalConfig::default()
    }
}

fn compression(pairs: usize, bench: &Benchmark, seed: u64) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_delta = 0f64;
    for _ in 0..pairs {
        let (a, b) = (random_unit(&mut rng), random_unit(&mut rng));
        let exact = cosine_score(&a, &b).value;
        let round = cosine_score(&a.compress().decompress(), &b.compress().decompress()).value;
        max_delta = max_delta.max((exact - round).abs());
    }

    let data = generate(&seeded(bench, seed))?;
    let cfg = eval_config(bench, seed);
    let raw = SearchIndex::from_templates(&data.raw_templates, data.gallery.keys())?;
    let compressed = SearchIndex::from_gallery(&data.gallery);
    let r_raw = evaluate(&ExactBackend { gallery: &data.gallery, index: &raw, shards: 1 }, &data.probes, &cfg)?;
    let r_cmp = evaluate(
        &ExactBackend { gallery: &data.gallery, index: &compressed, shards: 1 },
        &data.probes,
        &cfg,
    )?;
    Ok(metrics([
        ("max_cosine_delta", max_delta),
        ("raw_rank1", r_raw.rank(1)),
        ("compressed_rank1", r_cmp.rank(1)),
        ("rank1_delta_pp", 100.0 * (r_raw.rank(1) - r_cmp.rank(1)).abs()),
    ]))
}

fn integer_domain(pairs: usize, seed: u64) -> Metrics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0f64;
    for _ in 0..pairs {
        let (a, b) = (random_unit(&mut rng).compress(), random_unit(&mut rng).compress());
        let int = integer_score(&a, &b).value;
        let float = cosine_score(&a.decompress(), &b.decompress()).value;
        max_diff = max_diff.max((int - float).abs());
    }
    metrics([("max_abs_diff", max_diff)])
}

fn search_oracle(trials: usize, n: usize, ks: &[usize], shards: &[usize], seed: u64) -> Result<Metrics> {
    if ks.is_empty() || shards.is_empty() {
        return Err(Error::Config("search-oracle needs ks and shards".into()));
    }
    let mut mismatches = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let mut ts = random_templates(n, seed.wrapping_add(t as u64 + 1));
        // Duplicate rows create exact score ties for the ordinal tie-break.
        for _ in 0..n / 100 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            ts[b] = ts[a].clone();
        }
        let keys = (0..n).map(identity_key).collect();
        let idx = SearchIndex::from_templates(&ts, keys)?;
        let probe = random_unit(&mut rng);
        let k = ks[t % ks.len()];
        let scores = idx.score_all(&probe);
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        oracle.truncate(k);
        for &s in shards {
            let got: Vec<usize> = idx.search_hits(&probe, k, s).iter().map(|h| h.ordinal).collect();
            if got != oracle {
                mismatches += 1;
            }
        }
    }
    Ok(metrics([
        ("mismatches", mismatches as f64),
        ("comparisons", (trials * shards.len()) as f64),
    ]))
}

fn time_queries<F: FnMut(usize)>(queries: usize, mut f: F) -> (f64, f64) {
    let mut times: Vec<f64> = (0..queries)
        .map(|q| {
            let t = Instant::now();
            f(q);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean = times.iter().sum::<f64>() / queries.max(1) as f64;
    times.sort_by(f64::total_cmp);
    let p99 = times[((0.99 * queries as f64).ceil() as usize).clamp(1, queries) - 1];
    (mean, p99)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn throughput(n: usize, queries: usize, k: usize, threads: usize, seed: u64) -> Result<Metrics> {
    if queries == 0 {
        return Err(Error::Config("throughput needs at least one query".into()));
    }
    let ts = random_templates(n, seed);
    let idx = SearchIndex::from_templates(&ts, (0..n).map(identity_key).collect())?;
    drop(ts);
    let probes = random_templates(queries, seed ^ 0x5eed);
    let single = pool(1)?;
    let (mean1, p99_1) = single.install(|| time_queries(queries, |q| {
        std::hint::black_box(idx.search_hits(&probes[q], k, 1));
    }));
    let multi = pool(threads)?;
    let (mean_n, p99_n) = multi.install(|| time_queries(queries, |q| {
        std::hint::black_box(idx.search_hits(&probes[q], k, threads));
    }));
    Ok(metrics([
        ("mean_ms_single", mean1),
        ("p99_ms_single", p99_1),
        ("mean_ms_threads", mean_n),
        ("p99_ms_threads", p99_n),
        ("speedup", mean1 / mean_n),
        ("available_cores", std::thread::available_parallelism().map_or(1, |c| c.get()) as f64),
    ]))
}

fn pq_recall(
    bench: &Benchmark,
    m: usize,
    z: usize,
    latency_n: usize,
    latency_queries: usize,
    k: usize,
    seed: u64,
) -> Result<Metrics> {
    let data = generate(&seeded(bench, seed))?;
    let exact = SearchIndex::from_gallery(&data.gallery);
    let train = TrainConfig {
        m,
        z,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let pq = PqIndex::build_from_gallery(&data.gallery, &train)?;
    let train_s = t.elapsed().as_secs_f64();

    // Distance identity on the first probes against every record.
    let mut identity_err = 0f64;
    let q = pq.quantizer();
    let recon: Vec<Vec<f32>> = (0..pq.len()).map(|r| q.reconstruct(pq.code(r))).collect();
    for p in data.probes.iter().take(10) {
        for (r, d) in pq.distances(&p.template).into_iter().enumerate() {
            let naive: f64 = p
                .template
                .as_slice()
                .iter()
                .zip(&recon[r])
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum();
            identity_err = identity_err.max((d - naive).abs());
        }
    }
    drop(recon);

    let cfg = eval_config(bench, seed);
    let r_exact = evaluate(&ExactBackend { gallery: &data.gallery, index: &exact, shards: 1 }, &data.probes, &cfg)?;
    let r_pq = evaluate(&PqBackend { gallery: &data.gallery, index: &pq, shards: 1 }, &data.probes, &cfg)?;
    let quantizer = pq.quantizer().clone();
    drop((data, exact, pq));

    let ts = random_templates(latency_n, seed ^ 0x1a7e);
    let big_exact = SearchIndex::from_templates(&ts, (0..latency_n).map(identity_key).collect())?;
    let mut big_pq = PqIndex::new(quantizer);
    big_pq.add(&ts);
    drop(ts);
    let probes = random_templates(latency_queries, seed ^ 0x9e);
    let single = pool(1)?;
    let (exact_ms, _) = single.install(|| time_queries(latency_queries, |i| {
        std::hint::black_box(big_exact.search_hits(&probes[i], k, 1));
    }));
    let (pq_ms, _) = single.install(|| time_queries(latency_queries, |i| {
        std::hint::black_box(big_pq.search_hits(&probes[i], k, 1));
    }));

    Ok(metrics([
        ("distance_identity_max_err", identity_err),
        ("exact_rank1", r_exact.rank(1)),
        ("pq_rank1", r_pq.rank(1)),
        ("rank1_drop_pp", 100.0 * (r_exact.rank(1) - r_pq.rank(1))),
        ("top1_recall", top1_agreement(&r_exact, &r_pq)),
        ("train_s", train_s),
        ("exact_mean_ms", exact_ms),
        ("pq_mean_ms", pq_ms),
        ("latency_ratio", pq_ms / exact_ms),
    ]))
}

fn minutiae_map(sets: usize, range: (usize, usize), seed: u64) -> Result<Metrics> {
    let enc = EncodeOptions::default();
    let dec = DecodeOptions::default();
    let (tol_px, tol_angle) = (1.0f32, std::f64::consts::PI / 12.0);
    let min_dist = (4.0 * enc.sigma_s) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut recovered, mut spurious) = (0usize, 0usize, 0usize);
    let (mut superposition, mut permutation) = (true, true);
    for _ in 0..sets {
        let n = rng.random_range(range.0..=range.1);
        let set = well_separated_set(&mut rng, n, MAP_SIZE, 8.0, min_dist);
        let map = encode_map(&set, &enc)?;
        let out = decode_map(&map, &dec)?;
        let close = |a: &crate::minutiae::Minutia, b: &crate::minutiae::Minutia| {
            (a.x - b.x).hypot(a.y - b.y) <= tol_px
                && orientation_diff(f64::from(a.theta), f64::from(b.theta)) <= tol_angle
        };
        total += set.len();
        recovered += set
            .minutiae()
            .iter()
            .filter(|p| out.minutiae().iter().any(|q| close(p, q)))
            .count();
        spurious += out
            .minutiae()
            .iter()
            .filter(|q| !set.minutiae().iter().any(|p| (p.x - q.x).hypot(p.y - q.y) <= tol_px))
            .count();

        let cut = rng.random_range(0..=set.len());
        let a = MinutiaeSet::new(MAP_SIZE, MAP_SIZE, set.minutiae()[..cut].to_vec())?;
        let b = MinutiaeSet::new(MAP_SIZE, MAP_SIZE, set.minutiae()[cut..].to_vec())?;
        superposition &= encode_map(&a, &enc)?.add(&encode_map(&b, &enc)?)? == map;
        let mut shuffled = set.minutiae().to_vec();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        permutation &= encode_map(&MinutiaeSet::new(MAP_SIZE, MAP_SIZE, shuffled)?, &enc)? == map;
    }
    Ok(metrics([
        ("recovery_rate", recovered as f64 / total.max(1) as f64),
        ("spurious", spurious as f64),
        ("superposition_exact", f64::from(u8::from(superposition))),
        ("permutation_exact", f64::from(u8::from(permutation))),
    ]))
}

fn rerank_gain(bench: &Benchmark, k: usize, normalization: Normalization, seed: u64) -> Result<Metrics> {
    let data = generate(&seeded(bench, seed))?;
    let exact = SearchIndex::from_gallery(&data.gallery);
    let retriever = Retriever::new(&data.gallery, Some(&exact), None)?;
    let cfg = FusionConfig {
        k,
        normalization,
        ..FusionConfig::default()
    };
    let (mut stage1_hits, mut fused_hits, mut eligible, mut demotions) = (0usize, 0usize, 0usize, 0usize);
    for p in &data.probes {
        let first = retriever.stage1(&p.template, &cfg)?;
        let m = retriever.minutiae_scores(&p.minutiae, &first, &cfg);
        let top_is_mate = first.items.first().is_some_and(|c| c.key == p.mate);
        let mate_m_max = top_is_mate && m.iter().all(|&x| x <= m[0]);
        let fused = fuse(first, m, normalization);
        let fused_is_mate = fused.items.first().is_some_and(|c| c.key == p.mate);
        stage1_hits += usize::from(top_is_mate);
        fused_hits += usize::from(fused_is_mate);
        if mate_m_max {
            eligible += 1;
            demotions += usize::from(!fused_is_mate);
        }
    }
    let n = data.probes.len().max(1) as f64;
    Ok(metrics([
        ("exact_rank1", stage1_hits as f64 / n),
        ("rerank_rank1", fused_hits as f64 / n),
        ("rank1_gain_pp", 100.0 * (fused_hits as f64 - stage1_hits as f64) / n),
        ("protected_probes", eligible as f64),
        ("demotions", demotions as f64),
    ]))
}

fn fusion(synth: &SynthConfig, imposters: usize, far: f64, seed: u64) -> Result<Metrics> {
    let data = generate(&SynthConfig { seed, ..synth.clone() })?;
    let recs = data.gallery.records();
    let matcher = MatchConfig::default();
    let score = |p: &crate::synth::Probe, o: usize| {
        let g = &recs[o];
        let t = cosine_score(&p.template, &g.template.decompress()).value;
        let m = minutiae_score(&p.minutiae, g.minutiae.as_ref().expect("synthetic records carry minutiae"), &matcher);
        (t, m)
    };
    let (mut gen_t, mut gen_m, mut imp_t, mut imp_m) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (j, p) in data.probes.iter().enumerate() {
        let mate = data.gallery.ordinal_of(&p.mate).expect("probe mates are enrolled");
        let (t, m) = score(p, mate);
        gen_t.push(t);
        gen_m.push(m);
        for o in imposter_ordinals(recs.len(), mate, imposters, seed, j) {
            let (t, m) = score(p, o);
            imp_t.push(t);
            imp_m.push(m);
        }
    }
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let tar_t = tar_at_far(&gen_t, &imp_t, far).tar;
    let tar_m = tar_at_far(&gen_m, &imp_m, far).tar;
    let tar_f = tar_at_far(&sum(&gen_t, &gen_m), &sum(&imp_t, &imp_m), far).tar;
    Ok(metrics([
        ("template_tar", tar_t),
        ("minutiae_tar", tar_m),
        ("fused_tar", tar_f),
        ("fused_minus_best", tar_f - tar_t.max(tar_m)),
        ("imposter_pairs", imp_t.len() as f64),
    ]))
}

fn formats(records: usize, m: usize, z: usize, seed: u64) -> Result<Metrics> {
    let data = generate(&SynthConfig {
        identities: records,
        probes: 0,
        seed,
        ..SynthConfig::default()
    })?;
    let dir = std::env::temp_dir().join(format!("fpindex-formats-{}-{seed}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result = (|| -> Result<Metrics> {
        let gpath = dir.join("gallery.dpgl");
        data.gallery.save(&gpath)?;
        let g2 = Gallery::load(&gpath)?;
        let gallery_identical = g2 == data.gallery && g2.to_bytes() == std::fs::read(&gpath).map_err(|e| Error::io(&gpath, e))?;

        let train = TrainConfig { m, z, seed, ..TrainConfig::default() };
        let pq = PqIndex::build_from_gallery(&data.gallery, &train)?;
        let ppath = dir.join("index.dppq");
        pq.save(&ppath)?;
        let p2 = PqIndex::load(&ppath)?;
        let pq_bytes = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let pq_identical = p2 == pq && p2.to_bytes() == pq_bytes;

        // A gallery of one extra record grows by exactly one code row.
        let mut extra = PqIndex::new(pq.quantizer().clone());
        extra.add(&data.gallery.decompressed());
        extra.add(&data.gallery.decompressed()[..1]);
        let row = extra.to_bytes().len() - pq_bytes.len();

        Ok(metrics([
            ("gallery_identical", f64::from(u8::from(gallery_identical))),
            ("pq_identical", f64::from(u8::from(pq_identical))),
            ("template_bytes", data.gallery.records()[0].template.to_bytes().len() as f64),
            ("pq_code_bytes", row as f64),
        ]))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
