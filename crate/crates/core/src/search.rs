//! Exhaustive cosine top-k search over a resident, decompressed gallery.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gallery::{Gallery, RecordKey};
use crate::template::{MatchScore, Template, DIM};
use crate::topk::{Hit, TopK};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub ordinal: usize,
    pub key: RecordKey,
    pub score: MatchScore,
}

/// Candidates best first; `items.len() == min(k, N)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateList {
    pub k: usize,
    pub items: Vec<Candidate>,
}

impl CandidateList {
    pub fn ordinals(&self) -> Vec<usize> {
        self.items.iter().map(|c| c.ordinal).collect()
    }

    /// 1-based rank of `key`, if listed.
    pub fn rank_of(&self, key: &RecordKey) -> Option<usize> {
        self.items.iter().position(|c| &c.key == key).map(|i| i + 1)
    }

    /// Tab-separated `rank subject_id finger_index score` lines, rank from 1.
    pub fn to_tsv(&self) -> String {
        self.items
            .iter()
            .enumerate()
            .map(|(i, c)| {
                format!(
                    "{}\t{}\t{}\t{:.6}\n",
                    i + 1,
                    c.key.subject_id,
                    c.key.finger_index,
                    c.score.value
                )
            })
            .collect()
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Splits `0..n` into `shards` contiguous, nearly equal ranges.
pub(crate) fn shard_ranges(n: usize, shards: usize) -> Vec<Range<usize>> {
    let shards = shards.clamp(1, n.max(1));
    (0..shards)
        .map(|s| (s * n / shards)..((s + 1) * n / shards))
        .collect()
}

/// Row-major matrix of unit templates plus their keys.
#[derive(Clone, Debug)]
pub struct SearchIndex {
    data: Vec<f32>,
    keys: Vec<RecordKey>,
}

impl SearchIndex {
    /// Decompresses every gallery template once.
    pub fn from_gallery(gallery: &Gallery) -> Self {
        let mut data = Vec::with_capacity(gallery.len() * DIM);
        for r in gallery.iter() {
            data.extend_from_slice(r.template.decompress().as_slice());
        }
        Self {
            data,
            keys: gallery.keys(),
        }
    }

    /// Builds an index straight from float templates, skipping compression.
    pub fn from_templates(templates: &[Template], keys: Vec<RecordKey>) -> Result<Self> {
        if templates.len() != keys.len() {
            return Err(Error::invalid("templates and keys differ in length"));
        }
        let mut data = Vec::with_capacity(templates.len() * DIM);
        for t in templates {
            data.extend_from_slice(t.as_slice());
        }
        Ok(Self { data, keys })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[RecordKey] {
        &self.keys
    }

    pub fn row(&self, ordinal: usize) -> &[f32] {
        &self.data[ordinal * DIM..(ordinal + 1) * DIM]
    }

    /// The score `search_topk` ranks by, for one record.
    pub fn score(&self, probe: &Template, ordinal: usize) -> f32 {
        dot_f32(probe.as_slice(), self.row(ordinal))
    }

    pub fn score_all(&self, probe: &Template) -> Vec<f32> {
        self.data
            .chunks_exact(DIM)
            .map(|row| dot_f32(probe.as_slice(), row))
            .collect()
    }

    fn scan(&self, probe: &[f32], range: Range<usize>, k: usize) -> TopK {
        let mut top = TopK::new(k);
        let rows = self.data[range.start * DIM..range.end * DIM].chunks_exact(DIM);
        for (i, row) in rows.enumerate() {
            top.push(Hit {
                ordinal: range.start + i,
                key: dot_f32(probe, row),
            });
        }
        top
    }

    /// Ranked hits; shards are scanned on the current rayon pool.
    pub fn search_hits(&self, probe: &Template, k: usize, shards: usize) -> Vec<Hit> {
        let probe = probe.as_slice();
        let ranges = shard_ranges(self.len(), shards);
        let top = if ranges.len() == 1 {
            self.scan(probe, ranges[0].clone(), k)
        } else {
            ranges
                .into_par_iter()
                .map(|r| self.scan(probe, r, k))
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

    pub fn search_topk(&self, probe: &Template, k: usize, shards: usize) -> Result<CandidateList> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let items = self
            .search_hits(probe, k, shards)
            .into_iter()
            .map(|h| Candidate {
                ordinal: h.ordinal,
                key: self.keys[h.ordinal].clone(),
                score: MatchScore::cosine(f64::from(h.key)),
            })
            .collect();
        Ok(CandidateList { k, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template_with_score(probe_axis: usize, score: f32) -> Template {
        let mut v = vec![0.0f32; DIM];
        v[probe_axis] = score;
        v[DIM - 1] = (1.0 - score * score).sqrt();
        Template::new(v).unwrap()
    }

    fn keys(n: usize) -> Vec<RecordKey> {
        (0..n)
            .map(|i| RecordKey::new(format!("s{i}"), 0).unwrap())
            .collect()
    }

    fn e0() -> Template {
        let mut v = vec![0.0f32; DIM];
        v[0] = 1.0;
        Template::new(v).unwrap()
    }

    #[test]
    fn hand_computed_three_record_gallery() {
        let ts: Vec<Template> = [0.9, 0.1, 0.5]
            .iter()
            .map(|&s| template_with_score(0, s))
            .collect();
        let idx = SearchIndex::from_templates(&ts, keys(3)).unwrap();
        let res = idx.search_topk(&e0(), 2, 1).unwrap();
        assert_eq!(res.ordinals(), vec![0, 2]);
        assert!((res.items[0].score.value - 0.9).abs() < 1e-6);

        let all = idx.search_topk(&e0(), 10, 2).unwrap();
        assert_eq!(all.ordinals(), vec![0, 2, 1]);
        assert_eq!(all.k, 10);
    }

    #[test]
    fn ties_break_by_ordinal() {
        let ts: Vec<Template> = [0.5, 0.7, 0.5, 0.7]
            .iter()
            .map(|&s| template_with_score(0, s))
            .collect();
        let idx = SearchIndex::from_templates(&ts, keys(4)).unwrap();
        for shards in 1..=4 {
            assert_eq!(idx.search_topk(&e0(), 3, shards).unwrap().ordinals(), vec![1, 3, 0]);
        }
    }

    #[test]
    fn empty_gallery_and_bad_k() {
        let idx = SearchIndex::from_gallery(&Gallery::new());
        assert!(idx.search_topk(&e0(), 5, 4).unwrap().items.is_empty());
        assert!(idx.search_topk(&e0(), 0, 1).is_err());
    }

    #[test]
    fn shard_ranges_cover_exactly() {
        for n in [0, 1, 7, 100] {
            for s in [1, 3, 8, 200] {
                let r = shard_ranges(n, s);
                assert_eq!(r.first().unwrap().start, 0);
                assert_eq!(r.last().unwrap().end, n);
                assert!(r.windows(2).all(|w| w[0].end == w[1].start));
            }
        }
    }

    #[test]
    fn tsv_format() {
        let ts = vec![template_with_score(0, 0.5)];
        let idx = SearchIndex::from_templates(&ts, keys(1)).unwrap();
        let out = idx.search_topk(&e0(), 1, 1).unwrap().to_tsv();
        assert_eq!(out, "1\ts0\t0\t0.500000\n");
    }

    #[test]
    fn dot_matches_f64() {
        let a: Vec<f32> = (0..DIM).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..DIM).map(|i| (i as f32 * 0.11).cos()).collect();
        let exact: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot_f32(&a, &b) as f64 - exact).abs() < 1e-4);
    }
}
