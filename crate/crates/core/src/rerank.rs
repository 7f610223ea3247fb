//! Two-stage search and sum-score fusion.
//!
//! Stage one retrieves the top `k` gallery records by template similarity
//! (exact cosine or PQ). Stage two re-sorts only those `k` by
//! `minutiae_score + template_score`; records outside the first stage never
//! come back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::matcher::{minutiae_score, MatchConfig};
use crate::minutiae::MinutiaeSet;
use crate::pq::PqIndex;
use crate::search::{Candidate, CandidateList, SearchIndex};
use crate::template::{cosine_score, MatchScore, ScoreKind, Template};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Raw minutiae scores are summed as they are.
    #[default]
    None,
    /// Minutiae scores are min-max scaled over the candidate list first.
    MinMax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1 {
    #[default]
    Exact,
    Pq,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub k: usize,
    pub normalization: Normalization,
    pub backend: Stage1,
    pub matcher: MatchConfig,
    pub shards: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 500,
            normalization: Normalization::None,
            backend: Stage1::Exact,
            matcher: MatchConfig::default(),
            shards: 1,
        }
    }
}

/// Template score on the cosine scale. PQ distances between unit vectors
/// map to cosine through `||p - g||² = 2 - 2 cos`.
pub fn template_similarity(score: &MatchScore) -> f64 {
    match score.kind {
        ScoreKind::PqDistance => 1.0 - score.value / 2.0,
        _ => score.value,
    }
}

/// Gallery plus whichever first-stage indexes are available.
pub struct Retriever<'a> {
    gallery: &'a Gallery,
    exact: Option<&'a SearchIndex>,
    pq: Option<&'a PqIndex>,
}

impl<'a> Retriever<'a> {
    /// Fails unless every gallery record carries a minutiae set and the
    /// indexes cover the gallery.
    pub fn new(
        gallery: &'a Gallery,
        exact: Option<&'a SearchIndex>,
        pq: Option<&'a PqIndex>,
    ) -> Result<Self> {
        if !gallery.has_all_minutiae() {
            return Err(Error::Config(
                "two-stage search needs minutiae for every gallery record".into(),
            ));
        }
        if exact.is_some_and(|e| e.len() != gallery.len())
            || pq.is_some_and(|p| p.len() != gallery.len())
        {
            return Err(Error::Config("index size differs from gallery size".into()));
        }
        Ok(Self { gallery, exact, pq })
    }

    pub fn gallery(&self) -> &Gallery {
        self.gallery
    }

    pub fn stage1(&self, probe: &Template, cfg: &FusionConfig) -> Result<CandidateList> {
        match cfg.backend {
            Stage1::Exact => self
                .exact
                .ok_or_else(|| Error::Config("no exact index loaded".into()))?
                .search_topk(probe, cfg.k, cfg.shards),
            Stage1::Pq => self
                .pq
                .ok_or_else(|| Error::Config("no PQ index loaded".into()))?
                .search_topk(probe, cfg.k, cfg.shards, self.gallery),
        }
    }

    /// Minutiae score of `probe_m` against each candidate, in list order.
    pub fn minutiae_scores(
        &self,
        probe_m: &MinutiaeSet,
        stage1: &CandidateList,
        cfg: &FusionConfig,
    ) -> Vec<f64> {
        stage1
            .items
            .par_iter()
            .map(|c| {
                let g = self.gallery.records()[c.ordinal]
                    .minutiae
                    .as_ref()
                    .expect("checked in Retriever::new");
                minutiae_score(probe_m, g, &cfg.matcher)
            })
            .collect()
    }

    pub fn rerank(
        &self,
        probe_m: &MinutiaeSet,
        stage1: CandidateList,
        cfg: &FusionConfig,
    ) -> CandidateList {
        let m = self.minutiae_scores(probe_m, &stage1, cfg);
        fuse(stage1, m, cfg.normalization)
    }

    pub fn two_stage_search(
        &self,
        probe_t: &Template,
        probe_m: &MinutiaeSet,
        cfg: &FusionConfig,
    ) -> Result<CandidateList> {
        cfg.matcher.validate()?;
        let first = self.stage1(probe_t, cfg)?;
        Ok(self.rerank(probe_m, first, cfg))
    }
}

/// Re-sorts `stage1` by `minutiae + template` score; ties keep the
/// first-stage order.
pub fn fuse(stage1: CandidateList, mut minutiae: Vec<f64>, norm: Normalization) -> CandidateList {
    assert_eq!(minutiae.len(), stage1.items.len());
    if norm == Normalization::MinMax {
        min_max_in_place(&mut minutiae);
    }
    let mut fused: Vec<(f64, usize, Candidate)> = stage1
        .items
        .into_iter()
        .zip(minutiae)
        .enumerate()
        .map(|(pos, (c, m))| (m + template_similarity(&c.score), pos, c))
        .collect();
    fused.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    CandidateList {
        k: stage1.k,
        items: fused
            .into_iter()
            .map(|(s, _, c)| Candidate {
                score: MatchScore::fused(s),
                ..c
            })
            .collect(),
    }
}

/// Scales to `[0, 1]`; a constant list becomes all zeros.
pub fn min_max_in_place(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// 1:1 verification score: cosine plus minutiae score.
pub fn fused_verify(
    probe_t: &Template,
    gallery_t: &Template,
    probe_m: &MinutiaeSet,
    gallery_m: &MinutiaeSet,
    matcher: &MatchConfig,
) -> MatchScore {
    let s = cosine_score(probe_t, gallery_t).value;
    MatchScore::fused(s + minutiae_score(probe_m, gallery_m, matcher))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{GalleryRecord, RecordKey};
    use crate::minutiae::Minutia;
    use crate::template::DIM;

    fn template_at(score: f32) -> Template {
        let mut v = vec![0.0f32; DIM];
        v[0] = score;
        v[1] = (1.0 - score * score).sqrt();
        Template::new(v).unwrap()
    }

    fn probe() -> Template {
        template_at(1.0)
    }

    fn set(points: &[(f32, f32)]) -> MinutiaeSet {
        MinutiaeSet::new(
            448,
            448,
            points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| Minutia::new(x, y, i as f32 * 0.7))
                .collect(),
        )
        .unwrap()
    }

    fn grid_set(offset: f32) -> MinutiaeSet {
        let pts: Vec<(f32, f32)> = (0..20)
            .map(|i| (40.0 + (i % 5) as f32 * 70.0 + offset, 40.0 + (i / 5) as f32 * 90.0))
            .collect();
        set(&pts)
    }

    fn gallery(entries: &[(f32, Option<MinutiaeSet>)]) -> Gallery {
        let mut g = Gallery::new();
        for (i, (s, m)) in entries.iter().enumerate() {
            g.enroll(GalleryRecord {
                key: RecordKey::new(format!("id{i}"), 0).unwrap(),
                template: template_at(*s).compress(),
                minutiae: m.clone(),
            })
            .unwrap();
        }
        g
    }

    #[test]
    fn missing_minutiae_is_config_error() {
        let g = gallery(&[(0.5, None)]);
        let idx = SearchIndex::from_gallery(&g);
        assert!(matches!(
            Retriever::new(&g, Some(&idx), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_minutiae_scores_keep_stage1_order() {
        let empty = MinutiaeSet::empty(448, 448).unwrap();
        let g = gallery(&[
            (0.2, Some(grid_set(0.0))),
            (0.9, Some(grid_set(0.0))),
            (0.5, Some(grid_set(0.0))),
        ]);
        let idx = SearchIndex::from_gallery(&g);
        let r = Retriever::new(&g, Some(&idx), None).unwrap();
        let cfg = FusionConfig {
            k: 10,
            ..FusionConfig::default()
        };
        let first = r.stage1(&probe(), &cfg).unwrap();
        let second = r.two_stage_search(&probe(), &empty, &cfg).unwrap();
        assert_eq!(first.ordinals(), second.ordinals());
        assert_eq!(second.ordinals(), vec![1, 2, 0]);
    }

    #[test]
    fn mate_promoted_by_minutiae() {
        // Mate sits third by template score, within 0.05 of the leader, but
        // is the only strong minutiae match.
        let mate = grid_set(0.0);
        let stranger = set(&[(10.0, 400.0), (420.0, 15.0), (200.0, 30.0)]);
        let g = gallery(&[
            (0.80, Some(stranger.clone())),
            (0.78, Some(stranger.clone())),
            (0.76, Some(mate.clone())),
            (0.50, Some(stranger.clone())),
        ]);
        let idx = SearchIndex::from_gallery(&g);
        let r = Retriever::new(&g, Some(&idx), None).unwrap();
        let cfg = FusionConfig {
            k: 4,
            ..FusionConfig::default()
        };
        let first = r.stage1(&probe(), &cfg).unwrap();
        assert_eq!(first.ordinals()[2], 2);
        let m = &cfg.matcher;
        assert_eq!(minutiae_score(&mate, &mate, m), 1.0);
        assert!(minutiae_score(&mate, &stranger, m) < 0.2);
        let out = r.two_stage_search(&probe(), &mate, &cfg).unwrap();
        assert_eq!(out.items[0].ordinal, 2);
        // Hand-computed fused scores: 1 + 0.76 vs at most 0.2 + 0.80.
        assert!((out.items[0].score.value - 1.76).abs() < 0.01);
        let mut a = first.ordinals();
        let mut b = out.ordinals();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn candidates_outside_k_never_reenter() {
        let mate = grid_set(0.0);
        let g = gallery(&[(0.9, Some(grid_set(100.0))), (0.1, Some(mate.clone()))]);
        let idx = SearchIndex::from_gallery(&g);
        let r = Retriever::new(&g, Some(&idx), None).unwrap();
        let cfg = FusionConfig {
            k: 1,
            ..FusionConfig::default()
        };
        assert_eq!(r.two_stage_search(&probe(), &mate, &cfg).unwrap().ordinals(), vec![0]);
    }

    #[test]
    fn min_max_scaling() {
        let mut v = vec![0.25, 0.75, 0.5];
        min_max_in_place(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        let mut c = vec![0.3, 0.3];
        min_max_in_place(&mut c);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn pq_distance_maps_to_cosine_scale() {
        assert_eq!(template_similarity(&MatchScore::pq_distance(0.0)), 1.0);
        assert_eq!(template_similarity(&MatchScore::pq_distance(2.0)), 0.0);
    }

    #[test]
    fn fused_verify_extremes() {
        let m = grid_set(0.0);
        let cfg = MatchConfig::default();
        let same = fused_verify(&probe(), &probe(), &m, &m, &cfg);
        assert!((same.value - 2.0).abs() < 1e-6);
        assert_eq!(same.kind, ScoreKind::Fused);
        let mut v = vec![0.0f32; DIM];
        v[5] = 1.0;
        let orth = Template::new(v).unwrap();
        let empty = MinutiaeSet::empty(448, 448).unwrap();
        assert!(fused_verify(&probe(), &orth, &m, &empty, &cfg).value.abs() < 1e-9);
        let ab = fused_verify(&probe(), &template_at(0.3), &m, &grid_set(3.0), &cfg).value;
        let ba = fused_verify(&template_at(0.3), &probe(), &grid_set(3.0), &m, &cfg).value;
        assert!((ab - ba).abs() < 1e-9);
    }
}
