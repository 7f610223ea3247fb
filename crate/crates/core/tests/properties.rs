use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpindex::eval::cmc;
use fpindex::gallery::{Gallery, GalleryRecord, RecordKey};
use fpindex::matcher::{minutiae_score, rigid_transform, MatchConfig};
use fpindex::minutiae::{encode_map, EncodeOptions, Minutia, MinutiaeSet, IMAGE_SIZE};
use fpindex::pq::{ProductQuantizer, TrainConfig};
use fpindex::rerank::{fuse, Normalization};
use fpindex::search::SearchIndex;
use fpindex::synth::{random_templates, well_separated_set};
use fpindex::template::Template;

fn keys(n: usize) -> Vec<RecordKey> {
    (0..n).map(|i| RecordKey::new(format!("id{i}"), (i % 10) as u8).unwrap()).collect()
}

/// Random templates where every `dup`-th one repeats its predecessor, so ties occur.
fn templates_with_ties(n: usize, seed: u64, dup: usize) -> Vec<Template> {
    let mut ts = random_templates(n, seed);
    for i in (1..n).step_by(dup.max(1)) {
        ts[i] = ts[i - 1].clone();
    }
    ts
}

fn minutiae_strategy(size: u32, max: usize) -> impl Strategy<Value = MinutiaeSet> {
    let s = size as f32;
    prop::collection::vec((0.0f32..s, 0.0f32..s, 0.0f32..6.28), 0..max).prop_map(move |v| {
        let ms = v.into_iter().map(|(x, y, t)| Minutia::new(x, y, t)).collect();
        MinutiaeSet::new(size, size, ms).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn topk_matches_full_sort(n in 1usize..400, k in 1usize..60, seed in any::<u64>(), dup in 2usize..6, shards in 1usize..9) {
        let ts = templates_with_ties(n, seed, dup);
        let index = SearchIndex::from_templates(&ts, keys(n)).unwrap();
        let probe = &random_templates(1, seed ^ 0xabc)[0];
        let scores = index.score_all(probe);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        let got = index.search_topk(probe, k, shards).unwrap();
        prop_assert_eq!(got.ordinals(), order);
        prop_assert_eq!(&got, &index.search_topk(probe, k, 1).unwrap());
    }

    #[test]
    fn gallery_bytes_round_trip(n in 0usize..30, seed in any::<u64>(), with_minutiae in any::<bool>()) {
        let ts = random_templates(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Gallery::new();
        for (i, (t, key)) in ts.iter().zip(keys(n)).enumerate() {
            let minutiae = (with_minutiae && i % 2 == 0)
                .then(|| well_separated_set(&mut rng, 5 + i % 7, IMAGE_SIZE, 8.0, 10.0));
            g.enroll(GalleryRecord { key, template: t.compress(), minutiae }).unwrap();
        }
        let bytes = g.to_bytes();
        let back = Gallery::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), n);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, g);
    }

    #[test]
    fn map_superposition_and_permutation(a in minutiae_strategy(448, 20), b in minutiae_strategy(448, 20), rot in 0usize..40) {
        let opts = EncodeOptions::default();
        let mut all = a.minutiae().to_vec();
        all.extend_from_slice(b.minutiae());
        let union = MinutiaeSet::new(448, 448, all.clone()).unwrap();
        let sum = encode_map(&a, &opts).unwrap().add(&encode_map(&b, &opts).unwrap()).unwrap();
        let whole = encode_map(&union, &opts).unwrap();
        prop_assert!(whole.values() == sum.values());

        if !all.is_empty() {
            let r = rot % all.len();
            all.rotate_left(r);
            all.reverse();
        }
        let shuffled = MinutiaeSet::new(448, 448, all).unwrap();
        prop_assert!(encode_map(&shuffled, &opts).unwrap().values() == whole.values());
    }

    #[test]
    fn matcher_score_bounds(p in minutiae_strategy(448, 30), g in minutiae_strategy(448, 30)) {
        let cfg = MatchConfig::default();
        let s = minutiae_score(&p, &g, &cfg);
        prop_assert!((0.0..=1.0).contains(&s));
        if !p.is_empty() {
            prop_assert_eq!(minutiae_score(&p, &p, &cfg), 1.0);
        }
        let empty = MinutiaeSet::empty(448, 448).unwrap();
        prop_assert_eq!(minutiae_score(&p, &empty, &cfg), 0.0);
    }

    #[test]
    fn matcher_rigid_invariance(seed in any::<u64>(), angle in -PI / 3.0..PI / 3.0, tx in -60.0f64..60.0, ty in -60.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Kept near the center so the transform never pushes minutiae out of frame.
        let p = well_separated_set(&mut rng, 25, IMAGE_SIZE, 120.0, 15.0);
        let q = rigid_transform(&p, angle, tx, ty);
        prop_assert_eq!(q.len(), p.len());
        prop_assert!(minutiae_score(&p, &q, &MatchConfig::default()) >= 0.9);
    }

    #[test]
    fn fusion_permutes_stage1(n in 5usize..200, k in 1usize..50, seed in any::<u64>(), minmax in any::<bool>()) {
        let ts = random_templates(n, seed);
        let index = SearchIndex::from_templates(&ts, keys(n)).unwrap();
        let stage1 = index.search_topk(&ts[0], k, 2).unwrap();
        let norm = if minmax { Normalization::MinMax } else { Normalization::None };
        let len = stage1.items.len();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..len).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let fused = fuse(stage1.clone(), scores, norm);
        let mut a = fused.ordinals();
        let mut b = stage1.ordinals();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);

        let constant = fuse(stage1.clone(), vec![0.37; len], norm);
        prop_assert_eq!(constant.ordinals(), stage1.ordinals());
    }

    #[test]
    fn cmc_is_monotone_and_closed(ranks in prop::collection::vec(1usize..80, 1..200)) {
        let as_opt: Vec<Option<usize>> = ranks.iter().map(|&r| Some(r)).collect();
        let curve = cmc(&as_opt, 80);
        prop_assert_eq!(curve.len(), 80);
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pq_distance_is_reconstruction_distance(seed in any::<u64>(), log_z in 2u32..6, m in prop::sample::select(vec![4usize, 8, 16, 32, 64])) {
        let z = 1usize << log_z;
        let train = random_templates(300, seed);
        let cfg = TrainConfig { m, z, seed, max_training_points: None, ..TrainConfig::default() };
        let pq = ProductQuantizer::train(&train, &cfg).unwrap();
        prop_assert_eq!(pq.code_bytes(), m * log_z as usize / 8 + usize::from(m * log_z as usize % 8 != 0));
        let probe = &random_templates(1, seed ^ 1)[0];
        let table = pq.build_table(probe);
        for t in train.iter().take(20) {
            let code = pq.quantize(t);
            let rec = pq.reconstruct(&code);
            let want: f64 = probe
                .as_slice()
                .iter()
                .zip(&rec)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            prop_assert!((table.distance(&code) - want).abs() <= 1e-6);
        }
    }
}
