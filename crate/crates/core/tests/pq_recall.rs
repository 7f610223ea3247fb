use fpindex::eval::{evaluate, top1_agreement, EvalConfig, ExactBackend, PqBackend};
use fpindex::pq::{PqIndex, TrainConfig};
use fpindex::search::SearchIndex;
use fpindex::synth::{generate, SynthConfig};

/// Fewer centroids per sub-space can only lose top-1 agreement with exact search.
#[test]
fn recall_does_not_increase_as_z_shrinks() {
    let data = generate(&SynthConfig {
        identities: 3000,
        probes: 400,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let eval = EvalConfig {
        max_rank: 10,
        seed: 9,
        ..EvalConfig::default()
    };
    let index = SearchIndex::from_gallery(&data.gallery);
    let exact = evaluate(
        &ExactBackend { gallery: &data.gallery, index: &index, shards: 1 },
        &data.probes,
        &eval,
    )
    .unwrap();

    let mut recalls = Vec::new();
    for z in [16, 64, 256] {
        let cfg = TrainConfig {
            z,
            seed: 9,
            max_training_points: Some(256 * z),
            ..TrainConfig::default()
        };
        let pq = PqIndex::build_from_gallery(&data.gallery, &cfg).unwrap();
        assert_eq!(pq.quantizer().code_bytes(), 64 * z.trailing_zeros() as usize / 8);
        let report = evaluate(
            &PqBackend { gallery: &data.gallery, index: &pq, shards: 1 },
            &data.probes,
            &eval,
        )
        .unwrap();
        recalls.push(top1_agreement(&exact, &report));
    }
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]), "{recalls:?}");
    assert!(recalls[2] >= 0.95, "{recalls:?}");
}
