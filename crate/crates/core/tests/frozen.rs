use rankprobe::evaluation::{evaluate, transfer_evaluate, DEFAULT_CONFIDENCE};
use rankprobe::geometry::DistanceKind;
use rankprobe::order::OrderTrainConfig;
use rankprobe::preference::BTTrainConfig;
use rankprobe::probe::{Probe, ProbeFamily};
use rankprobe::synthetic::{gen_planted_order, gen_planted_preference, pair_archive, ranked_archive};
use rankprobe::synthetic::{PlantedOrderSpec, PlantedPreferenceSpec};

#[test]
fn evaluation_leaves_the_probe_untouched() {
    let data = gen_planted_order(&PlantedOrderSpec::new(16, 5, 30, 0.05, 2)).unwrap();
    let archive = ranked_archive("m", "t", 0, &data).unwrap();
    let slice = archive.slice_layer(0, None).unwrap();
    let family = ProbeFamily::Order {
        kind: DistanceKind::Cosine,
        cfg: OrderTrainConfig {
            probe_dim: 4,
            epochs: 10,
            ..OrderTrainConfig::default()
        },
    };
    let probe = family.train_slice(&slice).unwrap();
    let before = probe.fingerprint();
    let first = evaluate(&probe, &slice, 1, DEFAULT_CONFIDENCE).unwrap();
    let second = evaluate(&probe, &slice, 1, DEFAULT_CONFIDENCE).unwrap();
    assert_eq!(probe.fingerprint(), before);
    assert_eq!(first.value.to_bits(), second.value.to_bits());
}

#[test]
fn transfer_onto_the_training_task_matches_in_task_evaluation() {
    let pairs = gen_planted_preference(&PlantedPreferenceSpec::new(12, 120, 1.0, 0.1, 4)).unwrap();
    let archive = pair_archive("m", "t", 0, &pairs).unwrap();
    let slice = archive.slice_layer(0, None).unwrap();
    let probe = ProbeFamily::BradleyTerry(BTTrainConfig::default()).train_slice(&slice).unwrap();
    let in_task = evaluate(&probe, &slice, 8, DEFAULT_CONFIDENCE).unwrap();
    let transfer = transfer_evaluate(&probe, &slice, 8, DEFAULT_CONFIDENCE).unwrap();
    assert_eq!(in_task.value.to_bits(), transfer.value.to_bits());
    assert_eq!(in_task.n, transfer.n);
}

#[test]
fn saved_probes_reload_bit_exact() {
    let pairs = gen_planted_preference(&PlantedPreferenceSpec::new(8, 60, 1.0, 0.0, 6)).unwrap();
    let slice = pair_archive("m", "t", 3, &pairs).unwrap().slice_layer(3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["bt", "max-margin", "concat-lr", "weat"] {
        let family = ProbeFamily::from_name(name).unwrap();
        let probe = family.train_slice(&slice).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        probe.save(&path).unwrap();
        let back = Probe::load(&path).unwrap();
        assert_eq!(back.fingerprint(), probe.fingerprint(), "{name}");
        assert_eq!(back.kind(), probe.kind());
    }
}
