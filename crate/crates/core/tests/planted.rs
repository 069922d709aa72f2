use rankprobe::evaluation::{mean_spearman, train_test_split};
use rankprobe::geometry::DistanceKind;
use rankprobe::order::{train_order_probe, OrderTrainConfig};
use rankprobe::synthetic::{gen_planted_order, shuffle_gold, PlantedOrderSpec};

fn held_out_rho(kind: DistanceKind, shuffled: bool) -> f64 {
    let spec = PlantedOrderSpec::new(64, 8, 200, 0.0, 11);
    let mut data = gen_planted_order(&spec).unwrap();
    if shuffled {
        shuffle_gold(&mut data, 5);
    }
    let (train, test) = train_test_split(&data, 0.2, 3).unwrap();
    let cfg = OrderTrainConfig {
        seed: 17,
        ..OrderTrainConfig::default()
    };
    let started = std::time::Instant::now();
    let probe = train_order_probe(&train, &cfg, kind).unwrap();
    let rho = mean_spearman(&probe, &test).unwrap();
    eprintln!(
        "{kind:?} shuffled={shuffled}: rho {rho:.4}, loss {:.5}, epochs {}, {:?}",
        probe.train_meta.final_loss,
        probe.train_meta.epochs,
        started.elapsed()
    );
    rho
}

#[test]
fn dot_probe_recovers_planted_order() {
    assert!(held_out_rho(DistanceKind::Dot, false) >= 0.99);
}

#[test]
fn cosine_probe_recovers_planted_order() {
    assert!(held_out_rho(DistanceKind::Cosine, false) >= 0.99);
}

#[test]
fn squared_l2_probe_recovers_planted_order() {
    assert!(held_out_rho(DistanceKind::SquaredL2, false) >= 0.95);
}

#[test]
fn shuffled_gold_is_not_learnable() {
    for kind in DistanceKind::ALL {
        assert!(held_out_rho(kind, true).abs() <= 0.2, "{kind:?}");
    }
}
