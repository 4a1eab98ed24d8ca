use gcapsnet::data_io::{sequential_batches, synthetic_dataset};
use gcapsnet::network::{seeds, ArchConfig, Model, TrainConfig, Trainer};
use gcapsnet::routing::RoutingConfig;

fn small_arch() -> ArchConfig {
    ArchConfig {
        stem_channels: 8,
        primary_types: 8,
        decoder_hidden: (32, 64),
        ..ArchConfig::default()
    }
}

#[test]
fn memorization_loss_falls_for_every_config() {
    let data = synthetic_dataset(11, 32, 10).unwrap();
    let batch = sequential_batches(&data, 32).next().unwrap();
    for config in RoutingConfig::all() {
        let model = Model::new(small_arch(), config, seeds::init(1)).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig::default());
        let losses: Vec<f64> = (0..50).map(|_| trainer.train_step(&batch, 0.001).unwrap().loss).collect();
        // Adam steps may wobble; ten-step window means must fall every time
        let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        assert!(windows.windows(2).all(|p| p[1] < p[0]), "{config}: {windows:?}");
        assert!(losses[49] < losses[0], "{config}: {losses:?}");
    }
}

#[test]
fn identical_seeds_train_identically() {
    let data = synthetic_dataset(12, 24, 10).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        epochs: 1,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::new(small_arch(), RoutingConfig::alg4(), seeds::init(config.seed)).unwrap();
        let mut trainer = Trainer::new(model, config);
        let stats = trainer.train_epoch(&data, 0).unwrap();
        (stats, trainer.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}
