mod common;

use common::rng;
use gcapsnet::data_io::{
    load_idx, load_idx_split, shift_image, synthetic_dataset, write_idx_images, write_idx_labels, DataError, Dataset, Split,
};
use gcapsnet::network::{load_checkpoint, save_checkpoint, ArchConfig, Model, NetError};
use gcapsnet::routing::RoutingConfig;
use gcapsnet::tensor::Tensor;
use rand::Rng;

fn byte_dataset(n: usize, h: usize, w: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let pixels = (0..n * h * w).map(|_| r.random_range(0..=255u8) as f64 / 255.0).collect();
    let labels = (0..n).map(|_| r.random_range(0..10)).collect();
    Dataset::new("fixture", Split::Test, 10, Tensor::new(&[n, 1, h, w], pixels).unwrap(), labels).unwrap()
}

#[test]
fn idx_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img"), dir.path().join("lbl"));
    let data = byte_dataset(17, 5, 7, 1);
    write_idx_images(&images, &data).unwrap();
    write_idx_labels(&labels, data.labels()).unwrap();
    let back = load_idx_split(&images, &labels, "fixture", Split::Test, 10).unwrap();
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.image_shape(), (1, 5, 7));
    assert_eq!(back.images().data(), data.images().data());

    // rewriting the loaded set reproduces the files byte for byte
    let (images2, labels2) = (dir.path().join("img2"), dir.path().join("lbl2"));
    write_idx_images(&images2, &back).unwrap();
    write_idx_labels(&labels2, back.labels()).unwrap();
    assert_eq!(std::fs::read(&images).unwrap(), std::fs::read(&images2).unwrap());
    assert_eq!(std::fs::read(&labels).unwrap(), std::fs::read(&labels2).unwrap());
}

#[test]
fn idx_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img"), dir.path().join("lbl"));
    let data = byte_dataset(4, 3, 3, 2);
    write_idx_images(&images, &data).unwrap();
    write_idx_labels(&labels, data.labels()).unwrap();
    let good_images = std::fs::read(&images).unwrap();
    let good_labels = std::fs::read(&labels).unwrap();

    // labels file passed as images
    assert!(matches!(load_idx(&labels, &labels), Err(DataError::BadMagic { .. })));

    std::fs::write(&images, &good_images[..good_images.len() - 2]).unwrap();
    match load_idx(&images, &labels) {
        Err(DataError::Truncated { needed, available, .. }) => assert!(needed > available),
        other => panic!("{other:?}"),
    }
    std::fs::write(&images, &good_images).unwrap();

    write_idx_labels(&labels, &data.labels()[..3]).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(DataError::CountMismatch { image_count: 4, label_count: 3, .. })));

    let mut bad = good_labels.clone();
    bad[8] = 12;
    std::fs::write(&labels, &bad).unwrap();
    match load_idx(&images, &labels) {
        Err(DataError::LabelOutOfRange { offset, label, .. }) => assert_eq!((offset, label), (8, 12)),
        other => panic!("{other:?}"),
    }

    let missing = dir.path().join("missing");
    assert!(matches!(load_idx(&missing, &labels), Err(DataError::Io { .. })));
}

#[test]
fn shifting_there_and_back_keeps_the_interior() {
    let data = synthetic_dataset(3, 10, 10).unwrap();
    let image = data.image(0);
    let there = shift_image(image, (1, 28, 28), 2, -1);
    let back = shift_image(&there, (1, 28, 28), -2, 1);
    for y in 1..27 {
        for x in 0..26 {
            assert_eq!(back[y * 28 + x], image[y * 28 + x]);
        }
    }
}

#[test]
fn checkpoint_round_trip_restores_every_bit() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig {
        stem_channels: 4,
        primary_types: 4,
        decoder_hidden: (8, 16),
        ..ArchConfig::default()
    };
    for config in RoutingConfig::all() {
        let path = dir.path().join(format!("{config}.gcaps"));
        let model = Model::new(arch, config, 9).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, arch);
        assert_eq!(loaded.routing, config);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let path = dir.path().join("alg1.gcaps");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(NetError::BadMagic { .. })));
}
