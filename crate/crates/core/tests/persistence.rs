use counterseg::datagen::{compose_dataset, DataConfig, Recipe};
use counterseg::dataset::{load_bundle, save_bundle, Kind, Split};
use counterseg::trainer::{load_network, save_network, MaskingNetwork, NetConfig};
use tensorcore::Tensor;

fn small(recipe: Recipe) -> DataConfig {
    DataConfig { recipe, size: 16, composites_per_family: 6, backgrounds_per_family: 5, ..Default::default() }
}

#[test]
fn bundles_round_trip_exactly() {
    for recipe in [Recipe::Toy, Recipe::Sas] {
        let ds = compose_dataset(&small(recipe), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_bundle(&ds, dir.path()).unwrap();
        assert!(!files.is_empty());
        assert_eq!(load_bundle(dir.path()).unwrap(), ds);
    }
}

#[test]
fn composition_depends_only_on_the_seed() {
    let cfg = small(Recipe::Toy);
    let a = compose_dataset(&cfg, 5).unwrap();
    assert_eq!(a, compose_dataset(&cfg, 5).unwrap());
    assert_ne!(a, compose_dataset(&cfg, 6).unwrap());
    assert_eq!(a.records.len(), 4 * (6 + 5));
    for split in [Split::Train, Split::Val, Split::Test] {
        assert!(a.count(Kind::Composite, split) > 0, "{split:?} has no composites");
    }
    for rec in a.select(Kind::Composite, Split::Train) {
        let mask = rec.mask.as_ref().unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(mask.data().contains(&1.0));
        assert!(rec.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn saved_networks_predict_identically() {
    let cfg = NetConfig { channels: vec![4, 8], ..Default::default() };
    let net = MaskingNetwork::new(&cfg, 1, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_network(dir.path(), &net).unwrap();
    let back = load_network(dir.path()).unwrap();
    assert_eq!(back.params, net.params);
    let x = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i % 9) as f32 / 9.0);
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn corrupted_weights_are_rejected() {
    let net = MaskingNetwork::new(&NetConfig { channels: vec![2, 4], ..Default::default() }, 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_network(dir.path(), &net).unwrap();
    let first = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "tsr"))
        .unwrap();
    let mut bytes = std::fs::read(&first).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&first, bytes).unwrap();
    assert!(load_network(dir.path()).is_err());
}
