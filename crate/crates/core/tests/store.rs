mod common;

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use repdyn::tensor_io::{open_checkpoint_store, write_manifest, write_tensor, RunManifest, StoreLayout, Tensor};
use repdyn::trainer::EpochGrid;
use repdyn::Error;

/// Grid {0,1,2}, layers {conv1, fc}, `m` probe examples.
fn hand_store(root: &Path, m: usize, label_rows: usize) {
    let layout = StoreLayout::new(root);
    let mut cfg = common::tiny_config(0.0, 2, &[0, 1, 2]);
    cfg.epoch_grid = EpochGrid::new(vec![0, 1, 2]).unwrap();
    fs::create_dir_all(layout.epochs_dir()).unwrap();
    let manifest = RunManifest {
        run_id: "hand".into(),
        layers: vec!["conv1".into(), "fc".into()],
        config: cfg,
    };
    write_manifest(&layout, &manifest).unwrap();
    write_tensor(layout.labels(), &Tensor::from_u32(vec![label_rows], vec![0; label_rows]).unwrap()).unwrap();
    for t in 0..3 {
        fs::create_dir_all(layout.epoch_dir(t)).unwrap();
        for (layer, p) in [("conv1", 4), ("fc", 3)] {
            let vals: Vec<f32> = (0..m * p).map(|i| (i % 7) as f32 + t as f32).collect();
            write_tensor(layout.activation(t, layer), &Tensor::from_f32(vec![m, p], vals).unwrap()).unwrap();
        }
    }
}

#[test]
fn complete_store_opens() {
    let dir = tempfile::tempdir().unwrap();
    hand_store(dir.path(), 100, 100);
    let store = open_checkpoint_store(dir.path()).unwrap();
    assert_eq!(store.epoch_grid().epochs(), &[0, 1, 2]);
    assert_eq!(store.layer_names(), &["conv1".to_string(), "fc".to_string()]);
    assert_eq!(store.probe_count(), 100);
    let r = store.load_representation(2, "fc").unwrap();
    assert_eq!((r.rows(), r.cols(), r.epoch), (100, 3, 2));
}

#[test]
fn missing_file_names_epoch_and_layer() {
    let dir = tempfile::tempdir().unwrap();
    hand_store(dir.path(), 100, 100);
    fs::remove_file(StoreLayout::new(dir.path()).activation(2, "fc")).unwrap();
    match open_checkpoint_store(dir.path()) {
        Err(e @ Error::MissingCheckpoint { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("epoch 2") && msg.contains("layer fc"), "{msg}");
            assert_eq!(e.exit_code(), 4);
        }
        other => panic!("expected a missing-checkpoint error, got {other:?}"),
    }
}

#[test]
fn label_count_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    hand_store(dir.path(), 100, 99);
    assert!(matches!(open_checkpoint_store(dir.path()), Err(Error::Inconsistent(_))));
}

#[test]
fn missing_epochs_dir_and_bad_manifest() {
    let dir = tempfile::tempdir().unwrap();
    hand_store(dir.path(), 10, 10);
    let layout = StoreLayout::new(dir.path());
    fs::write(layout.manifest(), "{ \"run_id\": ").unwrap();
    let e = open_checkpoint_store(dir.path()).unwrap_err();
    assert!(matches!(e, Error::Parse { .. }), "{e}");

    let dir = tempfile::tempdir().unwrap();
    hand_store(dir.path(), 10, 10);
    fs::remove_dir_all(StoreLayout::new(dir.path()).epochs_dir()).unwrap();
    assert!(matches!(open_checkpoint_store(dir.path()), Err(Error::Inconsistent(_))));
}

#[test]
fn trained_store_validates_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let root = common::tiny_store(dir.path(), "a", 0.01);
    let store = open_checkpoint_store(&root).unwrap();
    assert_eq!(store.run_id(), "a");
    assert_eq!(store.layer_names(), &["hidden".to_string(), "fc".to_string()]);
    let model = repdyn::trainer::load_model(&store, 4).unwrap();
    assert_eq!(repdyn::trainer::Model::layer_names(model.kind()), &["hidden", "fc"]);
    let bad = store.check_layer("conv").unwrap_err();
    assert!(bad.to_string().contains("hidden, fc"), "{bad}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deleting_any_required_file_is_rejected(pick in 0usize..8) {
        let dir = tempfile::tempdir().unwrap();
        hand_store(dir.path(), 12, 12);
        let layout = StoreLayout::new(dir.path());
        let mut required = vec![layout.manifest(), layout.labels()];
        for t in 0..3 {
            required.push(layout.activation(t, "conv1"));
            required.push(layout.activation(t, "fc"));
        }
        prop_assert_eq!(required.len(), 8);
        fs::remove_file(&required[pick]).unwrap();
        prop_assert!(open_checkpoint_store(dir.path()).is_err());
    }
}
