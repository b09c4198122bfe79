mod common;

use repdyn::cka::{cka_diagram, CkaBatchPlan};
use repdyn::drs::{drs_diagram, fragment_count, fragmentation_score};
use repdyn::plane::sample_triplets;
use repdyn::probe::{train_store_probes, ProbeTrainConfig};
use repdyn::tensor_io::open_checkpoint_store;
use repdyn::trainer::train_run;

#[test]
fn same_store_diagram_is_symmetric_with_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let store = open_checkpoint_store(common::tiny_store(dir.path(), "a", 0.01)).unwrap();
    for layer in ["hidden", "fc"] {
        let plan = CkaBatchPlan::full(store.probe_count()).unwrap();
        let d = cka_diagram(&store, &store, layer, &plan).unwrap();
        assert_eq!(d.values.dim(), (4, 4));
        assert_eq!(d.max_asymmetry(), 0.0);
        for i in 0..4 {
            assert!((d.values[(i, i)] - 1.0).abs() < 1e-12);
        }
        // each entry matches the oracle on the stored activations
        for (i, &ti) in store.epoch_grid().epochs().iter().enumerate() {
            for (j, &tj) in store.epoch_grid().epochs().iter().enumerate() {
                let f = store.load_representation(ti, layer).unwrap().to_f64();
                let g = store.load_representation(tj, layer).unwrap().to_f64();
                let rows = |a: &ndarray::Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
                let want = common::oracle_cka(&rows(&f), &rows(&g));
                assert!((d.values[(i, j)] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn batched_plan_averages_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let store = open_checkpoint_store(common::tiny_store(dir.path(), "a", 0.01)).unwrap();
    let plan = CkaBatchPlan::stratified(store.labels(), 3, 30).unwrap();
    let d = cka_diagram(&store, &store, "hidden", &plan).unwrap();
    let f = store.load_representation(0, "hidden").unwrap();
    let g = store.load_representation(4, "hidden").unwrap();
    let want: f64 = plan
        .batches()
        .iter()
        .map(|b| repdyn::cka::cka(&f, &g, b).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((d.values[(0, 3)] - want).abs() < 1e-12);
}

#[test]
fn cross_run_diagram_is_rectangular() {
    let dir = tempfile::tempdir().unwrap();
    let a = open_checkpoint_store(common::tiny_store(dir.path(), "a", 0.01)).unwrap();
    let root_b = dir.path().join("b");
    let mut cfg = common::tiny_config(0.01, 4, &[0, 4]);
    cfg.seeds.init = 99;
    train_run(&cfg, "b", &root_b).unwrap();
    let b = open_checkpoint_store(&root_b).unwrap();
    let plan = CkaBatchPlan::full(a.probe_count()).unwrap();
    let d = cka_diagram(&a, &b, "fc", &plan).unwrap();
    assert_eq!(d.values.dim(), (4, 2));
    assert_eq!((d.run_id_row.as_str(), d.run_id_col.as_str()), ("a", "b"));
    assert!(!d.is_square_same_run());
    let f = a.load_representation(0, "fc").unwrap();
    let g = b.load_representation(4, "fc").unwrap();
    let full: Vec<usize> = (0..a.probe_count()).collect();
    assert!((d.values[(0, 1)] - repdyn::cka::cka(&f, &g, &full).unwrap()).abs() < 1e-12);
}

#[test]
fn frozen_run_gives_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let store = open_checkpoint_store(common::tiny_store(dir.path(), "frozen", 0.0)).unwrap();
    let plan = CkaBatchPlan::full(store.probe_count()).unwrap();
    let d = cka_diagram(&store, &store, "hidden", &plan).unwrap();
    assert!(d.values.iter().all(|v| (v - 1.0).abs() < 1e-12));

    let probes = train_store_probes(&store, "hidden", &ProbeTrainConfig::default()).unwrap();
    let (data, _) = store.run_config().training_data().unwrap();
    let triplets = sample_triplets(data.train.inputs.view(), 4, 11).unwrap();
    let (drs, maps) = drs_diagram(&store, "hidden", &probes, &triplets, 0.1).unwrap();
    assert!(drs.values.iter().all(|&v| v == 1.0));
    assert_eq!(maps.len(), 4);
    assert!(maps.iter().all(|m| m.len() == 4 && m[0].shape() == (50, 50)));
}

#[test]
fn drs_and_fragmentation_on_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = open_checkpoint_store(common::tiny_store(dir.path(), "a", 0.05)).unwrap();
    let cfg = ProbeTrainConfig {
        learning_rate: 1e-2,
        ..Default::default()
    };
    let probes = train_store_probes(&store, "fc", &cfg).unwrap();
    let (data, _) = store.run_config().training_data().unwrap();
    let triplets = sample_triplets(data.train.inputs.view(), 5, 3).unwrap();
    let (d, maps) = drs_diagram(&store, "fc", &probes, &triplets, 0.1).unwrap();
    assert_eq!(d.max_asymmetry(), 0.0);
    for i in 0..4 {
        assert_eq!(d.values[(i, i)], 1.0);
    }
    for (i, a) in maps.iter().enumerate() {
        for (j, b) in maps.iter().enumerate() {
            let agree: usize = a
                .iter()
                .zip(b)
                .map(|(x, y)| x.labels().iter().zip(y.labels()).filter(|(p, q)| p == q).count())
                .sum();
            assert_eq!(d.values[(i, j)], agree as f64 / (5.0 * 2500.0));
        }
    }
    for m in &maps {
        let score = fragmentation_score(m).unwrap();
        for (g, &c) in m.iter().zip(&score.per_plane_counts) {
            assert_eq!(c, common::flood_fill_count(g.labels(), 50, 50));
            assert_eq!(c, fragment_count(g));
        }
    }
}
