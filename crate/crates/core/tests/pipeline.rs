use ssda_core::data::idx::{load_dataset, save_dataset};
use ssda_core::data::{generate_shifted_shapes, DatasetSpec, DomainShift, UnlabeledSet};
use ssda_core::losses::LossWeights;
use ssda_core::network::MultiHeadNet;
use ssda_core::trainer::{evaluate, run_experiment, train_run, TrainConfig};

fn spec() -> DatasetSpec {
    DatasetSpec {
        n_source: 48,
        n_target: 32,
        n_classes: 4,
        image_size: 16,
        domain_shift: DomainShift::from_level(0.6),
        seed: 21,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size_source: 16,
        batch_size_target: 16,
        weights: LossWeights::default(),
        ..TrainConfig::default()
    }
}

#[test]
fn idx_round_trip_preserves_everything() {
    let spec = spec();
    let data = generate_shifted_shapes(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data, &spec).unwrap();
    let (loaded, loaded_spec) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded_spec, spec);
    assert_eq!(loaded, data);
    assert!(UnlabeledSet::from_examples(&loaded.target).is_ok());
}

#[test]
fn trained_network_survives_checkpoint() {
    let data = generate_shifted_shapes(&spec()).unwrap();
    let run = train_run(&config(), &data).unwrap();
    assert_eq!(run.records.len(), 2);
    let last = run.final_record();
    assert!(last.loss_total.is_finite());
    assert!((0.0..=1.0).contains(&last.target_accuracy));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    run.net.save(&path).unwrap();
    let back = MultiHeadNet::load(&path, 16).unwrap();
    assert_eq!(back.params(), run.net.params());
    assert_eq!(
        evaluate(&back, &data.target_eval).unwrap(),
        (last.target_accuracy, last.pretext_accuracy)
    );
    let imgs: Vec<_> = data.target_eval.iter().take(5).map(|e| &e.image).collect();
    assert_eq!(back.features(&imgs).unwrap(), run.net.features(&imgs).unwrap());
}

#[test]
fn parallel_seeds_match_sequential() {
    let data = generate_shifted_shapes(&spec()).unwrap();
    let seq = run_experiment(&config(), &data, 2, 1).unwrap();
    let par = run_experiment(&config(), &data, 2, 2).unwrap();
    for (a, b) in seq.runs.iter().zip(&par.runs) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.net.params(), b.net.params());
        let strip = |r: &ssda_core::trainer::RunResult| {
            r.records
                .iter()
                .map(|m| (m.epoch, m.loss_total.to_bits(), m.target_accuracy.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(a), strip(b));
    }
    assert_eq!(seq.target_accuracy, par.target_accuracy);
}
