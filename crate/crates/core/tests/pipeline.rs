use ltcil_core::backbone::{BackboneConfig, FrozenBackbone};
use ltcil_core::checkpoint::{load_checkpoint, save_checkpoint};
use ltcil_core::eval::SubgroupBounds;
use ltcil_core::stream::{encode_cifar100_record, load_cifar100_dir, make_stream, synth_dataset, ClassCountPlan, Scenario, SynthConfig};
use ltcil_core::trainer::{run_experiment, AblationMode, ExperimentSpec, ModelState, TrainConfig};
use ltcil_core::Error;

fn backbone() -> BackboneConfig {
    BackboneConfig { image_height: 32, image_width: 32, channels: 3, patch_size: 8, embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2, seed: 4 }
}

fn train_config(mode: AblationMode) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, pool_size: 3, bottleneck: 4, assigner_embed: 4, mode, ..TrainConfig::default() }
}

/// Writes synthetic 32x32 images in the CIFAR-100 binary layout, restricted to `classes` fine labels.
fn write_cifar_dir(dir: &std::path::Path, classes: usize, train: usize, test: usize) {
    let synth = synth_dataset(&SynthConfig { classes, train_per_class: train, test_per_class: test, height: 32, width: 32, channels: 3, noise: 0.05, seed: 8 });
    for (name, set) in [("train.bin", &synth.train), ("test.bin", &synth.test)] {
        let mut bytes = Vec::new();
        for i in 0..set.len() {
            let label = set.label(i) as u8;
            bytes.extend_from_slice(&encode_cifar100_record(label / 5, label, set.bytes(i)).unwrap());
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn cifar_directory_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar_dir(dir.path(), 4, 8, 3);
    let data = load_cifar100_dir(dir.path()).unwrap();
    assert_eq!(data.num_classes, 100);
    assert_eq!(data.train.len(), 32);

    // only four of the hundred fine labels are present, so a 100-class plan cannot be met
    let plan = ClassCountPlan::new(100, 8, 0.5, Scenario::Ordered, 0).unwrap();
    assert!(matches!(make_stream(&plan, "B50-10".parse().unwrap(), &data, 0), Err(Error::Insufficient { class: 4, .. })));

    let four = ltcil_core::stream::Dataset { num_classes: 4, ..data };
    let plan = ClassCountPlan::new(4, 8, 0.5, Scenario::Ordered, 0).unwrap();
    let stream = make_stream(&plan, "B2-1".parse().unwrap(), &four, 0).unwrap();
    let spec = ExperimentSpec {
        dataset: &four,
        stream: &stream,
        train: train_config(AblationMode::Full),
        backbone: backbone(),
        bounds: SubgroupBounds::new(8.0, 5.0).unwrap(),
        config_hash: "pipeline".into(),
    };
    let mut seen = Vec::new();
    let out = run_experiment::<f64>(&spec, |r, _| {
        seen.push(r.classes_seen);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![2, 3, 4]);
    assert!(out.summary.consistent());
    assert_eq!(out.summary.stream_fingerprint, stream.fingerprint());
    assert!(out.summary.accuracies.iter().all(|a| (0.0..=100.0).contains(a)));
    assert_eq!(out.per_class.values().map(|(_, n)| n).sum::<usize>(), four.test.len());
}

#[test]
fn checkpoint_file_restores_a_trained_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(&SynthConfig { classes: 3, train_per_class: 6, test_per_class: 2, height: 32, width: 32, channels: 3, noise: 0.05, seed: 1 });
    let mut state = ModelState::<f32>::new(FrozenBackbone::new(backbone()).unwrap(), train_config(AblationMode::NoRouting)).unwrap();
    state.extend_for_task(&[0, 1, 2]).unwrap();
    let inst: Vec<_> = (0..data.train.len()).map(|i| state.prepare(i, data.train.label(i), 6, &data.train.image(i)).unwrap()).collect();
    state.train_task(&inst).unwrap();
    state.tasks_trained = 1;

    let path = dir.path().join("task0.ckpt");
    save_checkpoint(&path, "hash", 0, state.batch_rng(), &state.all_params()).unwrap();
    let ck = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ck.header.config_hash, "hash");
    assert!(load_checkpoint::<f64>(&path).is_err(), "precision is part of the format");

    let mut fresh = ModelState::<f32>::new(FrozenBackbone::new(backbone()).unwrap(), train_config(AblationMode::NoRouting)).unwrap();
    fresh.extend_for_task(&[0, 1, 2]).unwrap();
    fresh.restore(&ck).unwrap();
    fresh.tasks_trained = 1;
    for i in &inst {
        assert_eq!(fresh.predict(i).unwrap(), state.predict(i).unwrap());
    }
}

#[test]
fn finetune_and_ablation_modes_train_end_to_end() {
    let data = synth_dataset(&SynthConfig { classes: 4, train_per_class: 6, test_per_class: 2, height: 32, width: 32, channels: 3, noise: 0.05, seed: 2 });
    let plan = ClassCountPlan::new(4, 6, 0.5, Scenario::Shuffled, 3).unwrap();
    let stream = make_stream(&plan, "B2-2".parse().unwrap(), &data, 1).unwrap();
    let mut params = Vec::new();
    for mode in [AblationMode::Full, AblationMode::NoRouting, AblationMode::NoAuxPool, AblationMode::NoPool, AblationMode::Finetune] {
        let spec = ExperimentSpec {
            dataset: &data,
            stream: &stream,
            train: train_config(mode),
            backbone: backbone(),
            bounds: SubgroupBounds::new(6.0, 3.0).unwrap(),
            config_hash: mode.name().into(),
        };
        let out = run_experiment::<f64>(&spec, |_, _| Ok(())).unwrap();
        assert_eq!(out.tasks.len(), 2);
        assert_eq!(out.weights.is_empty(), !mode.uses_aux(), "{mode}");
        params.push(out.summary.trainable_params);
    }
    // every step down the chain removes trainable parameters
    assert!(params.windows(2).all(|w| w[0] > w[1]), "{params:?}");
}
