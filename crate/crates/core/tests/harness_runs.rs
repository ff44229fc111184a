use std::fs;
use std::path::Path;

use tweetbench_core::encoder::{PretrainConfig, TrainConfig};
use tweetbench_core::fixtures::{fixture_root, B200};
use tweetbench_core::harness::{
    fixture_config_path, run_experiment_in, EncoderArch, ExperimentConfig, LoadedConfig, ModelConfig, Predictions,
    RunResult,
};

fn load(name: &str) -> LoadedConfig {
    LoadedConfig::load(fixture_config_path(name)).unwrap()
}

#[test]
fn output_directory_does_not_change_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let loaded = load("encoder_b200.json");
    let ra = run_experiment_in(&loaded, a.path()).unwrap();
    let rb = run_experiment_in(&loaded, &b.path().join("nested/deeper")).unwrap();
    assert_eq!(ra.report, rb.report);
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.info.test_fingerprint, rb.info.test_fingerprint);
}

#[test]
fn persisted_predictions_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment_in(&load("nb_b200.json"), dir.path()).unwrap();
    let back = RunResult::load(&run.run_dir).unwrap();
    let scale = back.config.subtask.scale();
    let text = fs::read_to_string(run.run_dir.join("predictions.tsv")).unwrap();
    let preds = Predictions::from_tsv(&text, scale).unwrap();
    assert_eq!(preds.ids.len(), 40);
    assert_eq!(preds.metrics(scale).unwrap(), back.report.metrics);
}

#[test]
fn config_snapshot_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let original = load("encoder_b500.json").config;
    let path = dir.path().join("copy.json");
    fs::write(&path, original.to_json()).unwrap();
    assert_eq!(LoadedConfig::load(&path).unwrap().config, original);
}

fn pretrain_config(out: &Path) -> LoadedConfig {
    let root = fixture_root();
    let cfg = ExperimentConfig {
        name: "encoder-mlm".into(),
        model: ModelConfig::Encoder {
            arch: EncoderArch {
                num_layers: 1,
                ..EncoderArch::default()
            },
            train: TrainConfig {
                epochs: 4,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            pretrain: Some(PretrainConfig {
                train: TrainConfig {
                    epochs: 2,
                    learning_rate: 1e-3,
                    ..TrainConfig::default()
                },
                ..PretrainConfig::default()
            }),
        },
        data: tweetbench_core::harness::DataPaths {
            train: root.join(B200[0]),
            dev: None,
            test: root.join(B200[2]),
            test_split: "test".into(),
        },
        output_dir: Some(out.to_path_buf()),
        ..load("encoder_b200.json").config
    };
    LoadedConfig::from_config(cfg, out)
}

#[test]
fn pretraining_run_with_held_out_dev_persists_an_mlm_model() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = pretrain_config(dir.path());
    let run = run_experiment_in(&loaded, dir.path()).unwrap();
    assert_eq!(run.history.len(), 4);
    assert!(run.history.iter().all(|h| h.dev_accuracy.is_some()));
    let model = tweetbench_core::encoder::load_weights(run.run_dir.join("weights.bin")).unwrap();
    assert!(model.config.mlm_head);
    assert_eq!(model.config.num_layers, 1);
    let again = run_experiment_in(&loaded, dir.path()).unwrap();
    assert_eq!(
        fs::read(run.run_dir.join("predictions.tsv")).unwrap(),
        fs::read(again.run_dir.join("predictions.tsv")).unwrap()
    );
}
