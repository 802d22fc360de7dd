mod common;

use std::time::Instant;

use common::{config, fixed_features};
use modattn_core::train::{corpus_loss, train, EpochLog, OptimizerKind, Sample, TrainConfig};
use modattn_core::{FusionMode, Model};

fn toy_corpus() -> (modattn_core::ModelConfig, Vec<Sample<f64>>) {
    let cfg = config(FusionMode::Attention, 8, 16);
    let captions = [
        vec![4, 5, 6],
        vec![7, 8, 9, 10],
        vec![4, 11, 6, 9],
        vec![8, 7],
        vec![10, 10, 5, 4, 11],
    ];
    let samples = captions
        .iter()
        .enumerate()
        .map(|(i, c)| Sample {
            id: format!("clip{i}"),
            features: fixed_features(&cfg, 100 + i as u64, 4 + i),
            tokens: c.clone(),
        })
        .collect();
    (cfg, samples)
}

#[test]
fn five_clip_corpus_is_memorized() {
    let (cfg, data) = toy_corpus();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 1,
        seed: 3,
        learning_rate: Some(0.01),
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let out = train(model, &data, &data, &tc, &mut |_: &EpochLog, _: &Model<f64>, _| Ok(())).unwrap();
    let loss = corpus_loss(&out.last, &data).unwrap();
    assert!(loss < 0.05, "per-token loss {loss}");
    assert!(started.elapsed().as_secs() < 120);
}

#[test]
fn adadelta_also_reduces_loss() {
    let (cfg, data) = toy_corpus();
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 1,
        optimizer: OptimizerKind::Adadelta,
        ..TrainConfig::default()
    };
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let out = train(model, &data, &data, &tc, &mut |_: &EpochLog, _: &Model<f64>, _| Ok(())).unwrap();
    assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
}
