//! Short seeded training runs, small enough for the test suite.

use ccdet::augment::AugmentConfig;
use ccdet::dataset::{generate_synthetic, AnnotatedImage};
use ccdet::detector::DetectorConfig;
use ccdet::evalmetrics::EvalOptions;
use ccdet::train::{holdout, TrainConfig};
use ccdet::{weightfile, Exec};

pub fn small_corpus() -> Vec<AnnotatedImage> {
    generate_synthetic(3, 2, 64, 21).unwrap()
}

pub fn small_detector() -> DetectorConfig {
    DetectorConfig { input_size: 64, width_base: 4, ..Default::default() }
}

/// Every setting spelled out so changes to the defaults do not move it.
pub fn small_train(exec: Exec) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr: 0.01,
        weight_decay: 5e-5,
        momentum: 0.937,
        grad_clip_norm: Some(10.0),
        seed: 3,
        train_fraction: 0.8,
        split_seed: 4,
        augment: AugmentConfig { mosaic_prob: 0.5, flip_prob: 0.5, gamma_range: (0.7, 1.5), seed: 5, ..Default::default() },
        exec,
        ..Default::default()
    }
}

/// Weight-file bytes and the JSON evaluation report of each round.
pub fn short_run(exec: Exec, rounds: usize) -> Vec<(Vec<u8>, String)> {
    let corpus = small_corpus();
    let results = holdout(&corpus, rounds, &small_detector(), &small_train(exec), &EvalOptions::default()).unwrap();
    results
        .iter()
        .map(|r| (weightfile::encode(r.weights.tensors()), serde_json::to_string(&r.report).unwrap()))
        .collect()
}

/// Two runs with the same seeds must agree byte for byte.
pub fn runs_are_identical(exec: Exec) -> bool {
    short_run(exec, 2) == short_run(exec, 2)
}
