//! Tiny experiment config that exercises the whole pipeline in seconds.

#![allow(dead_code)]

use harness::pipeline::{ExperimentConfig, ModelShape};
use harness::synth::SyntheticTaskSpec;
use memplug::nmt::BaseTrainConfig;

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = SyntheticTaskSpec {
        content_words: 10,
        style_words: 4,
        min_len: 2,
        max_len: 5,
        general_train: 200,
        custom_train: 40,
        custom_valid: 10,
        custom_test: 10,
        ..SyntheticTaskSpec::default()
    };
    cfg.model = ModelShape {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
    };
    let base = BaseTrainConfig {
        steps: 30,
        warmup: 5,
        max_lr: 5e-3,
        batch_tokens: 128,
        ..BaseTrainConfig::default()
    };
    cfg.base_train = BaseTrainConfig { seed: 1, ..base.clone() };
    cfg.reverse_train = BaseTrainConfig { seed: 2, ..base };
    cfg.adapter_train.steps = 6;
    cfg.adapter_train.warmup = 2;
    cfg.adapter_train.validate_every = 3;
    cfg.adapter_train.batch_tokens = 128;
    cfg.memory.sentences = 12;
    cfg.memory.l_max = 3;
    cfg.beam_size = 2;
    cfg.seeds = vec![1, 2];
    cfg
}
