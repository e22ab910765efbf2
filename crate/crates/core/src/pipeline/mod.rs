//! Training stages, bundles, checkpoints, configuration and experiment
//! harnesses.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod infer;
pub mod train;

pub use bundle::{Components, ModelBundle, StageRecord};
pub use config::{load_config, parse_kv, ModelConfig, Stage, TrainConfig};
pub use eval::{
    check_zero_shot, evaluate_arm, run_generator_table, run_prompt_sweep, run_zeroshot_table, EvalSet, SWEEP_K,
    SWEEP_SEEDS,
};
pub use infer::{segment_end_to_end, segment_with_prompts};
pub use train::{finetune_decoder, frozen_digest, pretrain_base, split_validation, train_detector, train_segmenter, StageReport};

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::synth::{render, DomainId, DomainSpec, Sample};

    /// 64-pixel model small enough for unit tests.
    pub(crate) fn tiny_config() -> ModelConfig {
        let mut m = ModelConfig::default();
        m.apply(
            &parse_kv(
                "input_size = 64\nembed_dim = 8\nencoder.width = 8\nencoder.blocks = 2\n\
                 encoder.heads = 2\nencoder.window = 2\nencoder.global_blocks = 1\ndecoder.heads = 2\n\
                 detector.channels = 2,2,2,2\ndetector.context_convs = 1\nsegmenter.channels = 2,2\n",
            )
            .unwrap(),
        )
        .unwrap();
        m
    }

    pub(crate) fn samples(domain: DomainId, n: usize, seed: u64) -> Vec<Sample> {
        let mut spec = DomainSpec::preset(domain);
        spec.image_size = 64;
        (0..n).map(|i| render(&spec, seed, i).unwrap()).collect()
    }
}
