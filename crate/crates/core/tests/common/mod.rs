#![allow(dead_code)]

use metasbir::config::{ExperimentConfig, GeneratorSpec, ModelConfig};
use metasbir::metatrain::TrainData;
use metasbir::synth::{generate, Synthetic};
use tapegrad::Tensor;

/// A configuration small enough to train in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.generator = GeneratorSpec {
        categories: 6,
        train_categories: 4,
        photos_per_category: 12,
        finetune_photos: 4,
        feature_dim: 8,
        semantic_dim: 5,
        subspace_rank: 2,
        ..GeneratorSpec::default()
    };
    cfg.model = ModelConfig {
        hidden_dim: 16,
        latent_dim: 8,
        embed_dim: 6,
        disc_hidden: 8,
        margin_hidden: 4,
        semantic_hidden: 8,
        style_hidden: 8,
        style_dim: 4,
    };
    cfg.train.k = 2;
    cfg.train.meta_batch = 2;
    cfg.train.meta_epochs = 2;
    cfg.train.steps_per_epoch = 2;
    cfg.train.pretrain_epochs = 3;
    cfg.train.pretrain_lr = 1e-3;
    cfg.train.outer_lr = 1e-3;
    cfg.eval.seeds = 2;
    cfg.eval.ks = vec![1, 2];
    cfg
}

pub fn synth(cfg: &ExperimentConfig) -> Synthetic {
    generate(&cfg.generator, cfg.seed).unwrap()
}

pub fn data(syn: &Synthetic) -> TrainData<'_> {
    TrainData {
        dataset: &syn.dataset,
        split: &syn.split,
        semantic: Some(&syn.semantic),
    }
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
