#![allow(dead_code)]

use u2kws::corpus::{Corpus, CorpusConfig};
use u2kws::frontend::SpecAugmentConfig;
use u2kws::model::{KwsModel, ModelConfig};
use u2kws::train::{train_stage1, train_stage2, TrainConfig};
use u2kws_nn::{Float, ParamStore};

pub fn small_corpus(train: usize, seed: u64) -> Corpus {
    Corpus::generate(&CorpusConfig {
        n_phones: 8,
        feat_dim: 16,
        words: 40,
        train_utterances: train,
        keywords: 6,
        test_positives: 4,
        dev_positives: 2,
        test_negatives: 6,
        dev_negatives: 3,
        negative_words: 12,
        phone_frames: (6, 10),
        seed,
        ..Default::default()
    })
    .expect("corpus")
}

pub fn tiny_model(corpus: &Corpus, seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: corpus.config.feat_dim,
        conv_channels: 4,
        dim: 24,
        heads: 2,
        ffn: 48,
        layers: 2,
        conv_kernel: 3,
        max_rel_dist: 8,
        vocab_size: corpus.lexicon.vocab().size(),
        bias_dim: 8,
        bias_heads: 2,
        dec_layers: 1,
        dec_heads: 2,
        dec_ffn: 48,
        chunk_size: 4,
        seed,
        ..Default::default()
    }
}

pub fn quiet_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 8,
        warmup: 20,
        lr: 3e-3,
        spec_augment: SpecAugmentConfig::disabled(),
        ..Default::default()
    }
}

/// Two-stage training of the tiny model on `corpus`.
pub fn train_toy<F: Float>(
    corpus: &Corpus,
    stage1: usize,
    stage2: usize,
    seed: u64,
) -> (KwsModel, ParamStore<F>) {
    let (model, mut store) = KwsModel::init::<F>(&tiny_model(corpus, seed)).expect("model");
    let cfg = TrainConfig {
        stage1_epochs: stage1,
        stage2_epochs: stage2,
        warmup: 200,
        lr: 1e-2,
        ..quiet_train(seed)
    };
    train_stage1(
        &model,
        &mut store,
        &corpus.train,
        &corpus.lexicon,
        &cfg,
        |_, _| Ok(()),
    )
    .expect("stage 1");
    if stage2 > 0 {
        train_stage2(
            &model,
            &mut store,
            &corpus.train,
            &corpus.lexicon,
            &cfg,
            |_, _| Ok(()),
        )
        .expect("stage 2");
    }
    (model, store)
}
