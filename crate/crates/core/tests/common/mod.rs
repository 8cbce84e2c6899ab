#![allow(dead_code)]

use fastqa::synth::{generate, SynthConfig};
use fastqa::text::{parse_squad, CharVocab, Embeddings};
use fastqa::train::{prepare_training, Dataset, TrainConfig, Trainer};
use fastqa::{Model, ModelKind};

pub struct Setup {
    pub train: Dataset,
    pub dev: Dataset,
    pub embeddings: Embeddings,
    pub chars: CharVocab,
}

/// Synthetic train/dev sets prepared for `cfg`'s model kind.
pub fn synth_setup(cfg: &TrainConfig, synth: &SynthConfig) -> Setup {
    let data = generate(synth);
    let kind = cfg.model.kind;
    let mode = kind.token_mode();
    let (train, _) = parse_squad(&data.train.to_string(), mode).unwrap();
    let (dev, _) = parse_squad(&data.dev.to_string(), mode).unwrap();
    let (train, _) = prepare_training(&train, cfg);
    let chars = CharVocab::ascii();
    let vocab = &data.embeddings.vocab;
    Setup {
        train: Dataset::new(train, vocab, &chars, kind),
        dev: Dataset::new(dev, vocab, &chars, kind),
        chars,
        embeddings: data.embeddings,
    }
}

pub fn trainer(setup: &Setup, cfg: &TrainConfig) -> Trainer {
    let model = Model::new(cfg.model.clone(), setup.embeddings.matrix.clone(), setup.chars.len(), cfg.seed).unwrap();
    Trainer::new(
        cfg.clone(),
        model,
        setup.train.features.clone(),
        setup.embeddings.vocab.fingerprint(),
        setup.chars.clone(),
    )
    .unwrap()
}

/// Small, fast configuration: no character CNN, tiny hidden size.
pub fn small_config(kind: ModelKind, n: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(kind);
    cfg.model.n = n;
    cfg.model.char_cnn = None;
    cfg
}

pub fn small_synth(train: usize, dev: usize) -> SynthConfig {
    SynthConfig {
        train,
        dev,
        context_len: 30,
        dim: 12,
        ..Default::default()
    }
}
