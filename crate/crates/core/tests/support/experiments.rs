//! Small end-to-end training runs on synthetic data.
#![allow(dead_code)]

use phmn_core::corpus::{build_corpus, encode_histories, BuiltCorpus, CorpusConfig};
use phmn_core::eval::{evaluate, MetricsReport};
use phmn_core::model::{ModelConfig, Variant};
use phmn_core::nn::Init;
use phmn_core::persona::{build_tfidf, TfidfModel};
use phmn_core::synth::{persona_sessions, SynthConfig};
use phmn_core::train::{accuracy, Dataset, TrainConfig, Trainer};

pub struct PersonaData {
    pub corpus: BuiltCorpus,
    pub tfidf: TfidfModel,
}

/// 2200 sessions with one positive case each: three asker turns, then an
/// answer carrying the responder's signature bigram.
pub fn persona_data(seed: u64) -> PersonaData {
    let sessions = persona_sessions(&SynthConfig {
        sessions: 2200,
        seed,
        ..Default::default()
    });
    let cc = CorpusConfig {
        min_utts: 5,
        min_turns: 3,
        max_turns: 3,
        history_cap: 20,
        max_len: 8,
        vocab_cap: 1000,
        seed,
        ..Default::default()
    };
    let corpus = build_corpus(&sessions, &cc).unwrap();
    let tfidf = build_tfidf(&encode_histories(&corpus.users, &corpus.vocab, cc.max_len)).unwrap();
    PersonaData { corpus, tfidf }
}

pub fn small_model(variant: Variant, vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_w: 16,
        context_filters: 16,
        history_filters: 4,
        heads: 2,
        d_h: 16,
        agg_conv1_filters: 8,
        agg_conv2_filters: 8,
        max_turns: 3,
        max_len: 8,
        history_cap: 20,
        init: Init::FanIn,
        init_seed: seed,
        ..ModelConfig::for_variant(variant)
    }
}

/// Train `variant` with early stopping on validation R10@1 (checked once
/// per epoch) and score the best parameters on the test split.
pub fn personalization_run(data: &PersonaData, variant: Variant, seed: u64) -> MetricsReport {
    let splits = &data.corpus.splits;
    let batch = 32;
    let mc = small_model(variant, data.corpus.vocab.len(), seed);
    let tc = TrainConfig {
        batch_size: batch,
        lr0: 1e-3,
        eval_every: (splits[0].examples.len() as u64).div_ceil(batch as u64),
        patience: 3,
        max_epochs: 14,
        log_every: 1000,
        seed,
        ..Default::default()
    };
    let mut tr = Trainer::new(mc, tc, "synthetic").unwrap();
    let ds = |i: usize| Dataset::new(&tr.model, splits[i].examples.clone(), Some(&data.tfidf), None);
    let (train, valid, test) = (ds(0), ds(1), ds(2));
    tr.run(&train, Some(&valid), &mut std::io::sink()).unwrap();
    evaluate(&tr.model, tr.best_params(), &test.examples, &test.weights).unwrap().0
}

/// Train PHMN on 200 labeled examples one epoch at a time until training
/// accuracy reaches `target` or `max_epochs` pass. Returns the epochs used
/// and the final accuracy.
pub fn overfit(seed: u64, target: f64, max_epochs: u64) -> (u64, f64) {
    let sessions = persona_sessions(&SynthConfig {
        sessions: 300,
        seed,
        ..Default::default()
    });
    let cc = CorpusConfig {
        min_utts: 3,
        min_turns: 3,
        max_turns: 3,
        history_cap: 10,
        max_len: 8,
        vocab_cap: 1000,
        valid_frac: 0.0,
        test_frac: 0.0,
        seed,
        ..Default::default()
    };
    let corpus = build_corpus(&sessions, &cc).unwrap();
    let tfidf = build_tfidf(&encode_histories(&corpus.users, &corpus.vocab, cc.max_len)).unwrap();
    let examples: Vec<_> = corpus.splits[0].examples.iter().take(200).cloned().collect();
    assert_eq!(examples.len(), 200, "synthetic set too small");
    let mc = ModelConfig {
        history_cap: 10,
        init: Init::Uniform,
        ..small_model(Variant::Phmn, corpus.vocab.len(), seed)
    };
    let tc = TrainConfig {
        batch_size: 20,
        lr0: 1e-3,
        max_epochs: 0,
        log_every: 1000,
        seed,
        ..Default::default()
    };
    let mut tr = Trainer {
        cfg: TrainConfig { max_epochs: 1, ..tc.clone() },
        ..Trainer::new(mc, TrainConfig { max_epochs: 1, ..tc }, "synthetic").unwrap()
    };
    let data = Dataset::new(&tr.model, examples, Some(&tfidf), None);
    let mut acc = 0.0;
    for epoch in 1..=max_epochs {
        tr.cfg.max_epochs = epoch;
        tr.run(&data, None, &mut std::io::sink()).unwrap();
        acc = accuracy(&tr.model, &tr.params, &data).unwrap();
        if acc >= target {
            return (epoch, acc);
        }
    }
    (max_epochs, acc)
}
