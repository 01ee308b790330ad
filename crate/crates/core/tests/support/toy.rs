//! Tiny model configurations and random encoded examples.
#![allow(dead_code)]

use phmn_core::corpus::{EncodeLimits, EncodedExample, PAD};
use phmn_core::model::{example_outcome, ModelConfig, ModelError, Phmn, Variant};
use phmn_core::nn::{check_gradients, GradCheckOptions, GradCheckReport, NnError, Probe};
use phmn_core::persona::AttentionWeights;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d_w = 8, two heads, utterances of 6 tokens, d_h = 8.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_w: 8,
        context_filters: 8,
        history_filters: 2,
        heads: 2,
        d_h: 8,
        agg_conv1_filters: 4,
        agg_conv2_filters: 3,
        max_turns: 3,
        max_len: 6,
        history_cap: 4,
        ..ModelConfig::for_variant(variant)
    }
}

fn row(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> (Vec<u32>, u32) {
    let len = rng.random_range(1..=cfg.max_len);
    let mut v: Vec<u32> = (0..len).map(|_| rng.random_range(2..cfg.vocab_size as u32)).collect();
    v.resize(cfg.max_len, PAD);
    (v, len as u32)
}

/// Example with a number of context turns and history utterances drawn
/// from the given ranges.
pub fn random_example(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    turns: RangeInclusive<usize>,
    history: RangeInclusive<usize>,
) -> EncodedExample {
    let turns = rng.random_range(turns);
    let history = rng.random_range(history);
    let mut ex = EncodedExample {
        limits: EncodeLimits {
            max_turns: cfg.max_turns,
            max_len: cfg.max_len,
            history_cap: cfg.history_cap,
        },
        context_ids: vec![],
        context_lengths: vec![0; cfg.max_turns],
        response_ids: row(rng, cfg).0,
        history_ids: vec![],
        history_lengths: vec![0; cfg.history_cap],
        label: rng.random_range(0..2),
        responder_id: "u".into(),
        group: 0,
    };
    for i in 0..cfg.max_turns {
        let (ids, n) = if i < turns { row(rng, cfg) } else { (vec![PAD; cfg.max_len], 0) };
        ex.context_ids.extend(ids);
        ex.context_lengths[i] = n;
    }
    for i in 0..cfg.history_cap {
        let (ids, n) = if i < history { row(rng, cfg) } else { (vec![PAD; cfg.max_len], 0) };
        ex.history_ids.extend(ids);
        ex.history_lengths[i] = n;
    }
    ex
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> AttentionWeights {
    AttentionWeights {
        a: std::array::from_fn(|_| (0..n).map(|_| rng.random_range(0.1..1.0)).collect()),
    }
}

/// Finite-difference check of the full PHMN loss (main head plus both
/// auxiliary heads) on a two-turn, two-history-utterance toy example.
pub fn phmn_gradient_check(seed: u64, samples: usize) -> GradCheckReport {
    let cfg = toy_config(Variant::Phmn);
    let (model, mut ps) = Phmn::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Nonzero biases keep activations away from exact ReLU zeros.
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    for id in ids {
        if ps.get(id).name.ends_with(".b") {
            for v in ps.get_mut(id).value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut ex = random_example(&mut rng, &cfg, 2..=2, 2..=2);
    ex.label = 1;
    let w = random_weights(&mut rng, cfg.max_len);
    check_gradients(
        &mut ps,
        |p| {
            let o = example_outcome(&model, p, &ex, Some(&w)).map_err(|e| match e {
                ModelError::Nn(n) => n,
                other => NnError::Config(other.to_string()),
            })?;
            Ok(Probe {
                loss: o.loss,
                grads: o.grads,
                branches: o.branches,
            })
        },
        &GradCheckOptions {
            eps: 1e-4,
            samples: Some(samples),
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}
