//! Structural properties checked on random cases.
#![allow(dead_code)]

use phmn_core::eval::MetricsReport;
use phmn_core::model::{score_example, Phmn, Variant};
use phmn_core::nn::{Graph, Tensor};
use phmn_core::persona::{expand_mask, AttentionWeights};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::toy::{random_example, random_weights, toy_config};

pub type Invariant = fn(&mut ChaCha8Rng) -> Result<(), String>;

pub const INVARIANTS: &[(&str, Invariant)] = &[
    ("mask_rows_and_identity", mask_rows_and_identity),
    ("history_permutation", history_permutation),
    ("pmn_ignores_context", pmn_ignores_context),
    ("hmn_ignores_history", hmn_ignores_history),
    ("metric_ordering", metric_ordering),
    ("metric_monotone_transform", metric_monotone_transform),
];

pub fn run(inv: Invariant, cases: usize, seed: u64) -> Result<(), String> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        inv(&mut rng).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Every mask row repeats its weight; unit weights leave maps untouched and
/// a uniform weight scales them.
pub fn mask_rows_and_identity(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (n_r, n_u) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let a: Vec<f64> = (0..n_r).map(|_| rng.random_range(0.0..1.0)).collect();
    let m = expand_mask(&a, n_u);
    for i in 0..n_r {
        ensure(m.row_slice(i).iter().all(|&v| v == a[i]), || format!("mask row {i} not constant"))?;
    }
    let ps = phmn_core::nn::ParamStore::new();
    let mut g = Graph::new(&ps);
    let maps: [_; 5] = std::array::from_fn(|_| {
        let t = random_tensor(rng, n_r, n_u);
        g.constant(t)
    });
    let ones = Phmn::apply_masks(&mut g, maps, &AttentionWeights::ones(n_r)).unwrap();
    let c = rng.random_range(0.1..2.0);
    let uniform = AttentionWeights {
        a: std::array::from_fn(|_| vec![c; n_r]),
    };
    let scaled = Phmn::apply_masks(&mut g, maps, &uniform).unwrap();
    for ch in 0..5 {
        let orig = g.value(maps[ch]).data();
        ensure(g.value(ones[ch]).data() == orig, || format!("unit mask changed channel {ch}"))?;
        let want: Vec<f64> = orig.iter().map(|x| x * c).collect();
        ensure(g.value(scaled[ch]).data() == want.as_slice(), || format!("uniform mask is not a scalar on channel {ch}"))?;
    }
    Ok(())
}

fn random_model(rng: &mut ChaCha8Rng, variant: Variant) -> (Phmn, phmn_core::nn::ParamStore) {
    let cfg = phmn_core::model::ModelConfig {
        init_seed: rng.random(),
        ..toy_config(variant)
    };
    Phmn::new(cfg).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Reordering the responder's history does not change the score.
pub fn history_permutation(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let variant = [Variant::Phmn, Variant::Pmn, Variant::HmnW][rng.random_range(0..3)];
    let (model, ps) = random_model(rng, variant);
    let cfg = &model.cfg;
    let ex = random_example(rng, cfg, 1..=cfg.max_turns, 1..=cfg.history_cap);
    let h = ex.active_history().count();
    let w = random_weights(rng, cfg.max_len);
    let mut order: Vec<usize> = (0..h).collect();
    order.shuffle(rng);
    let mut perm = ex.clone();
    let l = cfg.max_len;
    for (dst, &src) in order.iter().enumerate() {
        perm.history_ids[dst * l..(dst + 1) * l].copy_from_slice(ex.history_utterance(src));
        perm.history_lengths[dst] = ex.history_lengths[src];
    }
    let a = score_example(&model, &ps, &ex, Some(&w)).unwrap();
    let b = score_example(&model, &ps, &perm, Some(&w)).unwrap();
    ensure(close(a, b), || format!("{variant}: {a} vs {b} after reordering {order:?}"))
}

/// The history-only variant's score does not depend on the context.
pub fn pmn_ignores_context(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (model, ps) = random_model(rng, Variant::Pmn);
    let cfg = &model.cfg;
    let ex = random_example(rng, cfg, 1..=cfg.max_turns, 1..=cfg.history_cap);
    let other = random_example(rng, cfg, 0..=cfg.max_turns, 0..=0);
    let mut swapped = ex.clone();
    swapped.context_ids = other.context_ids;
    swapped.context_lengths = other.context_lengths;
    let a = score_example(&model, &ps, &ex, None).unwrap();
    let b = score_example(&model, &ps, &swapped, None).unwrap();
    ensure(a == b, || format!("{a} vs {b}"))
}

/// The context-only variant's score does not depend on the history.
pub fn hmn_ignores_history(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (model, ps) = random_model(rng, Variant::Hmn);
    let cfg = &model.cfg;
    let ex = random_example(rng, cfg, 1..=cfg.max_turns, 0..=cfg.history_cap);
    let other = random_example(rng, cfg, 1..=1, 0..=cfg.history_cap);
    let mut swapped = ex.clone();
    swapped.history_ids = other.history_ids;
    swapped.history_lengths = other.history_lengths;
    swapped.responder_id = "someone else".into();
    let a = score_example(&model, &ps, &ex, None).unwrap();
    let b = score_example(&model, &ps, &swapped, None).unwrap();
    ensure(a == b, || format!("{a} vs {b}"))
}

fn random_groups(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let levels = rng.random_range(2..=12);
    (0..rng.random_range(1..=30))
        .map(|_| (0..10).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 2.0).collect())
        .collect()
}

pub fn metric_ordering(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let r = MetricsReport::from_groups(&random_groups(rng)).unwrap();
    ensure(r.r10_1 <= r.r10_2 && r.r10_2 <= r.r10_5, || format!("recall not monotone in k: {r:?}"))?;
    ensure(r.mrr >= r.r10_1, || format!("mrr below R10@1: {r:?}"))
}

/// Strictly increasing maps of the scores leave every metric unchanged.
pub fn metric_monotone_transform(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let groups = random_groups(rng);
    let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
    let which = rng.random_range(0..4);
    let f = |x: f64| match which {
        0 => a * x + b,
        1 => x.exp(),
        2 => x * x * x + x,
        _ => 1.0 / (1.0 + (-x).exp()),
    };
    let moved: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|&x| f(x)).collect()).collect();
    let (r, s) = (MetricsReport::from_groups(&groups).unwrap(), MetricsReport::from_groups(&moved).unwrap());
    ensure(r == s, || format!("transform {which} changed metrics: {r:?} vs {s:?}"))
}
