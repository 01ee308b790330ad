//! Ranking metrics over candidate groups and group-wise evaluation.
//!
//! A group lists candidate scores with the gold response first and the
//! sampled negatives after it, in sampling order.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, PAD};
use crate::model::{score_example, ModelError, Phmn};
use crate::nn::{ParamStore, Tensor};
use crate::persona::AttentionWeights;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("group {group} has {have} candidates, need {need}")]
    GroupTooSmall {
        group: usize,
        have: usize,
        need: usize,
    },
    #[error("k = {k} outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("no groups to evaluate")]
    Empty,
    #[error("non-finite score in group {0}")]
    NonFinite(usize),
    #[error("malformed groups: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of the gold candidate among the first `n`; ties go against
/// the gold.
pub fn gold_rank(scores: &[f64], n: usize) -> usize {
    let gold = scores[0];
    1 + scores[1..n].iter().filter(|&&s| s >= gold).count()
}

fn check(groups: &[Vec<f64>], n: usize) -> Result<(), EvalError> {
    if groups.is_empty() {
        return Err(EvalError::Empty);
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < n {
            return Err(EvalError::GroupTooSmall {
                group: i,
                have: g.len(),
                need: n,
            });
        }
        if g[..n].iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite(i));
        }
    }
    Ok(())
}

/// Fraction of groups whose gold ranks within the top `k` of the first `n`
/// candidates. With `n = 2` this is the gold against the first negative.
pub fn recall_at_k(groups: &[Vec<f64>], n: usize, k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::BadK { k, n });
    }
    check(groups, n)?;
    let hits = groups.iter().filter(|g| gold_rank(g, n) <= k).count();
    Ok(hits as f64 / groups.len() as f64)
}

/// Mean reciprocal rank of the gold among the first `n` candidates.
pub fn mrr(groups: &[Vec<f64>], n: usize) -> Result<f64, EvalError> {
    check(groups, n)?;
    let total: f64 = groups.iter().map(|g| 1.0 / gold_rank(g, n) as f64).sum();
    Ok(total / groups.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: usize,
    pub r2_1: f64,
    pub r10_1: f64,
    pub r10_2: f64,
    pub r10_5: f64,
    pub mrr: f64,
}

impl MetricsReport {
    pub fn from_groups(groups: &[Vec<f64>]) -> Result<Self, EvalError> {
        Ok(Self {
            groups: groups.len(),
            r2_1: recall_at_k(groups, 2, 1)?,
            r10_1: recall_at_k(groups, 10, 1)?,
            r10_2: recall_at_k(groups, 10, 2)?,
            r10_5: recall_at_k(groups, 10, 5)?,
            mrr: mrr(groups, 10)?,
        })
    }
}

/// Split contiguous examples into candidate groups, checking that each
/// group starts with its single positive.
pub fn group_indices(examples: &[EncodedExample]) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let new = i == 0 || examples[i - 1].group != ex.group;
        if new {
            if ex.label != 1 {
                return Err(EvalError::Layout(format!("group {} does not start with its positive", ex.group)));
            }
            groups.push(vec![i]);
        } else {
            if ex.label != 0 {
                return Err(EvalError::Layout(format!("group {} has two positives", ex.group)));
            }
            groups.last_mut().expect("open group").push(i);
        }
    }
    Ok(groups)
}

/// Scores every example with the model; order follows `examples`.
pub fn score_all(
    model: &Phmn,
    params: &ParamStore,
    examples: &[EncodedExample],
    weights: &[Option<AttentionWeights>],
) -> Result<Vec<f64>, EvalError> {
    examples
        .par_iter()
        .zip(weights.par_iter())
        .map(|(ex, w)| score_example(model, params, ex, w.as_ref()).map_err(EvalError::from))
        .collect()
}

/// Scores arranged as candidate groups, gold first.
pub fn grouped_scores(examples: &[EncodedExample], scores: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
    Ok(group_indices(examples)?
        .into_iter()
        .map(|g| g.into_iter().map(|i| scores[i]).collect())
        .collect())
}

pub fn evaluate(
    model: &Phmn,
    params: &ParamStore,
    examples: &[EncodedExample],
    weights: &[Option<AttentionWeights>],
) -> Result<(MetricsReport, Vec<Vec<f64>>), EvalError> {
    let scores = score_all(model, params, examples, weights)?;
    let groups = grouped_scores(examples, &scores)?;
    Ok((MetricsReport::from_groups(&groups)?, groups))
}

/// `Σ_w tf(w)·idf(w)·emb(w)` over the distinct non-padding tokens of `ids`.
fn tfidf_vector(ids: &[u32], emb: &Tensor, idf: &dyn Fn(u32) -> f64) -> Vec<f64> {
    let d = emb.dims2().1;
    let tokens: Vec<u32> = ids.iter().copied().filter(|&t| t != PAD).collect();
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in &tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut distinct: Vec<_> = counts.into_iter().collect();
    distinct.sort_unstable();
    let mut out = vec![0.0; d];
    for (t, c) in distinct {
        let w = c as f64 / tokens.len() as f64 * idf(t);
        for (o, e) in out.iter_mut().zip(emb.row_slice(t as usize)) {
            *o += w * e;
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Unpersonalized reference ranker: cosine between tf-idf weighted
/// embedding sums of the concatenated context and of each candidate.
pub fn tfidf_baseline_rank(
    context: &[&[u32]],
    candidates: &[&[u32]],
    embeddings: &Tensor,
    idf: &dyn Fn(u32) -> f64,
) -> Vec<f64> {
    let ctx: Vec<u32> = context.iter().flat_map(|u| u.iter().copied()).collect();
    let c = tfidf_vector(&ctx, embeddings, idf);
    candidates
        .iter()
        .map(|r| cosine(&c, &tfidf_vector(r, embeddings, idf)))
        .collect()
}

pub fn baseline_scores(
    examples: &[EncodedExample],
    embeddings: &Tensor,
    idf: &dyn Fn(u32) -> f64,
) -> Vec<f64> {
    examples
        .iter()
        .map(|ex| {
            let turns: Vec<&[u32]> = ex.active_turns().map(|j| ex.context_turn(j)).collect();
            tfidf_baseline_rank(&turns, &[&ex.response_ids], embeddings, idf)[0]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_count_against_the_gold() {
        let g = vec![vec![0.5, 0.5, 0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        assert_eq!(gold_rank(&g[0], 10), 3);
        assert_eq!(recall_at_k(&g, 10, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&g, 10, 5).unwrap(), 1.0);
        assert!((mrr(&g, 10).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // first negative ties the gold: R2@1 misses
        assert_eq!(recall_at_k(&g, 2, 1).unwrap(), 0.0);
    }

    #[test]
    fn short_groups_and_bad_k_are_errors() {
        let g = vec![vec![1.0; 5]];
        assert!(matches!(recall_at_k(&g, 10, 1), Err(EvalError::GroupTooSmall { have: 5, .. })));
        assert!(recall_at_k(&g, 2, 3).is_err());
        assert!(matches!(mrr(&[], 10), Err(EvalError::Empty)));
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let g: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|i| 10.0 - i as f64).collect()).collect();
        let r = MetricsReport::from_groups(&g).unwrap();
        assert_eq!((r.r2_1, r.r10_1, r.r10_2, r.r10_5, r.mrr), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn baseline_prefers_shared_words() {
        let emb = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let idf = |_| 1.0;
        let s = tfidf_baseline_rank(&[&[2, 2, 0]], &[&[2, 0], &[3], &[0, 0]], &emb, &idf);
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0, "zero-norm candidate");
    }
}
