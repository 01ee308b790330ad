//! Dialogue-session ingestion and the personalized case construction
//! pipeline: valid-user filtering, sliding-window case extraction with
//! per-case histories, negative sampling, vocabulary building and
//! fixed-shape encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("insufficient negative pool: need {need}, have {have}")]
    InsufficientNegativePool { need: usize, have: usize },
    #[error("empty response")]
    EmptyResponse,
    #[error("invalid corpus config `{key}`: {msg}")]
    Config { key: &'static str, msg: String },
    #[error("no dialogue cases survive filtering")]
    NoCases,
    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Read sessions from JSON Lines, one `{"session_id", "turns": [{"user", "text"}]}` per line.
pub fn read_sessions<R: Read>(reader: R) -> Result<Vec<RawSession>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RawSession = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if s.turns.is_empty() {
            return Err(CorpusError::Parse {
                line: i + 1,
                msg: format!("session {} has no turns", s.session_id),
            });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_sessions<W: Write>(mut w: W, sessions: &[RawSession]) -> Result<(), CorpusError> {
    for s in sessions {
        serde_json::to_writer(&mut w, s).map_err(|e| CorpusError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryUtterance {
    pub session_id: String,
    pub text: String,
}

/// The most recent `cap` utterances a user produced, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub utterances: Vec<HistoryUtterance>,
    pub cap: usize,
    /// Utterance count before capping.
    pub total: usize,
}

impl UserHistory {
    /// History texts with every utterance from `session_id` removed.
    pub fn excluding_session(&self, session_id: &str) -> Vec<String> {
        self.utterances
            .iter()
            .filter(|u| u.session_id != session_id)
            .map(|u| u.text.clone())
            .collect()
    }
}

pub type ValidUsers = BTreeMap<String, UserHistory>;

/// Users with at least `min_utts` utterances across all sessions, with
/// their chronological histories capped to the most recent `cap`.
pub fn filter_valid_users(
    sessions: &[RawSession],
    min_utts: usize,
    cap: usize,
) -> Result<ValidUsers, CorpusError> {
    if min_utts == 0 {
        return Err(CorpusError::Config {
            key: "min_utts",
            msg: "must be at least 1".into(),
        });
    }
    let mut all: BTreeMap<String, Vec<HistoryUtterance>> = BTreeMap::new();
    for s in sessions {
        for t in &s.turns {
            all.entry(t.user.clone()).or_default().push(HistoryUtterance {
                session_id: s.session_id.clone(),
                text: t.text.clone(),
            });
        }
    }
    Ok(all
        .into_iter()
        .filter(|(_, utts)| utts.len() >= min_utts)
        .map(|(user_id, utts)| {
            let total = utts.len();
            let skip = total.saturating_sub(cap);
            let utterances = utts.into_iter().skip(skip).collect();
            (
                user_id.clone(),
                UserHistory {
                    user_id,
                    utterances,
                    cap,
                    total,
                },
            )
        })
        .collect())
}

/// One six-point group plus its label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueCase {
    pub session_id: String,
    /// Index of the first context turn within the source session.
    pub start: usize,
    pub context: Vec<String>,
    pub response: String,
    pub label: u8,
    pub speaker_id: String,
    pub speaker_history: Vec<String>,
    pub responder_id: String,
    pub responder_history: Vec<String>,
}

/// Sliding-window case extraction over sessions whose participants are all
/// valid users. Every window with a context of `min_turns..=max_turns`
/// utterances followed by one response turn yields a positive case.
pub fn split_sessions(
    sessions: &[RawSession],
    users: &ValidUsers,
    min_turns: usize,
    max_turns: usize,
) -> Result<Vec<DialogueCase>, CorpusError> {
    if min_turns == 0 || max_turns < min_turns {
        return Err(CorpusError::Config {
            key: if min_turns == 0 { "min_turns" } else { "max_turns" },
            msg: format!("need 1 <= min_turns <= max_turns, got {min_turns}..{max_turns}"),
        });
    }
    let mut cases = Vec::new();
    for s in sessions {
        if !s.turns.iter().all(|t| users.contains_key(&t.user)) {
            continue;
        }
        let n = s.turns.len();
        for end in min_turns..n {
            for len in min_turns..=max_turns.min(end) {
                let start = end - len;
                let responder = &s.turns[end].user;
                let speaker = s.turns[start..end]
                    .iter()
                    .rev()
                    .find(|t| &t.user != responder)
                    .unwrap_or(&s.turns[end - 1])
                    .user
                    .clone();
                cases.push(DialogueCase {
                    session_id: s.session_id.clone(),
                    start,
                    context: s.turns[start..end].iter().map(|t| t.text.clone()).collect(),
                    response: s.turns[end].text.clone(),
                    label: 1,
                    speaker_history: users[&speaker].excluding_session(&s.session_id),
                    speaker_id: speaker,
                    responder_id: responder.clone(),
                    responder_history: users[responder].excluding_session(&s.session_id),
                });
            }
        }
    }
    Ok(cases)
}

/// Distinct responses of a case list, in sorted order.
pub fn response_pool(cases: &[DialogueCase]) -> Vec<String> {
    cases
        .iter()
        .map(|c| c.response.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Each positive followed by `ratio` label-0 copies with responses drawn
/// without replacement from `pool`, never equal to the positive's own.
pub fn sample_negatives(
    positives: &[DialogueCase],
    ratio: usize,
    pool: &[String],
    seed: u64,
) -> Result<Vec<DialogueCase>, CorpusError> {
    if ratio == 0 {
        return Err(CorpusError::Config {
            key: "neg_ratio",
            msg: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));
    for pos in positives {
        let own = pool.iter().filter(|r| **r == pos.response).count();
        let have = pool.len() - own;
        if have < ratio {
            return Err(CorpusError::InsufficientNegativePool { need: ratio, have });
        }
        out.push(pos.clone());
        let mut taken = 0;
        // Draw ratio + own indices so that enough survive the exclusion.
        for idx in sample(&mut rng, pool.len(), ratio + own) {
            if pool[idx] == pos.response {
                continue;
            }
            if taken == ratio {
                break;
            }
            let mut neg = pos.clone();
            neg.response = pool[idx].clone();
            neg.label = 0;
            out.push(neg);
            taken += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Top-`cap` tokens by frequency (ties broken lexicographically) after
    /// the reserved padding and unknown entries.
    pub fn build<'a, I>(texts: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap);
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut counts = vec![0, 0];
        for (t, c) in ranked {
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Tokens of the non-padding ids.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// `token \t id \t count` per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{t}\t{i}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: Read>(r: R) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let bad = |msg: &str| CorpusError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(t), Some(id), Some(c)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected token, id, count"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ordered"));
            }
            tokens.push(t.to_string());
            counts.push(c.parse().map_err(|_| bad("bad count"))?);
        }
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(CorpusError::Format(
                "vocabulary must start with padding and unknown tokens".into(),
            ));
        }
        Ok(Self::from_parts(tokens, counts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeLimits {
    pub max_turns: usize,
    pub max_len: usize,
    pub history_cap: usize,
}

impl Default for EncodeLimits {
    fn default() -> Self {
        Self {
            max_turns: 10,
            max_len: 50,
            history_cap: 100,
        }
    }
}

/// Fixed-shape id matrices for one labeled case; padding rows are all zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub limits: EncodeLimits,
    /// `[max_turns × max_len]`, row-major.
    pub context_ids: Vec<u32>,
    pub context_lengths: Vec<u32>,
    /// `[max_len]`.
    pub response_ids: Vec<u32>,
    /// `[history_cap × max_len]`, oldest first.
    pub history_ids: Vec<u32>,
    pub history_lengths: Vec<u32>,
    pub label: u8,
    pub responder_id: String,
    /// Index of the candidate group this example belongs to.
    pub group: u32,
}

impl EncodedExample {
    pub fn context_turn(&self, i: usize) -> &[u32] {
        let l = self.limits.max_len;
        &self.context_ids[i * l..(i + 1) * l]
    }

    pub fn history_utterance(&self, i: usize) -> &[u32] {
        let l = self.limits.max_len;
        &self.history_ids[i * l..(i + 1) * l]
    }

    /// Indices of non-empty context turns, in order.
    pub fn active_turns(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.limits.max_turns).filter(|&i| self.context_lengths[i] > 0)
    }

    pub fn active_history(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.limits.history_cap).filter(|&i| self.history_lengths[i] > 0)
    }

    /// Keep only the most recent `n` history utterances.
    pub fn truncate_history(&mut self, n: usize) {
        let active: Vec<usize> = self.active_history().collect();
        let drop = active.len().saturating_sub(n);
        let l = self.limits.max_len;
        let kept: Vec<usize> = active[drop..].to_vec();
        let mut ids = vec![PAD; self.history_ids.len()];
        let mut lens = vec![0; self.history_lengths.len()];
        for (slot, &src) in kept.iter().enumerate() {
            ids[slot * l..(slot + 1) * l].copy_from_slice(self.history_utterance(src));
            lens[slot] = self.history_lengths[src];
        }
        self.history_ids = ids;
        self.history_lengths = lens;
    }
}

fn encode_row(vocab: &Vocabulary, text: &str, max_len: usize, dst: &mut [u32]) -> u32 {
    let mut n = 0;
    for (slot, tok) in dst.iter_mut().zip(tokenize(text)) {
        *slot = vocab.id(tok);
        n += 1;
    }
    debug_assert!(n <= max_len);
    n as u32
}

/// Encode a case: OOV → UNK, utterances truncated to their first
/// `max_len` tokens, contexts to their latest `max_turns` utterances,
/// histories to their latest `history_cap` utterances.
pub fn encode_example(
    case: &DialogueCase,
    vocab: &Vocabulary,
    limits: EncodeLimits,
    group: u32,
) -> Result<EncodedExample, CorpusError> {
    let EncodeLimits {
        max_turns,
        max_len,
        history_cap,
    } = limits;
    if tokenize(&case.response).is_empty() {
        return Err(CorpusError::EmptyResponse);
    }
    let mut response_ids = vec![PAD; max_len];
    encode_row(vocab, &case.response, max_len, &mut response_ids);

    let mut context_ids = vec![PAD; max_turns * max_len];
    let mut context_lengths = vec![0; max_turns];
    let skip = case.context.len().saturating_sub(max_turns);
    for (i, text) in case.context[skip..].iter().enumerate() {
        context_lengths[i] = encode_row(
            vocab,
            text,
            max_len,
            &mut context_ids[i * max_len..(i + 1) * max_len],
        );
    }

    let mut history_ids = vec![PAD; history_cap * max_len];
    let mut history_lengths = vec![0; history_cap];
    let skip = case.responder_history.len().saturating_sub(history_cap);
    for (i, text) in case.responder_history[skip..].iter().enumerate() {
        history_lengths[i] = encode_row(
            vocab,
            text,
            max_len,
            &mut history_ids[i * max_len..(i + 1) * max_len],
        );
    }

    Ok(EncodedExample {
        limits,
        context_ids,
        context_lengths,
        response_ids,
        history_ids,
        history_lengths,
        label: case.label,
        responder_id: case.responder_id.clone(),
        group,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub cases: usize,
    pub avg_context_turns: f64,
    pub avg_context_words: f64,
    pub avg_response_words: f64,
    pub avg_history_utts: f64,
}

/// Arithmetic means over a list of cases. History length is averaged over
/// both the speaker and the responder slot of each case.
pub fn corpus_stats(cases: &[DialogueCase]) -> Option<CorpusStats> {
    if cases.is_empty() {
        return None;
    }
    let n = cases.len() as f64;
    let mean = |f: &dyn Fn(&DialogueCase) -> usize| cases.iter().map(f).sum::<usize>() as f64 / n;
    Some(CorpusStats {
        cases: cases.len(),
        avg_context_turns: mean(&|c| c.context.len()),
        avg_context_words: mean(&|c| c.context.iter().map(|u| tokenize(u).len()).sum()),
        avg_response_words: mean(&|c| tokenize(&c.response).len()),
        avg_history_utts: mean(&|c| c.speaker_history.len() + c.responder_history.len()) / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_utts: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub history_cap: usize,
    pub max_len: usize,
    pub vocab_cap: usize,
    pub neg_train: usize,
    pub neg_eval: usize,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_utts: 30,
            min_turns: 5,
            max_turns: 10,
            history_cap: 100,
            max_len: 50,
            vocab_cap: 30000,
            neg_train: 1,
            neg_eval: 9,
            valid_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |key: &'static str, msg: &str| {
            Err(CorpusError::Config {
                key,
                msg: msg.to_string(),
            })
        };
        if self.min_utts == 0 {
            return bad("min_utts", "must be at least 1");
        }
        if self.min_turns == 0 {
            return bad("min_turns", "must be at least 1");
        }
        if self.max_turns < self.min_turns {
            return bad("max_turns", "must be at least min_turns");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive");
        }
        if self.history_cap == 0 {
            return bad("history_cap", "must be positive");
        }
        if self.vocab_cap == 0 {
            return bad("vocab_cap", "must be positive");
        }
        if self.neg_train == 0 {
            return bad("neg_train", "must be at least 1");
        }
        if self.neg_eval == 0 {
            return bad("neg_eval", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.valid_frac) {
            return bad("valid_frac", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.test_frac) || self.valid_frac + self.test_frac >= 1.0 {
            return bad("test_frac", "split fractions must leave a training split");
        }
        Ok(())
    }

    pub fn limits(&self) -> EncodeLimits {
        EncodeLimits {
            max_turns: self.max_turns,
            max_len: self.max_len,
            history_cap: self.history_cap,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    /// Positives each followed by their negatives.
    pub cases: Vec<DialogueCase>,
    pub group_size: usize,
    pub examples: Vec<EncodedExample>,
}

/// In-memory result of the corpus pipeline.
#[derive(Clone, Debug)]
pub struct BuiltCorpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub users: ValidUsers,
    pub splits: Vec<Split>,
    pub stats: BTreeMap<String, CorpusStats>,
}

/// Derive a sub-seed so that independent stages draw independent streams.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let digest = fingerprint(format!("{seed}:{stage}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

pub fn build_corpus(
    sessions: &[RawSession],
    cfg: &CorpusConfig,
) -> Result<BuiltCorpus, CorpusError> {
    cfg.validate()?;
    let users = filter_valid_users(sessions, cfg.min_utts, cfg.history_cap)?;
    let mut positives = split_sessions(sessions, &users, cfg.min_turns, cfg.max_turns)?;
    positives.retain(|c| !tokenize(&c.response).is_empty());
    if positives.is_empty() {
        return Err(CorpusError::NoCases);
    }
    positives.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split")));
    let n = positives.len();
    let n_valid = (n as f64 * cfg.valid_frac).round() as usize;
    let n_test = (n as f64 * cfg.test_frac).round() as usize;
    let n_train = n - n_valid - n_test;
    let test = positives.split_off(n_train + n_valid);
    let valid = positives.split_off(n_train);
    let train = positives;

    let vocab = Vocabulary::build(
        train
            .iter()
            .flat_map(|c| c.context.iter().chain(std::iter::once(&c.response)))
            .map(String::as_str),
        cfg.vocab_cap,
    );

    let mut stats = BTreeMap::new();
    let mut splits = Vec::new();
    for (name, pos) in SPLITS.iter().zip([train, valid, test]) {
        if let Some(s) = corpus_stats(&pos) {
            stats.insert(name.to_string(), s);
        }
        let ratio = if *name == "train" {
            cfg.neg_train
        } else {
            cfg.neg_eval
        };
        let pool = response_pool(&pos);
        let cases = if pos.is_empty() {
            Vec::new()
        } else {
            sample_negatives(&pos, ratio, &pool, derive_seed(cfg.seed, name))?
        };
        let group_size = ratio + 1;
        let examples = cases
            .iter()
            .enumerate()
            .map(|(i, c)| encode_example(c, &vocab, cfg.limits(), (i / group_size) as u32))
            .collect::<Result<Vec<_>, _>>()?;
        splits.push(Split {
            name: name.to_string(),
            cases,
            group_size,
            examples,
        });
    }
    Ok(BuiltCorpus {
        config: cfg.clone(),
        vocab,
        users,
        splits,
        stats,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

/// `manifest.json` of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub users: Vec<String>,
    pub splits: Vec<SplitManifest>,
    pub stats: BTreeMap<String, CorpusStats>,
    /// Description of the `<split>.bin` record layout.
    pub record_layout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub examples: usize,
    pub group_size: usize,
}

pub const EXAMPLES_MAGIC: &[u8; 8] = b"PHMNEXMP";
pub const FORMAT_VERSION: u32 = 1;

fn record_layout(limits: &EncodeLimits) -> Vec<String> {
    let EncodeLimits {
        max_turns,
        max_len,
        history_cap,
    } = *limits;
    vec![
        "header: magic[8]=PHMNEXMP, version u32, count u64, max_turns u32, max_len u32, history_cap u32".into(),
        "record (all u32 little-endian):".into(),
        "  label".into(),
        "  responder (index into manifest users)".into(),
        "  group".into(),
        format!("  context_lengths[{max_turns}]"),
        format!("  context_ids[{max_turns}x{max_len}]"),
        format!("  response_ids[{max_len}]"),
        format!("  history_lengths[{history_cap}]"),
        format!("  history_ids[{history_cap}x{max_len}]"),
    ]
}

fn put_u32s<W: Write>(w: &mut W, vals: &[u32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn write_examples<W: Write>(
    mut w: W,
    examples: &[EncodedExample],
    limits: &EncodeLimits,
    user_index: &HashMap<&str, u32>,
) -> Result<(), CorpusError> {
    w.write_all(EXAMPLES_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    put_u32s(
        &mut w,
        &[
            limits.max_turns as u32,
            limits.max_len as u32,
            limits.history_cap as u32,
        ],
    )?;
    for ex in examples {
        let responder = user_index
            .get(ex.responder_id.as_str())
            .copied()
            .ok_or_else(|| CorpusError::Format(format!("unknown user {}", ex.responder_id)))?;
        put_u32s(&mut w, &[ex.label as u32, responder, ex.group])?;
        put_u32s(&mut w, &ex.context_lengths)?;
        put_u32s(&mut w, &ex.context_ids)?;
        put_u32s(&mut w, &ex.response_ids)?;
        put_u32s(&mut w, &ex.history_lengths)?;
        put_u32s(&mut w, &ex.history_ids)?;
    }
    Ok(())
}

fn take_u32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn read_examples<R: Read>(
    r: R,
    users: &[String],
) -> Result<Vec<EncodedExample>, CorpusError> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != EXAMPLES_MAGIC {
        return Err(CorpusError::Format("not an encoded example file".into()));
    }
    let version = take_u32s(&mut r, 1)?[0];
    if version != FORMAT_VERSION {
        return Err(CorpusError::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let dims = take_u32s(&mut r, 3)?;
    let limits = EncodeLimits {
        max_turns: dims[0] as usize,
        max_len: dims[1] as usize,
        history_cap: dims[2] as usize,
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let head = take_u32s(&mut r, 3)?;
        let responder_id = users
            .get(head[1] as usize)
            .cloned()
            .ok_or_else(|| CorpusError::Format(format!("user index {} out of range", head[1])))?;
        out.push(EncodedExample {
            limits,
            context_lengths: take_u32s(&mut r, limits.max_turns)?,
            context_ids: take_u32s(&mut r, limits.max_turns * limits.max_len)?,
            response_ids: take_u32s(&mut r, limits.max_len)?,
            history_lengths: take_u32s(&mut r, limits.history_cap)?,
            history_ids: take_u32s(&mut r, limits.history_cap * limits.max_len)?,
            label: head[0] as u8,
            responder_id,
            group: head[2],
        });
    }
    Ok(out)
}

/// Encoded user histories, one JSON object per line:
/// `{"user_id": str, "utterances": [[id, ...], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedHistory {
    pub user_id: String,
    pub utterances: Vec<Vec<u32>>,
}

pub fn encode_histories(
    users: &ValidUsers,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<EncodedHistory> {
    users
        .values()
        .map(|h| EncodedHistory {
            user_id: h.user_id.clone(),
            utterances: h
                .utterances
                .iter()
                .map(|u| {
                    let mut ids = vocab.encode(&u.text);
                    ids.truncate(max_len);
                    ids
                })
                .collect(),
        })
        .collect()
}

pub fn read_histories<R: Read>(r: R) -> Result<Vec<EncodedHistory>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Write the corpus directory: `manifest.json`, `vocab.tsv`,
/// `histories.jsonl`, and per split `<split>.cases.jsonl` + `<split>.bin`.
pub fn write_corpus(dir: &Path, corpus: &BuiltCorpus) -> Result<Manifest, CorpusError> {
    fs::create_dir_all(dir)?;
    let mut vocab_bytes = Vec::new();
    corpus.vocab.write_tsv(&mut vocab_bytes)?;
    fs::write(dir.join("vocab.tsv"), &vocab_bytes)?;

    let users: Vec<String> = corpus.users.keys().cloned().collect();
    let user_index: HashMap<&str, u32> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i as u32))
        .collect();

    let mut w = BufWriter::new(File::create(dir.join("histories.jsonl"))?);
    for h in encode_histories(&corpus.users, &corpus.vocab, corpus.config.max_len) {
        serde_json::to_writer(&mut w, &h).map_err(|e| CorpusError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let limits = corpus.config.limits();
    let mut split_manifests = Vec::new();
    let mut digest_input = vocab_bytes;
    for split in &corpus.splits {
        let mut w = BufWriter::new(File::create(dir.join(format!("{}.cases.jsonl", split.name)))?);
        for c in &split.cases {
            serde_json::to_writer(&mut w, c).map_err(|e| CorpusError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut bytes = Vec::new();
        write_examples(&mut bytes, &split.examples, &limits, &user_index)?;
        fs::write(dir.join(format!("{}.bin", split.name)), &bytes)?;
        digest_input.extend_from_slice(&bytes);
        split_manifests.push(SplitManifest {
            name: split.name.clone(),
            examples: split.examples.len(),
            group_size: split.group_size,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        fingerprint: fingerprint(&digest_input),
        config: corpus.config.clone(),
        vocab_size: corpus.vocab.len(),
        users,
        splits: split_manifests,
        stats: corpus.stats.clone(),
        record_layout: record_layout(&limits),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CorpusError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::Format(e.to_string()))
}

pub fn read_vocab(dir: &Path) -> Result<Vocabulary, CorpusError> {
    Vocabulary::read_tsv(File::open(dir.join("vocab.tsv"))?)
}

/// Encoded examples of one split plus its group size.
pub fn load_split(dir: &Path, name: &str) -> Result<(Vec<EncodedExample>, usize), CorpusError> {
    let manifest = read_manifest(dir)?;
    let split = manifest
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| CorpusError::Format(format!("no split named {name}")))?;
    let examples = read_examples(File::open(dir.join(format!("{name}.bin")))?, &manifest.users)?;
    if examples.len() != split.examples {
        return Err(CorpusError::Format(format!(
            "{name}.bin holds {} examples, manifest says {}",
            examples.len(),
            split.examples
        )));
    }
    Ok((examples, split.group_size))
}
