//! Synthetic dialogue logs with a planted persona signal.
//!
//! Every session has one asker who writes `context_turns` utterances about a
//! topic and one responder who answers once. An answer mentions the topic
//! and carries the responder's signature bigram; questions never carry a
//! signature. Context therefore identifies the topic only, while the
//! responder's history (answers from other sessions) reveals the signature.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RawSession, Turn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub sessions: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub fillers: usize,
    /// Size of each half of the signature alphabet; signatures are pairs.
    pub signature_alphabet: usize,
    pub context_turns: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 40,
            sessions: 2000,
            topics: 6,
            words_per_topic: 4,
            fillers: 12,
            signature_alphabet: 8,
            context_turns: 3,
            seed: 0,
        }
    }
}

/// Signature bigram of user `u`: two tokens from disjoint alphabets, so
/// that each token alone is shared with other users.
pub fn signature(u: usize, alphabet: usize) -> (String, String) {
    (format!("sa{}", u % alphabet), format!("sb{}", (u / alphabet + u) % alphabet))
}

pub fn user_name(u: usize) -> String {
    format!("user{u:03}")
}

pub fn persona_sessions(cfg: &SynthConfig) -> Vec<RawSession> {
    assert!(cfg.users >= 2, "need two users");
    assert!(
        cfg.users <= cfg.signature_alphabet * cfg.signature_alphabet,
        "signature alphabet too small for distinct signatures"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("w{i}")).collect();
    let topic = |t: usize, k: usize| format!("t{t}x{k}");
    (0..cfg.sessions)
        .map(|s| {
            let asker = rng.random_range(0..cfg.users);
            let mut responder = rng.random_range(0..cfg.users - 1);
            if responder >= asker {
                responder += 1;
            }
            let t = rng.random_range(0..cfg.topics);
            let mut turns = Vec::with_capacity(cfg.context_turns + 1);
            for _ in 0..cfg.context_turns {
                let mut words: Vec<String> = (0..rng.random_range(2..=4))
                    .map(|_| fillers.choose(&mut rng).expect("fillers").clone())
                    .collect();
                let at = rng.random_range(0..=words.len());
                words.insert(at, topic(t, rng.random_range(0..cfg.words_per_topic)));
                turns.push(Turn {
                    user: user_name(asker),
                    text: words.join(" "),
                });
            }
            let (a, b) = signature(responder, cfg.signature_alphabet);
            let mut words: Vec<String> = (0..rng.random_range(1..=3))
                .map(|_| fillers.choose(&mut rng).expect("fillers").clone())
                .collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, topic(t, rng.random_range(0..cfg.words_per_topic)));
            let at = rng.random_range(0..=words.len());
            words.insert(at, b);
            words.insert(at, a);
            turns.push(Turn {
                user: user_name(responder),
                text: words.join(" "),
            });
            RawSession {
                session_id: format!("s{s:05}"),
                turns,
            }
        })
        .collect()
}
