//! Per-user n-gram TF-IDF statistics and the personalized attention
//! weights derived from them.
//!
//! Each user's history is one document. For a gram `g` of order `l`:
//! `tf(g, u) = count(g, u) / total_l(u)` and `idf(g) = ln(N / df(g))`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedHistory, PAD};
use crate::nn::{window_before, Tensor};

pub const ORDERS: usize = 3;
pub const FORMAT_HEADER: &str = "# phmn-tfidf v1";

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("tf-idf model needs at least one user")]
    NoUsers,
    #[error("weight vector of length {got} does not match {expected} response positions")]
    Length { expected: usize, got: usize },
    #[error("malformed tf-idf file {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Gram = Vec<u32>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NgramDocument {
    pub user_id: String,
    /// `counts[l-1]` maps each l-gram to its count.
    pub counts: [BTreeMap<Gram, u64>; ORDERS],
    pub totals: [u64; ORDERS],
}

impl NgramDocument {
    pub fn from_utterances(user_id: &str, utterances: &[Vec<u32>]) -> Self {
        let mut doc = NgramDocument {
            user_id: user_id.to_string(),
            ..Default::default()
        };
        for utt in utterances {
            for l in 1..=ORDERS {
                for gram in utt.windows(l) {
                    if gram.contains(&PAD) {
                        continue;
                    }
                    *doc.counts[l - 1].entry(gram.to_vec()).or_default() += 1;
                    doc.totals[l - 1] += 1;
                }
            }
        }
        doc
    }

    pub fn count(&self, gram: &[u32]) -> u64 {
        let l = gram.len();
        if l == 0 || l > ORDERS {
            return 0;
        }
        self.counts[l - 1].get(gram).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfidfModel {
    pub documents: BTreeMap<String, NgramDocument>,
    pub doc_count: usize,
    pub df: [BTreeMap<Gram, u64>; ORDERS],
}

/// How response weights are post-processed before masking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Each vector divided by its maximum.
    #[default]
    Rescaled,
    /// Raw tf-idf scores.
    Raw,
    /// Every weight is one.
    Off,
}

/// Weight vectors a¹, a², a³ over response positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub a: [Vec<f64>; ORDERS],
}

impl AttentionWeights {
    pub fn ones(n: usize) -> Self {
        Self {
            a: std::array::from_fn(|_| vec![1.0; n]),
        }
    }

    pub fn len(&self) -> usize {
        self.a[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.a[0].is_empty()
    }
}

pub fn build_tfidf(histories: &[EncodedHistory]) -> Result<TfidfModel, PersonaError> {
    if histories.is_empty() {
        return Err(PersonaError::NoUsers);
    }
    let mut documents = BTreeMap::new();
    let mut df: [BTreeMap<Gram, u64>; ORDERS] = Default::default();
    for h in histories {
        let doc = NgramDocument::from_utterances(&h.user_id, &h.utterances);
        for (l, counts) in doc.counts.iter().enumerate() {
            for g in counts.keys() {
                *df[l].entry(g.clone()).or_default() += 1;
            }
        }
        documents.insert(h.user_id.clone(), doc);
    }
    Ok(TfidfModel {
        doc_count: documents.len(),
        documents,
        df,
    })
}

impl TfidfModel {
    pub fn idf(&self, gram: &[u32]) -> f64 {
        let l = gram.len();
        if l == 0 || l > ORDERS {
            return 0.0;
        }
        match self.df[l - 1].get(gram) {
            Some(&d) if d > 0 => (self.doc_count as f64 / d as f64).ln(),
            _ => 0.0,
        }
    }

    pub fn tf(&self, user: &str, gram: &[u32]) -> f64 {
        let Some(doc) = self.documents.get(user) else {
            return 0.0;
        };
        let total = doc.totals[gram.len() - 1];
        if total == 0 {
            return 0.0;
        }
        doc.count(gram) as f64 / total as f64
    }

    pub fn tfidf(&self, user: &str, gram: &[u32]) -> f64 {
        self.tf(user, gram) * self.idf(gram)
    }

    /// Raw per-position scores: position `k` of order `l` scores the gram
    /// spanning `[k - (l-1)/2, k + l/2]`; spans leaving the sequence or
    /// touching padding score zero.
    pub fn raw_scores(&self, response_ids: &[u32], user: &str, l: usize) -> Vec<f64> {
        let n = response_ids.len();
        let before = window_before(l);
        (0..n)
            .map(|k| {
                if k < before || k - before + l > n {
                    return 0.0;
                }
                let gram = &response_ids[k - before..k - before + l];
                if gram.contains(&PAD) {
                    0.0
                } else {
                    self.tfidf(user, gram)
                }
            })
            .collect()
    }

    /// Attention weights of `user` over the positions of a (padded) response.
    pub fn response_weights(&self, response_ids: &[u32], user: &str, mode: MaskMode) -> AttentionWeights {
        let n = response_ids.len();
        if mode == MaskMode::Off {
            return AttentionWeights::ones(n);
        }
        if !self.documents.contains_key(user) {
            log::warn!("user {user} has no tf-idf document; using uniform weights");
            return AttentionWeights::ones(n);
        }
        AttentionWeights {
            a: std::array::from_fn(|i| {
                let mut v = self.raw_scores(response_ids, user, i + 1);
                let max = v.iter().cloned().fold(0.0, f64::max);
                if max <= 0.0 {
                    v.fill(1.0);
                } else if mode == MaskMode::Rescaled {
                    v.iter_mut().for_each(|x| *x /= max);
                }
                v
            }),
        }
    }

    /// Write `tfidf.tsv` (`l \t gram \t df`) and `counts.tsv`
    /// (`user \t l \t gram \t count`), grams as space-separated token ids.
    pub fn write_dir(&self, dir: &Path) -> Result<(), PersonaError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("tfidf.tsv"))?);
        writeln!(w, "{FORMAT_HEADER}\tusers={}", self.doc_count)?;
        for (l, df) in self.df.iter().enumerate() {
            for (g, d) in df {
                writeln!(w, "{}\t{}\t{}", l + 1, join_gram(g), d)?;
            }
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("counts.tsv"))?);
        writeln!(w, "{FORMAT_HEADER}")?;
        for (user, doc) in &self.documents {
            // Users with empty histories still need a row to stay known.
            writeln!(w, "{user}\t0\t\t0")?;
            for (l, counts) in doc.counts.iter().enumerate() {
                for (g, c) in counts {
                    writeln!(w, "{user}\t{}\t{}\t{c}", l + 1, join_gram(g))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, PersonaError> {
        let mut doc_count = None;
        let mut df: [BTreeMap<Gram, u64>; ORDERS] = Default::default();
        for_each_row(&dir.join("tfidf.tsv"), |line, fields, err| {
            if line == 1 {
                let n = fields
                    .get(1)
                    .and_then(|f| f.strip_prefix("users="))
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|_| fields[0] == FORMAT_HEADER)
                    .ok_or_else(|| err("bad header"))?;
                doc_count = Some(n);
                return Ok(());
            }
            let [l, g, d] = fields else {
                return Err(err("expected 3 fields"));
            };
            let l = parse_order(l).ok_or_else(|| err("bad order"))?;
            let g = parse_gram(g, l).ok_or_else(|| err("bad gram"))?;
            df[l - 1].insert(g, d.parse().map_err(|_| err("bad df"))?);
            Ok(())
        })?;
        let mut documents: BTreeMap<String, NgramDocument> = BTreeMap::new();
        for_each_row(&dir.join("counts.tsv"), |line, fields, err| {
            if line == 1 {
                return if fields == [FORMAT_HEADER] {
                    Ok(())
                } else {
                    Err(err("bad header"))
                };
            }
            let [user, l, g, c] = fields else {
                return Err(err("expected 4 fields"));
            };
            let doc = documents
                .entry(user.to_string())
                .or_insert_with(|| NgramDocument {
                    user_id: user.to_string(),
                    ..Default::default()
                });
            if *l == "0" {
                return Ok(());
            }
            let l = parse_order(l).ok_or_else(|| err("bad order"))?;
            let g = parse_gram(g, l).ok_or_else(|| err("bad gram"))?;
            let c: u64 = c.parse().map_err(|_| err("bad count"))?;
            doc.counts[l - 1].insert(g, c);
            doc.totals[l - 1] += c;
            Ok(())
        })?;
        let doc_count = doc_count.unwrap_or(0);
        if doc_count == 0 || doc_count != documents.len() {
            return Err(PersonaError::Parse {
                file: "counts.tsv".into(),
                line: 0,
                msg: format!("{} users listed, header says {doc_count}", documents.len()),
            });
        }
        Ok(Self {
            documents,
            doc_count,
            df,
        })
    }
}

fn join_gram(g: &[u32]) -> String {
    g.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_order(s: &str) -> Option<usize> {
    s.parse().ok().filter(|l| (1..=ORDERS).contains(l))
}

fn parse_gram(s: &str, l: usize) -> Option<Gram> {
    let g: Vec<u32> = s.split(' ').map(str::parse).collect::<Result<_, _>>().ok()?;
    (g.len() == l).then_some(g)
}

fn for_each_row<F>(path: &Path, mut f: F) -> Result<(), PersonaError>
where
    F: FnMut(usize, &[&str], &dyn Fn(&str) -> PersonaError) -> Result<(), PersonaError>,
{
    let file = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: &str| PersonaError::Parse {
            file: file.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        f(i + 1, &fields, &err)?;
    }
    Ok(())
}

/// `A[i][j] = a[i]` for `n_u` columns.
pub fn expand_mask(a: &[f64], n_u: usize) -> Tensor {
    let data = a.iter().flat_map(|&v| std::iter::repeat_n(v, n_u)).collect();
    Tensor::new(vec![a.len(), n_u], data).expect("mask shape")
}
