//! Naive reference implementations checked against the library on random
//! instances. Shared by the core test suite and the acceptance target.
#![allow(dead_code)]

use phmn_core::corpus::{EncodedHistory, PAD};
use phmn_core::eval::{mrr, recall_at_k};
use phmn_core::model::Phmn;
use phmn_core::nn::{
    AdditiveAttention, AggCnn, AggCnnConfig, Graph, Gru, MultiHeadAttention, NgramConv, ParamStore, Tensor,
};
use phmn_core::persona::{build_tfidf, AttentionWeights, MaskMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-10;

type Mat = Vec<Vec<f64>>;
pub type Oracle = fn(&mut ChaCha8Rng) -> f64;

pub const ORACLES: &[(&str, Oracle)] = &[
    ("ngram_conv1d", ngram_conv1d),
    ("mhsa", mhsa),
    ("interaction", interaction),
    ("agg_cnn", agg_cnn),
    ("gru_step", gru_step),
    ("additive_pooling", additive_pooling),
    ("tfidf_weights", tfidf_weights),
    ("recall_at_k", recall),
    ("mrr", reciprocal_rank),
];

/// Largest discrepancy of `oracle` over `instances` random instances.
pub fn worst(oracle: Oracle, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances).map(|_| oracle(&mut rng)).fold(0.0, f64::max)
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Replace every parameter, biases and norm gains included, with noise.
fn randomize(ps: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in ps.get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row_slice(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn ngram_conv1d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d, l, f) = (
        rng.random_range(1..=7),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let mut ps = ParamStore::new();
    let conv = NgramConv::new(&mut ps, "c", l, d, f, rng);
    randomize(&mut ps, rng);
    let x = random_tensor(rng, &[n, d]);
    let mut g = Graph::new(&ps);
    let xv = g.constant(x.clone());
    let y = conv.forward(&mut g, xv).unwrap();

    let (w, b) = (ps.value(conv.w), ps.value(conv.b).data());
    let mut want = Vec::new();
    for k in 0..n as isize {
        let start = k - (l as isize - 1) / 2;
        for fi in 0..f {
            let mut s = b[fi];
            for o in 0..l as isize {
                let pos = start + o;
                if pos < 0 || pos >= n as isize {
                    continue;
                }
                for c in 0..d {
                    s += x.get2(pos as usize, c) * w.get2(o as usize * d + c, fi);
                }
            }
            want.push(s.max(0.0));
        }
    }
    diff(g.value(y).data(), &want)
}

pub fn mhsa(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=3);
    let n = rng.random_range(1..=6);
    let mut ps = ParamStore::new();
    let att = MultiHeadAttention::new(&mut ps, "a", d, heads, rng).unwrap();
    randomize(&mut ps, rng);
    let x = random_tensor(rng, &[n, d]);
    let mut g = Graph::new(&ps);
    let xv = g.constant(x.clone());
    let y = att.forward(&mut g, xv, xv, xv).unwrap();

    let xm = mat(&x);
    let q = mm(&xm, &mat(ps.value(att.wq)));
    let k = mm(&xm, &mat(ps.value(att.wk)));
    let v = mm(&xm, &mat(ps.value(att.wv)));
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in 0..dh {
                cat[i][h * dh + c] = (0..n).map(|j| a[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    let o = mm(&cat, &mat(ps.value(att.wo)));
    let (gamma, beta) = (ps.value(att.norm.gamma).data(), ps.value(att.norm.beta).data());
    let mut want = Vec::new();
    for i in 0..n {
        let r: Vec<f64> = (0..d).map(|c| xm[i][c] + o[i][c]).collect();
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            want.push((r[c] - mean) / (var + 1e-6).sqrt() * gamma[c] + beta[c]);
        }
    }
    diff(g.value(y).data(), &want)
}

/// Interaction maps `M[i][j] = r_i · u_j`, then row-wise persona masks.
pub fn interaction(rng: &mut ChaCha8Rng) -> f64 {
    let (n_r, n_u, d) = (rng.random_range(1..=7), rng.random_range(1..=7), rng.random_range(1..=6));
    let ps = ParamStore::new();
    let r = random_tensor(rng, &[n_r, d]);
    let u = random_tensor(rng, &[n_u, d]);
    let a: [Vec<f64>; 3] = std::array::from_fn(|_| (0..n_r).map(|_| rng.random_range(0.0..1.0)).collect());
    let mut g = Graph::new(&ps);
    let (rv, uv) = (g.constant(r.clone()), g.constant(u.clone()));
    let maps: [_; 5] = std::array::from_fn(|_| g.matmul_nt(rv, uv).unwrap());
    let plain = maps[0];
    let masked = Phmn::apply_masks(&mut g, maps, &AttentionWeights { a: a.clone() }).unwrap();

    let m: Mat = (0..n_r)
        .map(|i| (0..n_u).map(|j| (0..d).map(|c| r.get2(i, c) * u.get2(j, c)).sum()).collect())
        .collect();
    let mut worst = diff(g.value(plain).data(), &flat(&m));
    // a¹ on word, 1-gram and attention; a² on 2-gram; a³ on 3-gram
    for (ch, order) in [0, 0, 1, 2, 0].into_iter().enumerate() {
        let mut want = Vec::new();
        for i in 0..n_r {
            want.extend(m[i].iter().map(|x| x * a[order][i]));
        }
        worst = worst.max(diff(g.value(masked[ch]).data(), &want));
    }
    worst
}

type Volume = Vec<Vec<Vec<f64>>>;

fn conv_same(x: &Volume, w: &Tensor, b: &[f64]) -> Volume {
    let &[f, c, k, _] = w.shape() else { panic!("kernel rank") };
    let (h, wd) = (x[0].len(), x[0][0].len());
    let half = (k / 2) as isize;
    let wat = |fi: usize, ci: usize, p: usize, q: usize| w.data()[((fi * c + ci) * k + p) * k + q];
    (0..f)
        .map(|fi| {
            (0..h)
                .map(|i| {
                    (0..wd)
                        .map(|j| {
                            let mut s = b[fi];
                            for ci in 0..c {
                                for p in 0..k {
                                    for q in 0..k {
                                        let (ii, jj) = (i as isize + p as isize - half, j as isize + q as isize - half);
                                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                            s += x[ci][ii as usize][jj as usize] * wat(fi, ci, p, q);
                                        }
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn relu_pool(x: &Volume, k: usize) -> Volume {
    let (h, w) = (x[0].len(), x[0][0].len());
    x.iter()
        .map(|plane| {
            (0..h.div_ceil(k))
                .map(|oi| {
                    (0..w.div_ceil(k))
                        .map(|oj| {
                            let mut best = f64::NEG_INFINITY;
                            for row in plane.iter().take(((oi + 1) * k).min(h)).skip(oi * k) {
                                for v in row.iter().take(((oj + 1) * k).min(w)).skip(oj * k) {
                                    best = best.max(v.max(0.0));
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn agg_cnn(rng: &mut ChaCha8Rng) -> f64 {
    let pool = rng.random_range(2..=3);
    let cfg = AggCnnConfig {
        channels: rng.random_range(1..=3),
        height: rng.random_range(pool..=7),
        width: rng.random_range(pool..=7),
        conv1_filters: rng.random_range(1..=3),
        conv2_filters: rng.random_range(1..=3),
        kernel: [1, 3][rng.random_range(0..2)],
        pool,
        hidden: rng.random_range(1..=4),
        out: rng.random_range(1..=3),
    };
    let mut ps = ParamStore::new();
    let agg = AggCnn::new(&mut ps, "g", cfg.clone(), rng).unwrap();
    randomize(&mut ps, rng);
    let x = random_tensor(rng, &[cfg.channels, cfg.height, cfg.width]);
    let mut g = Graph::new(&ps);
    let xv = g.constant(x.clone());
    let y = agg.forward(&mut g, xv).unwrap();

    let vol: Volume = (0..cfg.channels)
        .map(|c| {
            (0..cfg.height)
                .map(|i| (0..cfg.width).map(|j| x.data()[(c * cfg.height + i) * cfg.width + j]).collect())
                .collect()
        })
        .collect();
    let v1 = relu_pool(&conv_same(&vol, ps.value(agg.conv1_w), ps.value(agg.conv1_b).data()), pool);
    let v2 = relu_pool(&conv_same(&v1, ps.value(agg.conv2_w), ps.value(agg.conv2_b).data()), pool);
    let feats: Vec<f64> = v2.iter().flatten().flatten().copied().collect();
    let affine = |x: &[f64], w: &Tensor, b: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w.get2(i, j)).sum::<f64>())
            .collect()
    };
    let hb = agg.hidden.b.unwrap();
    let hid: Vec<f64> = affine(&feats, ps.value(agg.hidden.w), ps.value(hb).data())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let ob = agg.out.b.unwrap();
    let want = affine(&hid, ps.value(agg.out.w), ps.value(ob).data());
    diff(g.value(y).data(), &want)
}

pub fn gru_step(rng: &mut ChaCha8Rng) -> f64 {
    let (d_in, d) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let mut ps = ParamStore::new();
    let gru = Gru::new(&mut ps, "r", d_in, d, rng);
    randomize(&mut ps, rng);
    let x = random_tensor(rng, &[1, d_in]);
    let h = random_tensor(rng, &[1, d]);
    let mut g = Graph::new(&ps);
    let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
    let y = gru.step(&mut g, xv, hv).unwrap();

    let gate = |x: &[f64], h: &[f64], w, u, b| -> Vec<f64> {
        let (w, u, b): (&Tensor, &Tensor, &Tensor) = (ps.value(w), ps.value(u), ps.value(b));
        (0..d)
            .map(|j| {
                b.data()[j]
                    + (0..d_in).map(|i| x[i] * w.get2(i, j)).sum::<f64>()
                    + (0..d).map(|i| h[i] * u.get2(i, j)).sum::<f64>()
            })
            .collect()
    };
    let (xs, hs) = (x.data(), h.data());
    let z: Vec<f64> = gate(xs, hs, gru.wz, gru.uz, gru.bz).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(xs, hs, gru.wr, gru.ur, gru.br).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(hs).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate(xs, &rh, gru.wn, gru.un, gru.bn).into_iter().map(f64::tanh).collect();
    let want: Vec<f64> = (0..d).map(|j| (1.0 - z[j]) * n[j] + z[j] * hs[j]).collect();
    let mut worst = diff(g.value(y).data(), &want);

    // one step from the zero state is the whole recurrence for a length-1 sequence
    let mut g = Graph::new(&ps);
    let xv = g.constant(x.clone());
    let last = gru.last_state(&mut g, &[xv]).unwrap();
    let zero = vec![0.0; d];
    let z0: Vec<f64> = gate(xs, &zero, gru.wz, gru.uz, gru.bz).into_iter().map(sigmoid).collect();
    let n0: Vec<f64> = gate(xs, &zero, gru.wn, gru.un, gru.bn).into_iter().map(f64::tanh).collect();
    let want0: Vec<f64> = (0..d).map(|j| (1.0 - z0[j]) * n0[j]).collect();
    worst = worst.max(diff(g.value(last).data(), &want0));
    worst
}

pub fn additive_pooling(rng: &mut ChaCha8Rng) -> f64 {
    let (k, d, d_att) = (rng.random_range(1..=6), rng.random_range(1..=5), rng.random_range(1..=5));
    let mut ps = ParamStore::new();
    let att = AdditiveAttention::new(&mut ps, "p", d, d_att, rng);
    randomize(&mut ps, rng);
    let items: Vec<Tensor> = (0..k).map(|_| random_tensor(rng, &[1, d])).collect();
    let mut g = Graph::new(&ps);
    let vars: Vec<_> = items.iter().map(|t| g.constant(t.clone())).collect();
    let (a, pooled) = att.pool(&mut g, &vars).unwrap().unwrap();

    let (w, b, v) = (
        ps.value(att.proj.w),
        ps.value(att.proj.b.unwrap()),
        ps.value(att.score),
    );
    let e: Vec<f64> = items
        .iter()
        .map(|x| {
            (0..d_att)
                .map(|j| {
                    let s = b.data()[j] + (0..d).map(|i| x.data()[i] * w.get2(i, j)).sum::<f64>();
                    s.tanh() * v.data()[j]
                })
                .sum()
        })
        .collect();
    let weights = softmax(&e);
    let want: Vec<f64> = (0..d)
        .map(|c| items.iter().zip(&weights).map(|(x, a)| a * x.data()[c]).sum())
        .collect();
    diff(g.value(a).data(), &weights).max(diff(g.value(pooled).data(), &want))
}

fn random_utterance(rng: &mut ChaCha8Rng, vocab: u32, max_len: usize) -> Vec<u32> {
    let n = rng.random_range(1..=max_len);
    let mut u: Vec<u32> = (0..n).map(|_| rng.random_range(2..vocab)).collect();
    if rng.random_bool(0.2) {
        let at = rng.random_range(0..n);
        u[at] = PAD;
    }
    u.extend(std::iter::repeat_n(PAD, rng.random_range(0..3)));
    u
}

/// Brute-force tf-idf attention weights by scanning the raw histories.
pub fn tfidf_weights(rng: &mut ChaCha8Rng) -> f64 {
    let vocab = rng.random_range(3..=6);
    let users = rng.random_range(1..=5);
    let histories: Vec<EncodedHistory> = (0..users)
        .map(|u| EncodedHistory {
            user_id: format!("u{u}"),
            utterances: (0..rng.random_range(0..=4)).map(|_| random_utterance(rng, vocab, 6)).collect(),
        })
        .collect();
    let model = build_tfidf(&histories).unwrap();
    let response = random_utterance(rng, vocab, 7);
    let user = format!("u{}", rng.random_range(0..users + 1));
    let mode = [MaskMode::Rescaled, MaskMode::Raw, MaskMode::Off][rng.random_range(0..3)];
    let got = model.response_weights(&response, &user, mode);

    let clean = |w: &[u32]| !w.contains(&PAD);
    let count = |h: &EncodedHistory, gram: &[u32]| -> usize {
        h.utterances.iter().flat_map(|u| u.windows(gram.len())).filter(|w| *w == gram).count()
    };
    let total = |h: &EncodedHistory, l: usize| -> usize {
        h.utterances.iter().flat_map(|u| u.windows(l)).filter(|w| clean(w)).count()
    };
    let n = response.len();
    let owner = histories.iter().find(|h| h.user_id == user);
    let mut worst: f64 = 0.0;
    for l in 1..=3 {
        let raw: Vec<f64> = (0..n as isize)
            .map(|k| {
                let s = k - (l as isize - 1) / 2;
                if s < 0 || s as usize + l > n {
                    return 0.0;
                }
                let gram = &response[s as usize..s as usize + l];
                let Some(h) = owner else { return 0.0 };
                if !clean(gram) || total(h, l) == 0 {
                    return 0.0;
                }
                let df = histories.iter().filter(|o| count(o, gram) > 0).count();
                if df == 0 {
                    return 0.0;
                }
                count(h, gram) as f64 / total(h, l) as f64 * (users as f64 / df as f64).ln()
            })
            .collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        let want: Vec<f64> = match mode {
            MaskMode::Off => vec![1.0; n],
            _ if owner.is_none() || max <= 0.0 => vec![1.0; n],
            MaskMode::Rescaled => raw.iter().map(|x| x / max).collect(),
            MaskMode::Raw => raw,
        };
        worst = worst.max(diff(&got.a[l - 1], &want));
    }
    worst
}

fn random_groups(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rng.random_range(1..=20))
        .map(|_| (0..10).map(|_| rng.random_range(0..5) as f64 * 0.25).collect())
        .collect()
}

/// Rank from a full sort in which the gold comes after any candidate it ties with.
fn sorted_rank(g: &[f64], n: usize) -> usize {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap().then((a == 0).cmp(&(b == 0))));
    order.iter().position(|&i| i == 0).unwrap() + 1
}

pub fn recall(rng: &mut ChaCha8Rng) -> f64 {
    let groups = random_groups(rng);
    let mut worst: f64 = 0.0;
    for (n, k) in [(2, 1), (10, 1), (10, 2), (10, 5), (10, 10)] {
        let hits = groups.iter().filter(|g| sorted_rank(g, n) <= k).count();
        let want = hits as f64 / groups.len() as f64;
        worst = worst.max(diff(&[recall_at_k(&groups, n, k).unwrap()], &[want]));
    }
    worst
}

pub fn reciprocal_rank(rng: &mut ChaCha8Rng) -> f64 {
    let groups = random_groups(rng);
    let want = groups.iter().map(|g| 1.0 / sorted_rank(g, 10) as f64).sum::<f64>() / groups.len() as f64;
    diff(&[mrr(&groups, 10).unwrap()], &[want])
}
