//! The hybrid matching network and its ablation variants.
//!
//! Context branch: for every non-empty context turn, five interaction maps
//! between the turn and the response (word, 1/2/3-gram, self-attention),
//! optionally masked by the responder's tf-idf weights, aggregated by a 2-D
//! CNN into `v_j`; a GRU over `v_1..v_n` gives `m_rnn`.
//!
//! History branch: for every history utterance, one interaction map between
//! {1,2,3,4}-gram features of the utterance and of the response, aggregated
//! into `v_mk`; additive attention over the bag gives `m_att`.
//!
//! Fusion: `λ = σ(U m_rnn + V m_att)`, `m_t = (1-λ)∘m_att + λ∘m_rnn`, or
//! plain concatenation when the gate is disabled.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedExample;
use crate::nn::{
    AdditiveAttention, AggCnn, AggCnnConfig, Gradients, Graph, Gru, Init, Linear, MultiHeadAttention,
    NgramConv, NnError, ParamId, ParamStore, Tensor, Var,
};
use crate::persona::{expand_mask, AttentionWeights, MaskMode, TfidfModel};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config `{key}`: {msg}")]
    Config { key: &'static str, msg: String },
    #[error("example has no non-empty context turn")]
    EmptyContext,
    #[error("history-only variant needs at least one history utterance")]
    EmptyHistory,
    #[error("mask weights cover {got} positions, response has {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("checkpoint fingerprint {found} does not match model {expected}")]
    Fingerprint { expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "PHMN")]
    Phmn,
    #[serde(rename = "HMN")]
    Hmn,
    #[serde(rename = "PMN")]
    Pmn,
    #[serde(rename = "HMN_W")]
    HmnW,
    #[serde(rename = "HMN_Att")]
    HmnAtt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Phmn,
        Variant::Hmn,
        Variant::Pmn,
        Variant::HmnW,
        Variant::HmnAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Phmn => "PHMN",
            Variant::Hmn => "HMN",
            Variant::Pmn => "PMN",
            Variant::HmnW => "HMN_W",
            Variant::HmnAtt => "HMN_Att",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Variant::Pmn
    }

    pub fn uses_history(self) -> bool {
        matches!(self, Variant::Phmn | Variant::Pmn | Variant::HmnW)
    }

    pub fn uses_masks(self) -> bool {
        matches!(self, Variant::Phmn | Variant::HmnAtt)
    }

    /// Both branches present, so fusion, the gate and the auxiliary heads apply.
    pub fn is_fused(self) -> bool {
        self.uses_context() && self.uses_history()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                format!("unknown variant {s:?}; expected one of PHMN, HMN, PMN, HMN_W, HMN_Att")
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_w: usize,
    /// Filters per window size (1, 2, 3) on context utterances and responses.
    pub context_filters: usize,
    /// Filters per window size (1, 2, 3, 4) for wording behavior.
    pub history_filters: usize,
    pub heads: usize,
    pub d_h: usize,
    pub agg_conv1_filters: usize,
    pub agg_conv2_filters: usize,
    pub agg_kernel: usize,
    pub agg_pool: usize,
    pub max_turns: usize,
    pub max_len: usize,
    pub history_cap: usize,
    pub variant: Variant,
    pub gate_enabled: bool,
    pub gate_bias: bool,
    pub aux_losses_enabled: bool,
    pub aux_weight_context: f64,
    pub aux_weight_history: f64,
    pub mask_mode: MaskMode,
    pub init_seed: u64,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30002,
            d_w: 200,
            context_filters: 200,
            history_filters: 50,
            heads: 8,
            d_h: 200,
            agg_conv1_filters: 32,
            agg_conv2_filters: 16,
            agg_kernel: 3,
            agg_pool: 3,
            max_turns: 10,
            max_len: 50,
            history_cap: 100,
            variant: Variant::Phmn,
            gate_enabled: true,
            gate_bias: false,
            aux_losses_enabled: true,
            aux_weight_context: 1.0,
            aux_weight_history: 1.0,
            mask_mode: MaskMode::Rescaled,
            init_seed: 0,
            init: Init::Uniform,
        }
    }
}

impl ModelConfig {
    /// Defaults for `variant`: gate and auxiliary losses on for the fused
    /// variants, off for the single-branch ones.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            gate_enabled: variant.is_fused(),
            aux_losses_enabled: variant.is_fused(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |key: &'static str, msg: &str| {
            Err(ModelError::Config {
                key,
                msg: msg.to_string(),
            })
        };
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_w", self.d_w),
            ("context_filters", self.context_filters),
            ("history_filters", self.history_filters),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("agg_conv1_filters", self.agg_conv1_filters),
            ("agg_conv2_filters", self.agg_conv2_filters),
            ("agg_pool", self.agg_pool),
            ("max_turns", self.max_turns),
            ("max_len", self.max_len),
            ("history_cap", self.history_cap),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.vocab_size < 2 {
            return bad("vocab_size", "needs room for padding and unknown tokens");
        }
        if self.d_w % self.heads != 0 {
            return bad("heads", &format!("d_w = {} is not divisible by {}", self.d_w, self.heads));
        }
        if self.agg_kernel % 2 == 0 {
            return bad("agg_kernel", "must be odd");
        }
        if self.max_len < self.agg_pool {
            return bad("max_len", "shorter than the pooling window");
        }
        if !self.variant.is_fused() {
            if self.gate_enabled {
                return bad("gate_enabled", &format!("{} has a single branch", self.variant));
            }
            if self.aux_losses_enabled {
                return bad(
                    "aux_losses_enabled",
                    &format!("{} has a single branch", self.variant),
                );
            }
        }
        for (key, w) in [
            ("aux_weight_context", self.aux_weight_context),
            ("aux_weight_history", self.aux_weight_history),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(key, "must be a finite non-negative number");
            }
        }
        Ok(())
    }

    pub fn masks_active(&self) -> bool {
        self.variant.uses_masks() && self.mask_mode != MaskMode::Off
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn agg(&self, channels: usize) -> AggCnnConfig {
        AggCnnConfig {
            channels,
            height: self.max_len,
            width: self.max_len,
            conv1_filters: self.agg_conv1_filters,
            conv2_filters: self.agg_conv2_filters,
            kernel: self.agg_kernel,
            pool: self.agg_pool,
            hidden: self.d_h,
            out: self.d_h,
        }
    }
}

struct ContextBranch {
    convs: Vec<NgramConv>,
    mhsa: MultiHeadAttention,
    agg: AggCnn,
    gru: Gru,
    head: Linear,
}

struct HistoryBranch {
    convs: Vec<NgramConv>,
    agg: AggCnn,
    att: AdditiveAttention,
    head: Linear,
}

struct Fusion {
    gate: Option<(Linear, Linear)>,
    head: Linear,
}

/// Layer layout of one configured model. Parameter values live in a
/// separate [`ParamStore`] so that graphs can borrow them immutably.
pub struct Phmn {
    pub cfg: ModelConfig,
    pub embedding: ParamId,
    context: Option<ContextBranch>,
    history: Option<HistoryBranch>,
    fusion: Option<Fusion>,
}

/// Five response- or utterance-side representation channels.
pub struct HybridReps {
    pub word: Var,
    pub ngram: [Var; 3],
    pub attention: Var,
}

/// Graph nodes of one forward pass.
pub struct MatchState {
    pub v: Vec<Var>,
    pub v_m: Vec<Var>,
    pub m_rnn: Option<Var>,
    pub m_att: Option<Var>,
    pub history_weights: Option<Var>,
    pub lambda: Option<Var>,
    pub m_t: Option<Var>,
    /// Two-class logits of the main head f.
    pub f: Option<Var>,
    /// Context-only head g1.
    pub g1: Option<Var>,
    /// History-only head g2.
    pub g2: Option<Var>,
}

impl MatchState {
    /// Logits that decide the ranking score for this variant.
    pub fn score_logits(&self) -> Var {
        self.f
            .or(self.g1)
            .or(self.g2)
            .expect("every variant has a head")
    }
}

/// `z1 - z0`; a strictly increasing function of the class-1 probability.
pub fn margin(logits: &Tensor) -> f64 {
    logits.data()[1] - logits.data()[0]
}

pub fn probability(logits: &Tensor) -> f64 {
    crate::nn::sigmoid(margin(logits))
}

impl Phmn {
    pub fn new(cfg: ModelConfig) -> Result<(Self, ParamStore), ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let rng = &mut rng;
        let mut ps = ParamStore::with_init(cfg.init);
        let shape = [cfg.vocab_size, cfg.d_w];
        let embedding = match cfg.init {
            Init::Uniform => ps.add_uniform("embedding", &shape, rng),
            // rows of roughly unit norm
            Init::FanIn => ps.add_uniform_bound("embedding", &shape, (3.0 / cfg.d_w as f64).sqrt(), rng),
        };
        ps.get_mut(embedding).value.data_mut()[..cfg.d_w].fill(0.0);

        let v = cfg.variant;
        let context = if v.uses_context() {
            let convs = (1..=3)
                .map(|l| NgramConv::new(&mut ps, &format!("ctx.conv{l}"), l, cfg.d_w, cfg.context_filters, rng))
                .collect();
            Some(ContextBranch {
                convs,
                mhsa: MultiHeadAttention::new(&mut ps, "ctx.mhsa", cfg.d_w, cfg.heads, rng)?,
                agg: AggCnn::new(&mut ps, "ctx.agg", cfg.agg(5), rng)?,
                gru: Gru::new(&mut ps, "ctx.gru", cfg.d_h, cfg.d_h, rng),
                head: Linear::new(&mut ps, "head.g1", cfg.d_h, 2, true, rng),
            })
        } else {
            None
        };
        let history = if v.uses_history() {
            let convs = (1..=4)
                .map(|l| NgramConv::new(&mut ps, &format!("hist.conv{l}"), l, cfg.d_w, cfg.history_filters, rng))
                .collect();
            Some(HistoryBranch {
                convs,
                agg: AggCnn::new(&mut ps, "hist.agg", cfg.agg(1), rng)?,
                att: AdditiveAttention::new(&mut ps, "hist.att", cfg.d_h, cfg.d_h, rng),
                head: Linear::new(&mut ps, "head.g2", cfg.d_h, 2, true, rng),
            })
        } else {
            None
        };
        let fusion = if v.is_fused() {
            let gate = cfg.gate_enabled.then(|| {
                (
                    Linear::new(&mut ps, "gate.u", cfg.d_h, cfg.d_h, cfg.gate_bias, rng),
                    Linear::new(&mut ps, "gate.v", cfg.d_h, cfg.d_h, false, rng),
                )
            });
            let d_in = if cfg.gate_enabled { cfg.d_h } else { 2 * cfg.d_h };
            Some(Fusion {
                gate,
                head: Linear::new(&mut ps, "head.f", d_in, 2, true, rng),
            })
        } else {
            None
        };
        Ok((
            Self {
                cfg,
                embedding,
                context,
                history,
                fusion,
            },
            ps,
        ))
    }

    /// Attention weights used for masking this example, or `None` when the
    /// variant runs unmasked.
    pub fn mask_weights(&self, ex: &EncodedExample, tfidf: Option<&TfidfModel>) -> Option<AttentionWeights> {
        if !self.cfg.masks_active() {
            return None;
        }
        Some(match tfidf {
            Some(t) => t.response_weights(&ex.response_ids, &ex.responder_id, self.cfg.mask_mode),
            None => AttentionWeights::ones(ex.response_ids.len()),
        })
    }

    /// Word, {1,2,3}-gram and self-attention channels of one padded utterance.
    pub fn hybrid_reps(&self, g: &mut Graph, ids: &[u32]) -> Result<HybridReps, ModelError> {
        let ctx = self.context.as_ref().expect("context branch");
        let word = g.embed(self.embedding, ids)?;
        let ngram = [
            ctx.convs[0].forward(g, word)?,
            ctx.convs[1].forward(g, word)?,
            ctx.convs[2].forward(g, word)?,
        ];
        let attention = ctx.mhsa.forward(g, word, word, word)?;
        Ok(HybridReps {
            word,
            ngram,
            attention,
        })
    }

    /// The five `n_r × n_u` interaction maps, in channel order
    /// word, 1-gram, 2-gram, 3-gram, attention.
    pub fn interactions(g: &mut Graph, r: &HybridReps, u: &HybridReps) -> Result<[Var; 5], ModelError> {
        Ok([
            g.matmul_nt(r.word, u.word)?,
            g.matmul_nt(r.ngram[0], u.ngram[0])?,
            g.matmul_nt(r.ngram[1], u.ngram[1])?,
            g.matmul_nt(r.ngram[2], u.ngram[2])?,
            g.matmul_nt(r.attention, u.attention)?,
        ])
    }

    /// Multiply the row-constant masks into the interaction maps: a¹ on the
    /// word, 1-gram and attention channels, a² on 2-gram, a³ on 3-gram.
    pub fn apply_masks(g: &mut Graph, maps: [Var; 5], w: &AttentionWeights) -> Result<[Var; 5], ModelError> {
        let (n_r, n_u) = g.value(maps[0]).dims2();
        if w.len() != n_r {
            return Err(ModelError::MaskLength {
                expected: n_r,
                got: w.len(),
            });
        }
        let masks: Vec<Var> = w.a.iter().map(|a| g.constant(expand_mask(a, n_u))).collect();
        let order = [0, 0, 1, 2, 0];
        let mut out = maps;
        for (slot, &m) in out.iter_mut().zip(order.iter()) {
            *slot = g.mul(*slot, masks[m])?;
        }
        Ok(out)
    }

    /// `v_j` for one context turn against the response.
    pub fn utterance_matching_vector(&self, g: &mut Graph, maps: [Var; 5]) -> Result<Var, ModelError> {
        let ctx = self.context.as_ref().expect("context branch");
        let stack = g.stack(&maps)?;
        Ok(ctx.agg.forward(g, stack)?)
    }

    /// Concatenated {1,2,3,4}-gram wording features of one padded utterance.
    pub fn wording_reps(&self, g: &mut Graph, ids: &[u32]) -> Result<Var, ModelError> {
        let hist = self.history.as_ref().expect("history branch");
        let e = g.embed(self.embedding, ids)?;
        let parts = hist
            .convs
            .iter()
            .map(|c| c.forward(g, e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat_cols(&parts)?)
    }

    /// `v_mk` from the wording interaction `R_c · U_cᵀ`.
    pub fn wording_behavior_vector(&self, g: &mut Graph, r_c: Var, u_c: Var) -> Result<Var, ModelError> {
        let hist = self.history.as_ref().expect("history branch");
        let m = g.matmul_nt(r_c, u_c)?;
        let stack = g.stack(&[m])?;
        Ok(hist.agg.forward(g, stack)?)
    }

    /// Gate-or-concat fusion followed by the main head.
    pub fn fuse(&self, g: &mut Graph, m_rnn: Var, m_att: Var) -> Result<(Option<Var>, Var, Var), ModelError> {
        let fusion = self.fusion.as_ref().expect("fused variant");
        match &fusion.gate {
            Some((u, v)) => {
                let a = u.forward(g, m_rnn)?;
                let b = v.forward(g, m_att)?;
                let s = g.add(a, b)?;
                let lambda = g.sigmoid(s);
                // m_t = m_att + λ∘(m_rnn - m_att)
                let d = g.sub(m_rnn, m_att)?;
                let ld = g.mul(lambda, d)?;
                let m_t = g.add(m_att, ld)?;
                let f = fusion.head.forward(g, m_t)?;
                Ok((Some(lambda), m_t, f))
            }
            None => {
                let m_t = g.concat_cols(&[m_rnn, m_att])?;
                let f = fusion.head.forward(g, m_t)?;
                Ok((None, m_t, f))
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ex: &EncodedExample,
        weights: Option<&AttentionWeights>,
    ) -> Result<MatchState, ModelError> {
        let mut st = MatchState {
            v: Vec::new(),
            v_m: Vec::new(),
            m_rnn: None,
            m_att: None,
            history_weights: None,
            lambda: None,
            m_t: None,
            f: None,
            g1: None,
            g2: None,
        };

        if let Some(ctx) = &self.context {
            let turns: Vec<usize> = ex.active_turns().collect();
            if turns.is_empty() {
                return Err(ModelError::EmptyContext);
            }
            let r = self.hybrid_reps(g, &ex.response_ids)?;
            for j in turns {
                let u = self.hybrid_reps(g, ex.context_turn(j))?;
                let mut maps = Self::interactions(g, &r, &u)?;
                if let Some(w) = weights.filter(|_| self.cfg.masks_active()) {
                    maps = Self::apply_masks(g, maps, w)?;
                }
                st.v.push(self.utterance_matching_vector(g, maps)?);
            }
            let m_rnn = ctx.gru.last_state(g, &st.v)?;
            st.m_rnn = Some(m_rnn);
            st.g1 = Some(ctx.head.forward(g, m_rnn)?);
        }

        if let Some(hist) = &self.history {
            let items: Vec<usize> = ex.active_history().collect();
            if !items.is_empty() {
                let r_c = self.wording_reps(g, &ex.response_ids)?;
                for k in items {
                    let u_c = self.wording_reps(g, ex.history_utterance(k))?;
                    st.v_m.push(self.wording_behavior_vector(g, r_c, u_c)?);
                }
            }
            let m_att = match hist.att.pool(g, &st.v_m)? {
                Some((a, pooled)) => {
                    st.history_weights = Some(a);
                    pooled
                }
                None if self.context.is_none() => return Err(ModelError::EmptyHistory),
                None => g.constant(Tensor::zeros(&[1, self.cfg.d_h])),
            };
            st.m_att = Some(m_att);
            st.g2 = Some(hist.head.forward(g, m_att)?);
        }

        if let (Some(m_rnn), Some(m_att)) = (st.m_rnn, st.m_att) {
            let (lambda, m_t, f) = self.fuse(g, m_rnn, m_att)?;
            st.lambda = lambda;
            st.m_t = Some(m_t);
            st.f = Some(f);
        }
        Ok(st)
    }

    /// `L(f) + w1·L1(g1) + w2·L2(g2)` for a fused variant with auxiliary
    /// losses; otherwise the cross-entropy of the variant's scoring head.
    pub fn loss(&self, g: &mut Graph, st: &MatchState, label: u8) -> Result<Var, ModelError> {
        let y = label as usize;
        let main = g.softmax_xent(st.score_logits(), y)?;
        if !(self.cfg.variant.is_fused() && self.cfg.aux_losses_enabled) {
            return Ok(main);
        }
        let l1 = g.softmax_xent(st.g1.expect("context head"), y)?;
        let l1 = g.scale(l1, self.cfg.aux_weight_context);
        let l2 = g.softmax_xent(st.g2.expect("history head"), y)?;
        let l2 = g.scale(l2, self.cfg.aux_weight_history);
        let s = g.add(main, l1)?;
        Ok(g.add(s, l2)?)
    }
}

/// Loss, gradients, ranking margin and branch signature of one example.
pub struct ExampleOutcome {
    pub loss: f64,
    pub grads: Gradients,
    pub margin: f64,
    pub branches: u64,
}

pub fn example_outcome(
    model: &Phmn,
    params: &ParamStore,
    ex: &EncodedExample,
    weights: Option<&AttentionWeights>,
) -> Result<ExampleOutcome, ModelError> {
    let mut g = Graph::new(params);
    let st = model.forward(&mut g, ex, weights)?;
    let loss = model.loss(&mut g, &st, ex.label)?;
    Ok(ExampleOutcome {
        loss: g.value(loss).data()[0],
        margin: margin(g.value(st.score_logits())),
        branches: g.branch_signature(),
        grads: g.backward(loss),
    })
}

/// Ranking margin of one example (forward pass only).
pub fn score_example(
    model: &Phmn,
    params: &ParamStore,
    ex: &EncodedExample,
    weights: Option<&AttentionWeights>,
) -> Result<f64, ModelError> {
    let mut g = Graph::new(params);
    let st = model.forward(&mut g, ex, weights)?;
    Ok(margin(g.value(st.score_logits())))
}
