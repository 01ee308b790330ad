use rand::Rng;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

/// Affine map `x · W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_uniform(&format!("{name}.w"), &[d_in, d_out], rng);
        let b = bias.then(|| ps.add_zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Same-length 1-D convolution over a token sequence with one window size:
/// `out[k] = ReLU(window_k · W + b)`.
#[derive(Clone, Debug)]
pub struct NgramConv {
    pub window: usize,
    pub filters: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl NgramConv {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        window: usize,
        d_in: usize,
        filters: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_uniform(&format!("{name}.w"), &[window * d_in, filters], rng);
        let b = ps.add_zeros(&format!("{name}.b"), &[filters]);
        Self {
            window,
            filters,
            w,
            b,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        if g.value(x).dims2().0 == 0 {
            return Err(NnError::EmptySequence("n-gram convolution input"));
        }
        let z = g.unfold(x, self.window)?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(z, w)?;
        let y = g.add_row(y, b)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add_ones(&format!("{name}.gamma"), &[d]),
            beta: ps.add_zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm_rows(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention followed by a residual
/// connection to the query and layer normalisation.
///
/// Each head projects to `d / heads` columns; scores are divided by `√d`
/// (the full model width, not the per-head width).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub d: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm: LayerNorm,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d,
            heads,
            wq: ps.add_uniform(&format!("{name}.wq"), &[d, d], rng),
            wk: ps.add_uniform(&format!("{name}.wk"), &[d, d], rng),
            wv: ps.add_uniform(&format!("{name}.wv"), &[d, d], rng),
            wo: ps.add_uniform(&format!("{name}.wo"), &[d, d], rng),
            norm: LayerNorm::new(ps, &format!("{name}.ln"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var, NnError> {
        let (wq, wk, wv, wo) = (
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            g.param(self.wo),
        );
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (self.d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qp, s, e)?;
            let kh = g.slice_cols(kp, s, e)?;
            let vh = g.slice_cols(vp, s, e)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            outs.push(g.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let o = g.matmul(cat, wo)?;
        let res = g.add(q, o)?;
        self.norm.forward(g, res)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggCnnConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    pub out: usize,
}

impl AggCnnConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.kernel % 2 == 0 {
            return Err(NnError::Config(format!(
                "2-D kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.height < self.pool || self.width < self.pool {
            return Err(NnError::Config(format!(
                "interaction map {}x{} smaller than the {}x{} pooling window",
                self.height, self.width, self.pool, self.pool
            )));
        }
        if self.channels == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 {
            return Err(NnError::Config("zero channels or filters".into()));
        }
        Ok(())
    }

    pub fn flat_size(&self) -> usize {
        let h = self.height.div_ceil(self.pool).div_ceil(self.pool);
        let w = self.width.div_ceil(self.pool).div_ceil(self.pool);
        self.conv2_filters * h * w
    }
}

/// conv → max-pool → conv → max-pool → flatten → one-hidden-layer MLP.
#[derive(Clone, Debug)]
pub struct AggCnn {
    pub cfg: AggCnnConfig,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub hidden: Linear,
    pub out: Linear,
}

impl AggCnn {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: AggCnnConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let k = cfg.kernel;
        Ok(Self {
            conv1_w: ps.add_uniform(
                &format!("{name}.conv1.w"),
                &[cfg.conv1_filters, cfg.channels, k, k],
                rng,
            ),
            conv1_b: ps.add_zeros(&format!("{name}.conv1.b"), &[cfg.conv1_filters]),
            conv2_w: ps.add_uniform(
                &format!("{name}.conv2.w"),
                &[cfg.conv2_filters, cfg.conv1_filters, k, k],
                rng,
            ),
            conv2_b: ps.add_zeros(&format!("{name}.conv2.b"), &[cfg.conv2_filters]),
            hidden: Linear::new(
                ps,
                &format!("{name}.hidden"),
                cfg.flat_size(),
                cfg.hidden,
                true,
                rng,
            ),
            out: Linear::new(ps, &format!("{name}.out"), cfg.hidden, cfg.out, true, rng),
            cfg,
        })
    }

    /// Volume before the MLP, flattened to `[1, flat_size]`.
    pub fn features(&self, g: &mut Graph, stack: Var) -> Result<Var, NnError> {
        let shape = g.shape(stack);
        if shape != [self.cfg.channels, self.cfg.height, self.cfg.width] {
            return Err(NnError::Shape(format!(
                "aggregation input {:?}, expected [{}, {}, {}]",
                shape, self.cfg.channels, self.cfg.height, self.cfg.width
            )));
        }
        let (w1, b1) = (g.param(self.conv1_w), g.param(self.conv1_b));
        let x = g.conv2d(stack, w1, b1)?;
        let x = g.relu(x);
        let x = g.max_pool(x, self.cfg.pool)?;
        let (w2, b2) = (g.param(self.conv2_w), g.param(self.conv2_b));
        let x = g.conv2d(x, w2, b2)?;
        let x = g.relu(x);
        let x = g.max_pool(x, self.cfg.pool)?;
        g.reshape(x, &[1, self.cfg.flat_size()])
    }

    pub fn forward(&self, g: &mut Graph, stack: Var) -> Result<Var, NnError> {
        let flat = self.features(g, stack)?;
        let h = self.hidden.forward(g, flat)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Gated recurrent unit:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + (r∘h)U_n + b_n)`, `h' = (1-z)∘n + z∘h`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub d_in: usize,
    pub d: usize,
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
}

impl Gru {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut R) -> Self {
        let mut w = |gate: &str| ps.add_uniform(&format!("{name}.w{gate}"), &[d_in, d], rng);
        let (wz, wr, wn) = (w("z"), w("r"), w("n"));
        let mut u = |gate: &str| ps.add_uniform(&format!("{name}.u{gate}"), &[d, d], rng);
        let (uz, ur, un) = (u("z"), u("r"), u("n"));
        Self {
            d_in,
            d,
            wz,
            uz,
            bz: ps.add_zeros(&format!("{name}.bz"), &[d]),
            wr,
            ur,
            br: ps.add_zeros(&format!("{name}.br"), &[d]),
            wn,
            un,
            bn: ps.add_zeros(&format!("{name}.bn"), &[d]),
        }
    }

    fn gate(
        g: &mut Graph,
        x: Var,
        h: Var,
        w: ParamId,
        u: ParamId,
        b: ParamId,
    ) -> Result<Var, NnError> {
        let (w, u, b) = (g.param(w), g.param(u), g.param(b));
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var, NnError> {
        let z = Self::gate(g, x, h, self.wz, self.uz, self.bz)?;
        let z = g.sigmoid(z);
        let r = Self::gate(g, x, h, self.wr, self.ur, self.br)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let n = Self::gate(g, x, rh, self.wn, self.un, self.bn)?;
        let n = g.tanh(n);
        // h' = n + z∘(h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Run from a zero state over `seq` (each `[1, d_in]`) and return the last state.
    pub fn last_state(&self, g: &mut Graph, seq: &[Var]) -> Result<Var, NnError> {
        if seq.is_empty() {
            return Err(NnError::EmptySequence("recurrent aggregation input"));
        }
        let mut h = g.constant(Tensor::zeros(&[1, self.d]));
        for &x in seq {
            h = self.step(g, x, h)?;
        }
        Ok(h)
    }
}

/// Additive attention pooling: `e_k = vᵀ tanh(W x_k + b)`,
/// output `Σ softmax(e)_k x_k`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub proj: Linear,
    pub score: ParamId,
}

impl AdditiveAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        d_att: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(ps, &format!("{name}.proj"), d, d_att, true, rng),
            score: ps.add_uniform(&format!("{name}.score"), &[d_att, 1], rng),
        }
    }

    /// Attention weights `[1, k]` and pooled vector `[1, d]`; `None` if `items` is empty.
    pub fn pool(&self, g: &mut Graph, items: &[Var]) -> Result<Option<(Var, Var)>, NnError> {
        if items.is_empty() {
            return Ok(None);
        }
        let x = g.concat_rows(items)?;
        let p = self.proj.forward(g, x)?;
        let p = g.tanh(p);
        let v = g.param(self.score);
        let e = g.matmul(p, v)?;
        let e = g.transpose(e);
        let a = g.softmax_rows(e);
        let pooled = g.matmul(a, x)?;
        Ok(Some((a, pooled)))
    }
}
