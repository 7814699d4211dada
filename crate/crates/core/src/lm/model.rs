use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::vocab::{Special, StateToken, TokenId, Vocab, VOCAB_SIZE};
use crate::blocks::{mamba_block_vars, BlockVars, LayerState, MambaBlockWeights, MambaConfig, NORM_EPS};
use crate::error::{invalid, shape_err, Error, Result};
use crate::init::{self, Rng};
use crate::numerics::{Backend, DType, Eager, Param, Tensor};
use crate::ssm::{ConvState, SsmState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub vocab: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub use_skip: bool,
}

impl LmConfig {
    /// 64 Mamba layers at width 2560, state size 16.
    pub fn full() -> Self {
        Self::with_dims(64, 2560, 16)
    }

    /// Desk-scale default.
    pub fn small() -> Self {
        Self::with_dims(2, 64, 16)
    }

    pub fn tiny() -> Self {
        Self::with_dims(2, 16, 4)
    }

    pub fn with_dims(n_layers: usize, d_model: usize, d_state: usize) -> Self {
        LmConfig {
            n_layers,
            d_model,
            d_state,
            vocab: VOCAB_SIZE,
            expand: 2,
            conv_kernel: 4,
            use_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_layers, self.d_model, self.d_state, self.vocab, self.expand, self.conv_kernel].contains(&0) {
            return Err(invalid("language model config extents must be positive"));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(invalid(format!("vocab {} cannot hold the {VOCAB_SIZE} reserved ids", self.vocab)));
        }
        Ok(())
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            conv_kernel: self.conv_kernel,
            use_skip: self.use_skip,
        }
    }

    /// Bytes of one [`ModelState`] at `dtype`, computed from extents alone.
    pub fn state_bytes(&self, dtype: DType) -> usize {
        let di = self.expand * self.d_model;
        let per_layer = (self.conv_kernel - 1) * di + di * self.d_state;
        self.n_layers * per_layer * dtype.size_bytes() + std::mem::size_of::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmWeights {
    pub cfg: LmConfig,
    pub embedding: Param,
    pub layers: Vec<MambaBlockWeights>,
    pub norm_f: Param,
    pub head: Param,
}

crate::impl_module!(LmWeights { embedding, layers, norm_f, head });

pub struct LmVars<V> {
    pub embedding: V,
    pub layers: Vec<BlockVars<V>>,
    pub norm_f: V,
    pub head: V,
}

impl LmWeights {
    pub fn init(cfg: &LmConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.mamba();
        Ok(LmWeights {
            cfg: *cfg,
            embedding: Param::new("lm.embedding.weight", init::uniform(rng, &[cfg.vocab, cfg.d_model], 1.0, dtype)),
            layers: (0..cfg.n_layers)
                .map(|i| MambaBlockWeights::init(&format!("lm.layers.{i}"), &mcfg, dtype, rng))
                .collect(),
            norm_f: Param::new("lm.norm_f.weight", init::full(&[cfg.d_model], 1.0, dtype)),
            head: Param::new("lm.head.weight", init::linear(rng, cfg.d_model, cfg.vocab, dtype)),
        })
    }

    pub fn dtype(&self) -> DType {
        self.embedding.value().dtype()
    }

    pub fn lift<B: Backend>(&self, b: &mut B) -> Result<LmVars<B::Var>> {
        Ok(LmVars {
            embedding: b.param(&self.embedding),
            layers: self.layers.iter().map(|l| l.lift(b)).collect::<Result<_>>()?,
            norm_f: b.param(&self.norm_f),
            head: b.param(&self.head),
        })
    }

    pub fn embed(&self, ids: &[TokenId]) -> Result<Tensor> {
        self.embedding.value().gather_rows(ids)
    }

    /// Rejects weights whose tensor shapes disagree with `cfg`.
    pub fn check_consistent(&self) -> Result<()> {
        let c = &self.cfg;
        let emb = self.embedding.value().shape();
        if emb != [c.vocab, c.d_model] || self.layers.len() != c.n_layers {
            return Err(Error::Format(format!("weights do not match config {c:?}")));
        }
        for l in &self.layers {
            if l.mixer.d_model() != c.d_model || l.mixer.ssm.d_state() != c.d_state || l.mixer.kernel() != c.conv_kernel {
                return Err(Error::Format(format!("layer extents do not match config {c:?}")));
            }
        }
        Ok(())
    }
}

/// Recurrent state of the whole language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
    /// Tokens or embedding rows consumed so far.
    pub position: u64,
}

impl ModelState {
    pub fn zeros(cfg: &LmConfig, dtype: DType) -> Self {
        let di = cfg.expand * cfg.d_model;
        ModelState {
            layers: (0..cfg.n_layers)
                .map(|_| LayerState {
                    conv: ConvState::zeros(cfg.conv_kernel, di, dtype),
                    ssm: SsmState::zeros(di, cfg.d_state, dtype),
                })
                .collect(),
            position: 0,
        }
    }

    pub fn state_bytes(&self) -> usize {
        self.layers.iter().map(LayerState::nbytes).sum::<usize>() + std::mem::size_of::<u64>()
    }

    /// Little-endian dump of every state tensor followed by the position.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.state_bytes());
        for l in &self.layers {
            out.extend(l.conv.frames().to_le_bytes());
            out.extend(l.ssm.h.to_le_bytes());
        }
        out.extend(self.position.to_le_bytes());
        out
    }

    /// FNV-1a over [`ModelState::to_bytes`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deep copy; cost depends only on the configuration.
pub fn snapshot(state: &ModelState) -> ModelState {
    state.clone()
}

/// Runs every layer over `x[T, d_model]`; returns final-normed hidden rows.
pub fn lm_trunk_vars<B: Backend>(
    b: &mut B,
    w: &LmVars<B::Var>,
    x: &B::Var,
    state: &[(B::Var, B::Var)],
) -> Result<(B::Var, Vec<(B::Var, B::Var)>)> {
    if state.len() != w.layers.len() {
        return Err(shape_err("lm", format!("{} layer states for {} layers", state.len(), w.layers.len())));
    }
    let mut h = x.clone();
    let mut next = Vec::with_capacity(state.len());
    for (layer, (ctx, ssm)) in w.layers.iter().zip(state) {
        let (y, c, s) = mamba_block_vars(b, layer, &h, ctx, ssm)?;
        h = y;
        next.push((c, s));
    }
    let out = b.rms_norm(&h, &w.norm_f, NORM_EPS)?;
    Ok((out, next))
}

/// Per-position logits `[T, V]` for a token sequence from zero state.
pub fn lm_logits_vars<B: Backend>(b: &mut B, w: &LmWeights, vars: &LmVars<B::Var>, ids: &[TokenId]) -> Result<B::Var> {
    let x = b.gather_rows(&vars.embedding, ids)?;
    let zero = ModelState::zeros(&w.cfg, w.dtype());
    let st: Vec<_> = zero
        .layers
        .iter()
        .map(|l| (b.constant(l.conv.frames().clone()), b.constant(l.ssm.h.clone())))
        .collect();
    let (h, _) = lm_trunk_vars(b, vars, &x, &st)?;
    b.matmul(&h, &vars.head)
}

/// Consumes `embs[T, d_model]`; returns the advanced state and the logits
/// at the last position.
pub fn prefill(state: &ModelState, embs: &Tensor, w: &LmWeights) -> Result<(ModelState, Tensor)> {
    let shape = embs.shape();
    if shape.len() != 2 || shape[1] != w.cfg.d_model {
        return Err(shape_err("prefill", format!("embeddings {shape:?}, d_model {}", w.cfg.d_model)));
    }
    if shape[0] == 0 {
        return Err(invalid("prefill: nothing to consume"));
    }
    if state.layers.len() != w.layers.len() {
        return Err(shape_err("prefill", "state layer count does not match weights"));
    }
    let mut b = Eager;
    let vars = w.lift(&mut b)?;
    let x = b.constant(embs.clone());
    let st: Vec<_> = state
        .layers
        .iter()
        .map(|l| (b.constant(l.conv.frames().clone()), b.constant(l.ssm.h.clone())))
        .collect();
    for (l, (c, s)) in w.layers.iter().zip(&st) {
        let want = l.zero_state();
        if c.shape() != want.conv.frames().shape() || s.shape() != want.ssm.h.shape() {
            return Err(shape_err("prefill", "state extents do not match weights"));
        }
    }
    // the final norm and head are row-local, so only the last row is needed
    let mut h = x;
    let mut layers = Vec::with_capacity(st.len());
    for (layer, (ctx, ssm)) in vars.layers.iter().zip(&st) {
        let (y, c, s) = mamba_block_vars(&mut b, layer, &h, ctx, ssm)?;
        h = y;
        layers.push(LayerState {
            conv: ConvState::from_frames((*c).clone())?,
            ssm: SsmState { h: (*s).clone() },
        });
    }
    let last = b.slice_rows(&h, shape[0] - 1, 1)?;
    let n = b.rms_norm(&last, &vars.norm_f, NORM_EPS)?;
    let logits = b.matmul(&n, &vars.head)?;
    let logits = logits.reshape(&[w.cfg.vocab])?;
    Ok((
        ModelState {
            layers,
            position: state.position + shape[0] as u64,
        },
        logits,
    ))
}

pub fn decode_step(state: &ModelState, token: TokenId, w: &LmWeights) -> Result<(ModelState, Tensor)> {
    if token >= w.cfg.vocab {
        return Err(Error::Index {
            op: "decode_step",
            index: token,
            len: w.cfg.vocab,
        });
    }
    prefill(state, &w.embed(&[token])?, w)
}

/// Feeds token ids in one prefill call.
pub fn feed_tokens(state: &ModelState, ids: &[TokenId], w: &LmWeights) -> Result<(ModelState, Tensor)> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= w.cfg.vocab) {
        return Err(Error::Index {
            op: "feed_tokens",
            index: bad,
            len: w.cfg.vocab,
        });
    }
    prefill(state, &w.embed(ids)?, w)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Greedy,
    Restricted(Vec<TokenId>),
}

/// Argmax over all ids or over the given set; ties go to the lowest id.
pub fn select_next(logits: &Tensor, mode: &Selection) -> Result<TokenId> {
    let v = logits.to_f64_vec();
    let mut ids: Vec<TokenId> = match mode {
        Selection::Greedy => (0..v.len()).collect(),
        Selection::Restricted(set) => {
            if set.is_empty() {
                return Err(invalid("restricted selection needs a nonempty id set"));
            }
            set.clone()
        }
    };
    ids.sort_unstable();
    ids.dedup();
    let mut best = None::<(TokenId, f64)>;
    for id in ids {
        let x = *v.get(id).ok_or(Error::Index {
            op: "select_next",
            index: id,
            len: v.len(),
        })?;
        if best.is_none_or(|(_, bx)| x > bx) {
            best = Some((id, x));
        }
    }
    Ok(best.expect("nonempty").0)
}

/// Temperature sampling; `temperature == 0` falls back to greedy.
pub fn sample_next(logits: &Tensor, temperature: f64, rng: &mut Rng) -> Result<TokenId> {
    if temperature <= 0.0 {
        return select_next(logits, &Selection::Greedy);
    }
    let v = logits.to_f64_vec();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, pi) in p.iter().enumerate() {
        if u < *pi {
            return Ok(i);
        }
        u -= pi;
    }
    Ok(p.len() - 1)
}

/// Feeds `<|endofspeech|>`, picks the state token by restricted argmax, and
/// feeds it. The caller keeps the pre-probe state for rollback.
pub fn probe_state_token(state: &ModelState, w: &LmWeights, v: &Vocab) -> Result<(StateToken, ModelState)> {
    let (s1, logits) = decode_step(state, v.id(Special::EndSpeech), w)?;
    let id = select_next(&logits, &Selection::Restricted(v.state_ids().to_vec()))?;
    let tok = v.state_of(id).expect("restricted to state ids");
    let (s2, _) = decode_step(&s1, id, w)?;
    Ok((tok, s2))
}
