use super::format::SlicePayload;
use crate::adapter::adapter_forward;
use crate::blocks::encoder_forward;
use crate::checkpoint::ModelBundle;
use crate::error::{invalid, Error, Result};
use crate::lm::{feed_tokens, prefill, ModelState, TokenId, Vocab};
use crate::numerics::Tensor;

/// What the session needs from a model: token feeding, speech feeding, and a
/// cloneable fixed-size state.
pub trait DuplexModel {
    type State: Clone;

    fn vocab(&self) -> Vocab {
        Vocab::new()
    }

    fn fresh_state(&self) -> Self::State;

    /// Feature width for `features` payloads, if the model accepts them.
    fn feature_dim(&self) -> Option<usize>;

    /// Rejects payloads that cannot yield at least one LM position.
    fn check_payload(&self, p: &SlicePayload) -> Result<()>;

    /// Consumes `ids`; returns the new state and the logits after the last id.
    fn feed_tokens(&self, s: &Self::State, ids: &[TokenId]) -> Result<(Self::State, Tensor)>;

    fn feed_speech(&self, s: &Self::State, p: &SlicePayload) -> Result<Self::State>;

    fn fingerprint(&self, s: &Self::State) -> u64;

    fn state_bytes(&self, s: &Self::State) -> usize;
}

/// The real encoder + adapter + Mamba LM stack.
#[derive(Debug, Clone)]
pub struct LmEngine {
    pub bundle: ModelBundle,
}

impl LmEngine {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        bundle.cfg.validate()?;
        if bundle.cfg.lm != bundle.lm.cfg {
            return Err(Error::Format("bundle config disagrees with language model weights".into()));
        }
        bundle.lm.check_consistent()?;
        if let (Some(e), Some(a)) = (&bundle.cfg.encoder, &bundle.adapter) {
            if a.d_model() != e.d_model || a.d_lm() != bundle.cfg.lm.d_model {
                return Err(Error::Format("adapter extents do not match encoder and LM".into()));
            }
        }
        Ok(LmEngine { bundle })
    }

    fn rows(data: &[f32], width: usize, what: &str) -> Result<usize> {
        if data.is_empty() || !data.len().is_multiple_of(width) {
            return Err(invalid(format!("{what} payload of {} values is not a whole number of width-{width} rows", data.len())));
        }
        Ok(data.len() / width)
    }

    /// Speech embeddings `[T_s, d_lm]` for one slice.
    pub fn speech_embeddings(&self, p: &SlicePayload) -> Result<Tensor> {
        self.check_payload(p)?;
        let dtype = self.bundle.dtype();
        match p {
            SlicePayload::Features(v) => {
                let cfg = self.bundle.cfg.encoder.as_ref().expect("checked");
                let t = Tensor::from_f32(&[v.len() / cfg.d_feat, cfg.d_feat], v.clone())?.to_dtype(dtype);
                let enc = self.bundle.encoder.as_ref().expect("checked");
                let h = encoder_forward(&t, cfg, enc)?;
                Ok(adapter_forward(&h, self.bundle.adapter.as_ref().expect("checked"))?.s)
            }
            SlicePayload::MockEmb(v) => {
                let d = self.bundle.cfg.lm.d_model;
                Ok(Tensor::from_f32(&[v.len() / d, d], v.clone())?.to_dtype(dtype))
            }
            SlicePayload::MockTokens(ids) => self.bundle.lm.embed(ids),
        }
    }
}

impl DuplexModel for LmEngine {
    type State = ModelState;

    fn fresh_state(&self) -> ModelState {
        ModelState::zeros(&self.bundle.cfg.lm, self.bundle.dtype())
    }

    fn feature_dim(&self) -> Option<usize> {
        self.bundle.cfg.encoder.as_ref().map(|e| e.d_feat)
    }

    fn check_payload(&self, p: &SlicePayload) -> Result<()> {
        match p {
            SlicePayload::Features(v) => {
                let cfg = self.bundle.cfg.encoder.as_ref().ok_or_else(|| invalid("model has no speech encoder"))?;
                let t_f = Self::rows(v, cfg.d_feat, "features")?;
                if t_f < cfg.min_frames() {
                    return Err(invalid(format!("{t_f} frames is below the encoder receptive field")));
                }
                if cfg.output_frames(t_f) < self.bundle.cfg.adapter_k {
                    return Err(invalid(format!("{t_f} frames yield no adapter output")));
                }
                Ok(())
            }
            SlicePayload::MockEmb(v) => Self::rows(v, self.bundle.cfg.lm.d_model, "mock_emb").map(|_| ()),
            SlicePayload::MockTokens(ids) => {
                if ids.is_empty() {
                    return Err(invalid("empty token payload"));
                }
                ids.iter().try_for_each(|&i| self.vocab().check(i))
            }
        }
    }

    fn feed_tokens(&self, s: &ModelState, ids: &[TokenId]) -> Result<(ModelState, Tensor)> {
        feed_tokens(s, ids, &self.bundle.lm)
    }

    fn feed_speech(&self, s: &ModelState, p: &SlicePayload) -> Result<ModelState> {
        let e = self.speech_embeddings(p)?;
        Ok(prefill(s, &e, &self.bundle.lm)?.0)
    }

    fn fingerprint(&self, s: &ModelState) -> u64 {
        s.fingerprint()
    }

    fn state_bytes(&self, s: &ModelState) -> usize {
        s.state_bytes()
    }
}
