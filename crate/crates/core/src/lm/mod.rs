//! Mamba language model over a byte-level vocabulary with reserved dialogue
//! markers and state tokens.

mod model;
mod prompt;
mod vocab;

pub use model::{
    decode_step, feed_tokens, lm_logits_vars, lm_trunk_vars, prefill, probe_state_token, sample_next, select_next,
    snapshot, LmConfig, LmVars, LmWeights, ModelState, Selection,
};
pub(crate) use model::fnv1a;
pub use prompt::{assemble_probe_prompt, assemble_prompt, PromptLayout, Span};
pub use vocab::{Special, StateToken, TokenId, Vocab, BYTE_TOKENS, VOCAB_SIZE};
