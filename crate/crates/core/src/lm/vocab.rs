use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Reserved tokens, in id order after the 256 byte tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    User,
    Assistant,
    BeginSpeech,
    EndSpeech,
    EndUser,
    Eos,
    Response,
    Incomplete,
    Ignore,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::User,
        Special::Assistant,
        Special::BeginSpeech,
        Special::EndSpeech,
        Special::EndUser,
        Special::Eos,
        Special::Response,
        Special::Incomplete,
        Special::Ignore,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::User => "<|user|>",
            Special::Assistant => "<|assistant|>",
            Special::BeginSpeech => "<|beginofspeech|>",
            Special::EndSpeech => "<|endofspeech|>",
            Special::EndUser => "<|endofuser|>",
            Special::Eos => "<eos>",
            Special::Response => "<response>",
            Special::Incomplete => "<incomplete>",
            Special::Ignore => "<ignore>",
        }
    }
}

/// Input-status classification predicted after `<|endofspeech|>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateToken {
    Response,
    Incomplete,
    Ignore,
}

impl StateToken {
    /// Ascending id order.
    pub const ALL: [StateToken; 3] = [StateToken::Response, StateToken::Incomplete, StateToken::Ignore];

    pub fn special(self) -> Special {
        match self {
            StateToken::Response => Special::Response,
            StateToken::Incomplete => Special::Incomplete,
            StateToken::Ignore => Special::Ignore,
        }
    }

    /// Two-letter trace abbreviation.
    pub fn short(self) -> &'static str {
        match self {
            StateToken::Response => "RE",
            StateToken::Incomplete => "IC",
            StateToken::Ignore => "IG",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.short() == s)
    }
}

impl fmt::Display for StateToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Byte-level vocabulary: ids `0..256` are raw bytes, specials follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocab;

pub const BYTE_TOKENS: usize = 256;
pub const VOCAB_SIZE: usize = BYTE_TOKENS + Special::ALL.len();

impl Vocab {
    pub fn new() -> Self {
        Vocab
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id(&self, s: Special) -> TokenId {
        BYTE_TOKENS + s as usize
    }

    pub fn special_of(&self, id: TokenId) -> Option<Special> {
        id.checked_sub(BYTE_TOKENS).and_then(|i| Special::ALL.get(i).copied())
    }

    pub fn state_id(&self, t: StateToken) -> TokenId {
        self.id(t.special())
    }

    pub fn state_ids(&self) -> [TokenId; 3] {
        StateToken::ALL.map(|t| self.state_id(t))
    }

    pub fn state_of(&self, id: TokenId) -> Option<StateToken> {
        StateToken::ALL.into_iter().find(|&t| self.state_id(t) == id)
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if id < VOCAB_SIZE {
            Ok(())
        } else {
            Err(Error::Index {
                op: "vocab",
                index: id,
                len: VOCAB_SIZE,
            })
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Inverse of [`Vocab::encode`]; specials render as their marker text.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.special_of(id) {
                Some(s) => bytes.extend_from_slice(s.text().as_bytes()),
                None if id < BYTE_TOKENS => bytes.push(id as u8),
                None => bytes.extend_from_slice(format!("<unk:{id}>").as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Display text for a single token, escaping non-printable bytes.
    pub fn token_text(&self, id: TokenId) -> String {
        match self.special_of(id) {
            Some(s) => s.text().to_string(),
            None if id < BYTE_TOKENS => (id as u8).escape_ascii().to_string(),
            None => format!("<unk:{id}>"),
        }
    }
}
