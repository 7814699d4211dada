//! Deterministic fake language model whose next token is scripted from a
//! fixed-size summary of what it has consumed. Used for protocol tests.

use super::engine::DuplexModel;
use super::format::SlicePayload;
use crate::error::{invalid, Result};
use crate::lm::{fnv1a, Special, StateToken, TokenId, Vocab, BYTE_TOKENS, VOCAB_SIZE};
use crate::numerics::{DType, Tensor};

pub const QUERY_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedLm {
    /// Byte marking a complete query.
    pub terminator: u8,
    /// Byte marking speech not addressed to the assistant.
    pub marker: u8,
    /// Response length in tokens, excluding `<eos>`.
    pub response_len: usize,
}

impl Default for ScriptedLm {
    fn default() -> Self {
        ScriptedLm {
            terminator: b'?',
            marker: b'~',
            response_len: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StubState {
    query: [u8; QUERY_CAP],
    qlen: u8,
    in_speech: bool,
    terminated: bool,
    marked: bool,
    /// Index of the next response token while answering.
    reply: Option<u16>,
    position: u64,
}

impl StubState {
    fn new() -> Self {
        StubState {
            query: [0; QUERY_CAP],
            qlen: 0,
            in_speech: false,
            terminated: false,
            marked: false,
            reply: None,
            position: 0,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = self.query.to_vec();
        b.extend([self.qlen, self.in_speech as u8, self.terminated as u8, self.marked as u8]);
        b.extend(self.reply.map_or([0xff; 2], u16::to_le_bytes));
        b.extend(self.position.to_le_bytes());
        b
    }
}

impl ScriptedLm {
    /// `"ans "` followed by the query bytes, cycled to `response_len`.
    pub fn response(&self, s: &StubState) -> Vec<u8> {
        let q: Vec<u8> = s.query[..s.qlen as usize]
            .iter()
            .copied()
            .filter(|&b| b != self.marker && b != self.terminator)
            .collect();
        let mut r = b"ans ".to_vec();
        let mut i = 0;
        while r.len() < self.response_len && !q.is_empty() {
            r.push(q[i % q.len()]);
            i += 1;
        }
        r.truncate(self.response_len);
        r
    }

    pub fn classify(&self, s: &StubState) -> StateToken {
        if !s.terminated {
            StateToken::Incomplete
        } else if s.marked {
            StateToken::Ignore
        } else {
            StateToken::Response
        }
    }

    fn step(&self, s: &mut StubState, id: TokenId) -> TokenId {
        let v = Vocab::new();
        let eos = v.id(Special::Eos);
        s.position += 1;
        match v.special_of(id) {
            Some(Special::BeginSpeech) => {
                s.in_speech = true;
                s.qlen = 0;
                s.terminated = false;
                s.marked = false;
                s.reply = None;
                eos
            }
            Some(Special::EndSpeech) => {
                s.in_speech = false;
                v.state_id(self.classify(s))
            }
            Some(Special::Assistant) => {
                s.reply = Some(0);
                self.next_reply(s)
            }
            Some(Special::Eos) | Some(Special::User) => {
                s.reply = None;
                eos
            }
            Some(_) => eos,
            None if s.in_speech => {
                let b = id as u8;
                if (s.qlen as usize) < QUERY_CAP {
                    s.query[s.qlen as usize] = b;
                    s.qlen += 1;
                }
                s.terminated |= b == self.terminator;
                s.marked |= b == self.marker;
                eos
            }
            None => match s.reply {
                Some(i) => {
                    s.reply = Some(i + 1);
                    self.next_reply(s)
                }
                None => eos,
            },
        }
    }

    fn next_reply(&self, s: &StubState) -> TokenId {
        let r = self.response(s);
        let i = s.reply.unwrap_or(0) as usize;
        r.get(i).map_or(Vocab::new().id(Special::Eos), |&b| b as TokenId)
    }

    fn one_hot(id: TokenId) -> Tensor {
        let mut v = vec![0.0; VOCAB_SIZE];
        v[id] = 1.0;
        Tensor::from_f64(&[VOCAB_SIZE], v, DType::F32).expect("finite")
    }
}

impl DuplexModel for ScriptedLm {
    type State = StubState;

    fn fresh_state(&self) -> StubState {
        StubState::new()
    }

    fn feature_dim(&self) -> Option<usize> {
        None
    }

    fn check_payload(&self, p: &SlicePayload) -> Result<()> {
        match p {
            SlicePayload::MockTokens(ids) if !ids.is_empty() => {
                if ids.iter().all(|&i| i < BYTE_TOKENS) {
                    Ok(())
                } else {
                    Err(invalid("scripted model accepts byte tokens only inside speech"))
                }
            }
            SlicePayload::MockTokens(_) => Err(invalid("empty token payload")),
            other => Err(invalid(format!("scripted model cannot consume {} payloads", other.mode()))),
        }
    }

    fn feed_tokens(&self, s: &StubState, ids: &[TokenId]) -> Result<(StubState, Tensor)> {
        if ids.is_empty() {
            return Err(invalid("nothing to consume"));
        }
        let mut n = s.clone();
        let mut next = 0;
        for &id in ids {
            Vocab::new().check(id)?;
            next = self.step(&mut n, id);
        }
        Ok((n, Self::one_hot(next)))
    }

    fn feed_speech(&self, s: &StubState, p: &SlicePayload) -> Result<StubState> {
        self.check_payload(p)?;
        match p {
            SlicePayload::MockTokens(ids) => Ok(self.feed_tokens(s, ids)?.0),
            _ => unreachable!("checked"),
        }
    }

    fn fingerprint(&self, s: &StubState) -> u64 {
        fnv1a(&s.to_bytes())
    }

    fn state_bytes(&self, s: &StubState) -> usize {
        s.to_bytes().len()
    }
}
