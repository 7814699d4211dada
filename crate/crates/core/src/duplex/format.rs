//! Scenario and trace JSONL files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lm::TokenId;

/// Input carried by one slice.
#[derive(Debug, Clone, PartialEq)]
pub enum SlicePayload {
    /// Row-major `[T_f, d_feat]` filterbank-like features.
    Features(Vec<f32>),
    /// Row-major `[T_s, d_lm]` embeddings that bypass encoder and adapter.
    MockEmb(Vec<f32>),
    /// Token ids standing in for the speech span.
    MockTokens(Vec<TokenId>),
}

impl SlicePayload {
    pub fn mode(&self) -> &'static str {
        match self {
            SlicePayload::Features(_) => "features",
            SlicePayload::MockEmb(_) => "mock_emb",
            SlicePayload::MockTokens(_) => "mock_tokens",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceEvent {
    pub t_ms: u64,
    pub payload: SlicePayload,
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PayloadLine {
    mode: String,
    data: Value,
}

#[derive(Serialize, Deserialize)]
struct ScenarioLine {
    t_ms: u64,
    kind: String,
    payload: PayloadLine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn f32_to_b64(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn b64_to_f32(s: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(s).map_err(|e| Error::Format(format!("payload base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("payload byte length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl SliceEvent {
    fn to_line(&self) -> ScenarioLine {
        let data = match &self.payload {
            SlicePayload::Features(v) | SlicePayload::MockEmb(v) => Value::String(f32_to_b64(v)),
            SlicePayload::MockTokens(t) => Value::from(t.clone()),
        };
        ScenarioLine {
            t_ms: self.t_ms,
            kind: "slice".into(),
            payload: PayloadLine {
                mode: self.payload.mode().into(),
                data,
            },
            note: self.note.clone(),
        }
    }

    fn from_line(l: ScenarioLine) -> Result<Self> {
        if l.kind != "slice" {
            return Err(Error::Format(format!("unknown scenario event kind {:?}", l.kind)));
        }
        let floats = |v: &Value| match v {
            Value::String(s) => b64_to_f32(s),
            _ => Err(Error::Format("float payload must be a base64 string".into())),
        };
        let payload = match l.payload.mode.as_str() {
            "features" => SlicePayload::Features(floats(&l.payload.data)?),
            "mock_emb" => SlicePayload::MockEmb(floats(&l.payload.data)?),
            "mock_tokens" => SlicePayload::MockTokens(serde_json::from_value(l.payload.data)?),
            m => return Err(Error::Format(format!("unknown payload mode {m:?}"))),
        };
        Ok(SliceEvent {
            t_ms: l.t_ms,
            payload,
            note: l.note,
        })
    }
}

/// Time-ordered slice arrivals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub events: Vec<SliceEvent>,
}

impl Scenario {
    pub fn new(events: Vec<SliceEvent>) -> Result<Self> {
        if events.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
            return Err(Error::Format("scenario events are not sorted by t_ms".into()));
        }
        Ok(Scenario { events })
    }

    /// Blank lines are skipped.
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ScenarioLine =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("scenario line {}: {e}", i + 1)))?;
            events.push(SliceEvent::from_line(l)?);
        }
        Self::new(events)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(&e.to_line()).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_jsonl())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    SessionStart,
    SessionEnd,
    SliceConsumed,
    SliceRejected,
    StateToken,
    BranchCreated,
    BranchPromoted,
    BranchDiscarded,
    Rollback,
    TextToken,
    ResponseStart,
    ResponseEnd,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::SessionStart => "session-start",
            TraceKind::SessionEnd => "session-end",
            TraceKind::SliceConsumed => "slice-consumed",
            TraceKind::SliceRejected => "slice-rejected",
            TraceKind::StateToken => "state-token",
            TraceKind::BranchCreated => "branch-created",
            TraceKind::BranchPromoted => "branch-promoted",
            TraceKind::BranchDiscarded => "branch-discarded",
            TraceKind::Rollback => "rollback",
            TraceKind::TextToken => "text-token",
            TraceKind::ResponseStart => "response-start",
            TraceKind::ResponseEnd => "response-end",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub seq: u64,
    pub kind: TraceKind,
    pub branch: u64,
    pub detail: String,
}

/// Skeleton entry for a run of text tokens.
pub const TEXT_RUN: &str = "text-token*";

/// Kinds whose detail is part of the skeleton.
fn detail_in_skeleton(k: TraceKind) -> bool {
    matches!(k, TraceKind::StateToken | TraceKind::ResponseEnd | TraceKind::Rollback)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(line).map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?);
        }
        Ok(Trace { events })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_jsonl())?)
    }

    /// Event kinds in order with runs of text tokens collapsed; state-token,
    /// rollback and response-end keep their detail (`state-token:RE`).
    pub fn skeleton(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.events {
            let s = match e.kind {
                TraceKind::TextToken => TEXT_RUN.to_string(),
                k if detail_in_skeleton(k) => format!("{k}:{}", e.detail),
                k => k.to_string(),
            };
            if s == TEXT_RUN && out.last().is_some_and(|l| l == TEXT_RUN) {
                continue;
            }
            out.push(s);
        }
        out
    }

    pub fn of_kind(&self, k: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == k)
    }

    /// Text emitted on `branch`, in order.
    pub fn text_on(&self, branch: u64) -> Vec<String> {
        self.of_kind(TraceKind::TextToken)
            .filter(|e| e.branch == branch)
            .map(|e| e.detail.clone())
            .collect()
    }

    /// Structural checks: strictly increasing `seq`, nondecreasing time, and
    /// every created branch closed by exactly one promotion or discard.
    pub fn check(&self) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].seq <= w[0].seq || w[1].t_ms < w[0].t_ms {
                return Err(Error::Protocol(format!("trace order broken at seq {}", w[1].seq)));
            }
        }
        let mut open: Option<u64> = None;
        for e in &self.events {
            match e.kind {
                TraceKind::BranchCreated => {
                    if open.is_some() {
                        return Err(Error::Protocol(format!("second auxiliary branch {} while one is open", e.branch)));
                    }
                    open = Some(e.branch);
                }
                TraceKind::BranchPromoted | TraceKind::BranchDiscarded => {
                    if open != Some(e.branch) {
                        return Err(Error::Protocol(format!("{} of branch {} that is not open", e.kind, e.branch)));
                    }
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(b) = open {
            return Err(Error::Protocol(format!("branch {b} never closed")));
        }
        Ok(())
    }
}

impl FromStr for TraceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| Error::Format(format!("unknown trace kind {s:?}")))
    }
}
